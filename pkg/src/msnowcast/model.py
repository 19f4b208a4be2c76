"""Three-layer ConvLSTM encoder-forecaster with large-viewport input and NWP conditioning."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .autodiff import ConfigurationError, Tensor, make_result

N_LAYERS = 3


@dataclass(frozen=True)
class ModelConfig:
    t_in: int = 20
    t_out: int = 45
    lv_factor: int = 5
    target_size: int = 256
    use_lv: bool = True
    use_hrrr: bool = True
    # encoder down-convs, one entry per layer (L0, L1, L2)
    down_channels: tuple[int, ...] = (16, 192, 192)
    down_kernels: tuple[int, ...] = (6, 5, 3)
    down_strides: tuple[int, ...] = (3, 3, 2)
    down_paddings: tuple[int, ...] = (0, 1, 1)
    hidden_channels: tuple[int, ...] = (64, 192, 192)
    cell_kernel: int = 3
    # forecaster up-convs, indexed by the layer they follow
    up_channels: tuple[int, ...] = (16, 64, 192)
    up_kernels: tuple[int, ...] = (7, 5, 4)
    up_strides: tuple[int, ...] = (3, 3, 2)
    up_paddings: tuple[int, ...] = (0, 1, 1)
    head_kernel: int = 3
    group_norm_groups: int = 4
    group_norm_eps: float = 1e-5
    leaky_slope: float = 0.2
    hrrr_frames: int = 7

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration: 16-pixel targets, 4 input and 6 output frames."""
        base = dict(
            t_in=4,
            t_out=6,
            lv_factor=5,
            target_size=16,
            down_channels=(8, 16, 16),
            down_kernels=(4, 3, 3),
            down_strides=(2, 2, 2),
            down_paddings=(1, 1, 1),
            hidden_channels=(8, 16, 16),
            up_channels=(8, 8, 16),
            up_kernels=(4, 4, 4),
            up_strides=(2, 2, 2),
            up_paddings=(1, 1, 1),
            hrrr_frames=3,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def input_channels(self) -> int:
        return self.lv_factor**2 if self.use_lv else 1

    @property
    def input_side(self) -> int:
        return self.lv_factor * self.target_size if self.use_lv else self.target_size

    def layer_sizes(self) -> list[int]:
        sizes, s = [], self.target_size
        for k, st, p in zip(self.down_kernels, self.down_strides, self.down_paddings):
            s = ops.conv_out_size(s, k, st, p)
            sizes.append(s)
        return sizes

    def upsampled_sizes(self) -> list[int]:
        """Spatial size produced by each forecaster layer's up-conv."""
        sizes = self.layer_sizes()
        return [
            ops.conv_transpose_out_size(sizes[l], self.up_kernels[l], self.up_strides[l], self.up_paddings[l])
            for l in range(N_LAYERS)
        ]

    def forecaster_input_channels(self, layer: int) -> int:
        if layer == N_LAYERS - 1:
            return self.down_channels[-1]
        return self.up_channels[layer + 1]

    def validate(self) -> "ModelConfig":
        for name in ("down_channels", "down_kernels", "down_strides", "down_paddings", "hidden_channels",
                     "up_channels", "up_kernels", "up_strides", "up_paddings"):
            if len(getattr(self, name)) != N_LAYERS:
                raise ConfigurationError(f"{name} needs {N_LAYERS} entries")
        if self.t_in < 1 or self.t_out < 1:
            raise ConfigurationError("t_in and t_out must be positive")
        if self.use_hrrr and self.hrrr_frames < 2 and self.hrrr_frames != self.t_out:
            raise ConfigurationError("hrrr_frames must be >= 2")
        sizes = self.layer_sizes()
        chain = [self.target_size] + sizes
        if any(b >= a or b < 1 for a, b in zip(chain, chain[1:])):
            raise ConfigurationError(f"encoder spatial chain must strictly decrease, got {chain}")
        if self.upsampled_sizes() != chain[:-1]:
            raise ConfigurationError(
                f"forecaster up-convs give {self.upsampled_sizes()}, expected {chain[:-1]}"
            )
        for l in range(N_LAYERS):
            if (4 * self.hidden_channels[l]) % self.group_norm_groups:
                raise ConfigurationError(f"layer {l}: {4 * self.hidden_channels[l]} gate channels not divisible by groups")
        return self

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, **variant_flags(variant))


VARIANTS = {
    "base": dict(use_lv=False, use_hrrr=False),
    "hrrr": dict(use_lv=False, use_hrrr=True),
    "lv": dict(use_lv=True, use_hrrr=False),
    "hrrr_lv": dict(use_lv=True, use_hrrr=True),
}


def variant_flags(variant: str) -> dict:
    try:
        return dict(VARIANTS[variant])
    except KeyError:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class ConvLSTMCellParams:
    gate_weight: Tensor
    gate_bias: Tensor
    gn_gamma: Tensor
    gn_beta: Tensor

    def __post_init__(self):
        if self.gate_weight.shape[0] % 4:
            raise ConfigurationError(f"gate weight {self.gate_weight.shape} not divisible into 4 gates")

    @property
    def hidden_channels(self) -> int:
        return self.gate_weight.shape[0] // 4


@dataclass
class LayerState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ConfigurationError(f"h {self.h.shape} and c {self.c.shape} differ")


ModelParams = dict  # parameter name -> Tensor, ordered like the architecture table


def _enc(l: int, part: str) -> str:
    return f"L{l}-encoder-{part}"


def _fc(l: int, part: str) -> str:
    return f"L{l}-forecaster-{part}"


BRIDGE = "hidden-state-weights"


def param_manifest(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable array. The down-conv spelling mirrors the architecture table."""
    c = config
    k = c.cell_kernel
    m: dict[str, tuple[int, ...]] = {BRIDGE: (c.t_in,)}
    for l in range(N_LAYERS):
        cin = c.input_channels if l == 0 else c.hidden_channels[l - 1]
        ch = c.hidden_channels[l]
        m[_enc(l, "downsconv-weight")] = (c.down_channels[l], cin, c.down_kernels[l], c.down_kernels[l])
        m[_enc(l, "downsconv-bias")] = (c.down_channels[l],)
        m[_enc(l, "convlstmcell-weight")] = (4 * ch, c.down_channels[l] + ch, k, k)
        m[_enc(l, "convlstmcell-bias")] = (4 * ch,)
        m[_enc(l, "groupnorm-weight")] = (4 * ch,)
        m[_enc(l, "groupnorm-bias")] = (4 * ch,)
    if c.use_hrrr:
        for i in range(N_LAYERS):
            cin = 1 if i == 0 else c.down_channels[i - 1]
            m[f"hrrr-conditioning-downconv-{i}-weight"] = (c.down_channels[i], cin, c.down_kernels[i], c.down_kernels[i])
            m[f"hrrr-conditioning-downconv-{i}-bias"] = (c.down_channels[i],)
    for l in reversed(range(N_LAYERS)):
        ch = c.hidden_channels[l]
        m[_fc(l, "convlstmcell-weight")] = (4 * ch, c.forecaster_input_channels(l) + ch, k, k)
        m[_fc(l, "convlstmcell-bias")] = (4 * ch,)
        m[_fc(l, "groupnorm-weight")] = (4 * ch,)
        m[_fc(l, "groupnorm-bias")] = (4 * ch,)
        m[_fc(l, "upconv-weight")] = (ch, c.up_channels[l], c.up_kernels[l], c.up_kernels[l])
        m[_fc(l, "upconv-bias")] = (c.up_channels[l],)
    head = c.up_channels[0]
    m["final-conv.0.weight"] = (head, head, c.head_kernel, c.head_kernel)
    m["final-conv.0.bias"] = (head,)
    m["final-conv.2.weight"] = (1, head, 1, 1)
    m["final-conv.2.bias"] = (1,)
    return m


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform fan-in kernels, zero biases, unit/zero group-norm affine, one-hot(last) bridge."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in param_manifest(config).items():
        if name == BRIDGE:
            arr = np.zeros(shape)
            arr[-1] = 1.0
        elif name.endswith("groupnorm-weight"):
            arr = np.ones(shape)
        elif name.endswith("bias"):
            arr = np.zeros(shape)
        else:
            # transposed-conv kernels are [Cin, Cout, k, k]; fan-in counts the Cout*k*k taps
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), name=name)
    return params


def cell_params(params: ModelParams, layer: int, role: str) -> ConvLSTMCellParams:
    name = _enc if role == "encoder" else _fc
    return ConvLSTMCellParams(
        params[name(layer, "convlstmcell-weight")],
        params[name(layer, "convlstmcell-bias")],
        params[name(layer, "groupnorm-weight")],
        params[name(layer, "groupnorm-bias")],
    )


def lv_stack(frame: Tensor, factor: int) -> Tensor:
    """[B,1,F*S,F*S] -> [B,F*F,S,S]; tile (r, c) lands in channel r*F + c."""
    b, ch, hh, ww = frame.shape
    if ch != 1 or hh != ww or hh % factor:
        raise ConfigurationError(f"cannot tile {frame.shape} by factor {factor}")
    s = hh // factor
    out = frame.data.reshape(b, factor, s, factor, s).transpose(0, 1, 3, 2, 4).reshape(b, factor * factor, s, s)

    def grad_fn(g):
        return (g.reshape(b, factor, factor, s, s).transpose(0, 1, 3, 2, 4).reshape(b, 1, hh, ww),)

    return make_result(np.ascontiguousarray(out), (frame,), grad_fn, "lv_stack")


def lv_unstack(stacked: Tensor, factor: int) -> Tensor:
    b, ch, s, s2 = stacked.shape
    if ch != factor * factor or s != s2:
        raise ConfigurationError(f"{stacked.shape} is not a {factor}x{factor} tiling")
    out = stacked.data.reshape(b, factor, factor, s, s).transpose(0, 1, 3, 2, 4).reshape(b, 1, factor * s, factor * s)

    def grad_fn(g):
        return (g.reshape(b, factor, s, factor, s).transpose(0, 1, 3, 2, 4).reshape(b, ch, s, s),)

    return make_result(np.ascontiguousarray(out), (stacked,), grad_fn, "lv_unstack")


def center_crop(frames: np.ndarray, factor: int) -> np.ndarray:
    """Center tile of side H/factor over the last two axes."""
    side = frames.shape[-1]
    s = side // factor
    lo = (factor // 2) * s
    return frames[..., lo : lo + s, lo : lo + s]


def convlstm_cell_step(x: Tensor, state: LayerState, cell: ConvLSTMCellParams, groups: int = 4, eps: float = 1e-5) -> LayerState:
    k = cell.gate_weight.shape[-1]
    if x.shape[1] + state.h.shape[1] != cell.gate_weight.shape[1]:
        raise ConfigurationError(
            f"cell expects {cell.gate_weight.shape[1]} input+hidden channels, got {x.shape[1]}+{state.h.shape[1]}"
        )
    z = ops.conv2d(ops.concat_channels([x, state.h]), cell.gate_weight, cell.gate_bias, 1, k // 2)
    z = ops.group_norm(z, groups, cell.gn_gamma, cell.gn_beta, eps)
    i, f, g, o = ops.split_channels(z, 4)
    c = ops.add(ops.mul(ops.sigmoid(f), state.c), ops.mul(ops.sigmoid(i), ops.tanh(g)))
    h = ops.mul(ops.sigmoid(o), ops.tanh(c))
    return LayerState(h, c)


def zero_state(batch: int, channels: int, size: int, dtype) -> LayerState:
    z = np.zeros((batch, channels, size, size), dtype=dtype)
    return LayerState(Tensor(z), Tensor(z.copy()))


def _dtype(params: ModelParams):
    return params[BRIDGE].dtype


def encode(frames: Tensor, params: ModelParams, config: ModelConfig) -> tuple[list[Tensor], list[Tensor]]:
    """Run the encoder over [B,T,Cin,S,S].

    Returns per-layer hidden stacks [B,T,C_l,H_l,W_l] and per-layer final cell states.
    """
    b, t_len, cin, s, _ = frames.shape
    if cin != config.input_channels or s != config.target_size:
        raise ConfigurationError(
            f"encoder input {frames.shape} does not match config (channels {config.input_channels}, side {config.target_size})"
        )
    sizes = config.layer_sizes()
    dt = _dtype(params)
    states = [zero_state(b, config.hidden_channels[l], sizes[l], dt) for l in range(N_LAYERS)]
    cells = [cell_params(params, l, "encoder") for l in range(N_LAYERS)]
    hiddens: list[list[Tensor]] = [[] for _ in range(N_LAYERS)]
    for t in range(t_len):
        x = ops.select_time(frames, t)
        for l in range(N_LAYERS):
            x = ops.conv2d(
                x,
                params[_enc(l, "downsconv-weight")],
                params[_enc(l, "downsconv-bias")],
                config.down_strides[l],
                config.down_paddings[l],
            )
            x = ops.leaky_relu(x, config.leaky_slope)
            states[l] = convlstm_cell_step(x, states[l], cells[l], config.group_norm_groups, config.group_norm_eps)
            hiddens[l].append(states[l].h)
            x = states[l].h
    return [ops.stack_time(h) for h in hiddens], [st.c for st in states]


def bridge_hidden(hidden_stack: Tensor, w: Tensor) -> Tensor:
    """Weighted sum of all encoder hidden states over time: [B,m,C,H,W] -> [B,C,H,W]."""
    out = ops.temporal_weighted_sum(hidden_stack, w)
    return ops.reshape(out, (out.shape[0],) + out.shape[2:])


def bridge_states(hidden_stacks: list[Tensor], final_cells: list[Tensor], params: ModelParams) -> list[LayerState]:
    w = params[BRIDGE]
    return [LayerState(bridge_hidden(hs, w), c) for hs, c in zip(hidden_stacks, final_cells)]


def hrrr_encode(hrrr_frames: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """[B,K,1,S,S] NWP frames -> [B,T_o,C3,H3,W3] conditioning features."""
    b, k, ch, s, _ = hrrr_frames.shape
    if ch != 1 or s != config.target_size:
        raise ConfigurationError(f"HRRR frames {hrrr_frames.shape} must be [B,K,1,{config.target_size},{config.target_size}]")
    if k < 2 and k != config.t_out:
        raise ConfigurationError(f"need at least 2 HRRR frames, got {k}")
    x = ops.temporal_linear_interp(hrrr_frames, config.t_out)
    x = ops.reshape(x, (b * config.t_out, 1, s, s))
    for i in range(N_LAYERS):
        x = ops.conv2d(
            x,
            params[f"hrrr-conditioning-downconv-{i}-weight"],
            params[f"hrrr-conditioning-downconv-{i}-bias"],
            config.down_strides[i],
            config.down_paddings[i],
        )
        x = ops.leaky_relu(x, config.leaky_slope)
    return ops.reshape(x, (b, config.t_out) + x.shape[1:])


def forecast(states: list[LayerState], conditioning: Tensor | None, params: ModelParams, config: ModelConfig) -> Tensor:
    """Unroll the forecaster for T_o steps from the given per-layer states."""
    b = states[0].h.shape[0]
    sizes = config.layer_sizes()
    top = N_LAYERS - 1
    cond_shape = (b, config.t_out, config.down_channels[-1], sizes[top], sizes[top])
    if conditioning is not None and conditioning.shape != cond_shape:
        raise ConfigurationError(f"conditioning shape {conditioning.shape} != {cond_shape}")
    for l, st in enumerate(states):
        want = (b, config.hidden_channels[l], sizes[l], sizes[l])
        if st.h.shape != want:
            raise ConfigurationError(f"layer {l} state {st.h.shape} != {want}")
    cells = [cell_params(params, l, "forecaster") for l in range(N_LAYERS)]
    states = list(states)
    zeros = Tensor(np.zeros(cond_shape[:1] + cond_shape[2:], dtype=_dtype(params)))
    frames = []
    for t in range(config.t_out):
        x = ops.select_time(conditioning, t) if conditioning is not None else zeros
        for l in reversed(range(N_LAYERS)):
            states[l] = convlstm_cell_step(x, states[l], cells[l], config.group_norm_groups, config.group_norm_eps)
            x = ops.conv_transpose2d(
                states[l].h,
                params[_fc(l, "upconv-weight")],
                params[_fc(l, "upconv-bias")],
                config.up_strides[l],
                config.up_paddings[l],
            )
            x = ops.leaky_relu(x, config.leaky_slope)
        x = ops.conv2d(x, params["final-conv.0.weight"], params["final-conv.0.bias"], 1, config.head_kernel // 2)
        x = ops.leaky_relu(x, config.leaky_slope)
        x = ops.conv2d(x, params["final-conv.2.weight"], params["final-conv.2.bias"], 1, 0)
        frames.append(x)
    return ops.stack_time(frames)


def prepare_inputs(frames: np.ndarray, config: ModelConfig) -> Tensor:
    """Normalized [B,T,H,W] (or [B,T,1,H,W]) rasters -> encoder input [B,T,Cin,S,S].

    A large-viewport model also accepts input that is already tile-stacked.
    """
    arr = np.asarray(frames)
    if arr.ndim == 5 and config.use_lv and arr.shape[2] == config.input_channels:
        # already tile-stacked [B,T,F^2,S,S]
        if arr.shape[3:] != (config.target_size, config.target_size):
            raise ConfigurationError(f"stacked input must be {config.target_size}px tiles, got {arr.shape}")
        return Tensor(arr)
    if arr.ndim == 5:
        if arr.shape[2] != 1:
            raise ConfigurationError(f"expected a single raster channel, got {arr.shape}")
        arr = arr[:, :, 0]
    if arr.ndim != 4:
        raise ConfigurationError(f"expected [B,T,H,W] rasters, got {arr.shape}")
    b, t, side, _ = arr.shape
    if side != config.input_side:
        raise ConfigurationError(f"input side {side} != {config.input_side} (use_lv={config.use_lv})")
    if not config.use_lv:
        return Tensor(arr[:, :, None])
    f = config.lv_factor
    s = side // f
    out = arr.reshape(b, t, f, s, f, s).transpose(0, 1, 2, 4, 3, 5).reshape(b, t, f * f, s, s)
    return Tensor(np.ascontiguousarray(out))


def forward(frames, params: ModelParams, config: ModelConfig, hrrr=None) -> Tensor:
    """Normalized input rasters [B,T_i,H,W] (+ NWP frames [B,K,1,S,S]) -> forecast [B,T_o,1,S,S]."""
    if isinstance(frames, Tensor):
        frames = frames.data
    x = prepare_inputs(frames, config)
    if x.shape[1] != config.t_in:
        raise ConfigurationError(f"expected {config.t_in} input frames, got {x.shape[1]}")
    hidden, cells = encode(x, params, config)
    states = bridge_states(hidden, cells, params)
    cond = None
    if config.use_hrrr:
        if hrrr is None:
            raise ConfigurationError("config.use_hrrr is set but no HRRR frames were given")
        hrrr_t = hrrr if isinstance(hrrr, Tensor) else Tensor(np.asarray(hrrr, dtype=_dtype(params)))
        cond = hrrr_encode(hrrr_t, params, config)
    return forecast(states, cond, params, config)


def parameter_count(params: ModelParams) -> int:
    return int(sum(p.data.size for p in params.values()))
