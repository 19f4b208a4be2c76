"""Synthetic radar sequences, NWP surrogate frames and dataset windowing.

Frames are reflectivity in dBZ; :func:`normalize` maps them to the
model's [0, 1] range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fileformat import FormatError, read_sequence_file, write_sequence_file
from .model import ModelConfig, center_crop

DBZ_CEILING = 75.0
DATA_RANGE = 70.0


def normalize(dbz):
    return np.clip(np.asarray(dbz, dtype=np.float32), 0.0, DATA_RANGE) / np.float32(DATA_RANGE)


def denormalize(x):
    return np.asarray(x, dtype=np.float32) * np.float32(DATA_RANGE)


@dataclass
class RadarSequence:
    frames: np.ndarray  # [T, H, W] dBZ
    minute_offsets: np.ndarray
    cell_km: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.minute_offsets = np.asarray(self.minute_offsets, dtype=np.int64)
        if self.frames.ndim != 3 or self.frames.shape[1] != self.frames.shape[2]:
            raise ValueError(f"frames must be [T,H,H], got {self.frames.shape}")
        if self.minute_offsets.shape != (self.frames.shape[0],):
            raise ValueError("one minute offset per frame required")
        if np.any(np.diff(self.minute_offsets) <= 0):
            raise ValueError("minute offsets must be strictly increasing")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class SyntheticConfig:
    side: int = 80
    n_frames: int = 24
    cadence_min: int = 1
    n_cells: int = 6
    amplitude: tuple[float, float] = (30.0, 55.0)
    width: tuple[float, float] = (2.5, 6.0)  # Gaussian sigma range, px, drawn per axis
    velocity: tuple[float, float] = (1.0, 0.0)  # (x, y) px per frame, shared by all cells
    velocity_jitter: float = 0.0
    rotation: float = 0.0  # rad per frame about the domain center
    growth: tuple[float, float] = (0.0, 0.0)  # exponential rate range per frame
    onset: tuple[float, float] | None = None  # cells appear at a uniform frame in this range
    noise: float = 0.0
    cell_km: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.width[0] <= 0 or self.width[1] <= 0:
            raise ValueError("cell widths must be positive")


@dataclass
class Cell:
    x: float
    y: float
    amplitude: float
    sx: float
    sy: float
    angle: float
    vx: float
    vy: float
    growth: float
    onset: float


def draw_cells(cfg: SyntheticConfig, rng: np.random.Generator) -> list[Cell]:
    cells = []
    for _ in range(cfg.n_cells):
        onset = -np.inf if cfg.onset is None else float(rng.uniform(*cfg.onset))
        cells.append(
            Cell(
                x=float(rng.uniform(0, cfg.side)),
                y=float(rng.uniform(0, cfg.side)),
                amplitude=float(rng.uniform(*cfg.amplitude)),
                sx=float(rng.uniform(*cfg.width)),
                sy=float(rng.uniform(*cfg.width)),
                angle=float(rng.uniform(0, np.pi)),
                vx=cfg.velocity[0] + cfg.velocity_jitter * float(rng.normal()),
                vy=cfg.velocity[1] + cfg.velocity_jitter * float(rng.normal()),
                growth=float(rng.uniform(*cfg.growth)),
                onset=onset,
            )
        )
    return cells


def render_cells(cells: list[Cell], side: int, t: float, rotation: float = 0.0) -> np.ndarray:
    """Noise-free reflectivity at frame time ``t`` (unclipped)."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = np.zeros((side, side))
    mid = (side - 1) / 2.0
    cr, sr = np.cos(rotation * t), np.sin(rotation * t)
    for c in cells:
        if t < c.onset:
            continue
        # rotate the start position about the center, then advect
        px = mid + cr * (c.x - mid) - sr * (c.y - mid) + c.vx * t
        py = mid + sr * (c.x - mid) + cr * (c.y - mid) + c.vy * t
        ang = c.angle + rotation * t
        dx, dy = xx - px, yy - py
        u = np.cos(ang) * dx + np.sin(ang) * dy
        v = -np.sin(ang) * dx + np.cos(ang) * dy
        age = t if np.isinf(c.onset) else t - c.onset
        amp = c.amplitude * np.exp(c.growth * age)
        out += amp * np.exp(-0.5 * ((u / c.sx) ** 2 + (v / c.sy) ** 2))
    return out


def gen_synthetic_sequence(cfg: SyntheticConfig, id: str = "") -> RadarSequence:
    rng = np.random.default_rng(cfg.seed)
    cells = draw_cells(cfg, rng)
    frames = np.empty((cfg.n_frames, cfg.side, cfg.side), dtype=np.float32)
    for t in range(cfg.n_frames):
        f = render_cells(cells, cfg.side, float(t), cfg.rotation)
        if cfg.noise > 0:
            f = f + cfg.noise * rng.normal(size=f.shape)
        frames[t] = np.clip(f, 0.0, DBZ_CEILING)
    offsets = np.arange(cfg.n_frames, dtype=np.int64) * cfg.cadence_min
    return RadarSequence(frames, offsets, cfg.cell_km, id=id or f"synthetic-{cfg.seed}")


def surrogate_positions(t_out: int, k: int) -> np.ndarray:
    if k == 1:
        return np.zeros(1)
    return np.linspace(0.0, t_out - 1, k)


def make_hrrr_surrogate(
    truth_targets: np.ndarray,
    quality: float,
    seed: int,
    k: int = 7,
    blur_sigma: float = 2.0,
    max_shift: float = 3.0,
    noise_std: float = 3.0,
) -> np.ndarray:
    """Degraded coarse-cadence copy of the target frames, [K, 1, H, W] in dBZ.

    Frame j samples the targets at position j*(T_o-1)/(K-1), interpolating
    linearly between neighbours. Blur, displacement and noise all scale with
    (1 - quality); quality 1 returns the clean sampled truth.
    """
    truth = np.asarray(truth_targets, dtype=np.float64)
    t_out = truth.shape[0]
    if k > t_out:
        raise ValueError(f"K={k} exceeds the {t_out} target frames")
    if not 0.0 <= quality <= 1.0:
        raise ValueError("quality must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    direction = rng.uniform(0, 2 * np.pi)
    noise = rng.normal(size=(k,) + truth.shape[1:])
    degrade = 1.0 - quality
    pos = surrogate_positions(t_out, k)
    out = np.empty((k, 1) + truth.shape[1:], dtype=np.float32)
    for j, p in enumerate(pos):
        lo = min(int(np.floor(p)), t_out - 1)
        hi = min(lo + 1, t_out - 1)
        frac = p - lo
        f = truth[lo] if frac == 0 else (1 - frac) * truth[lo] + frac * truth[hi]
        if degrade > 0:
            shift = max_shift * degrade
            f = ndimage.shift(f, (shift * np.sin(direction), shift * np.cos(direction)), order=1, mode="constant")
            if blur_sigma > 0:
                f = ndimage.gaussian_filter(f, blur_sigma * degrade, mode="constant")
            f = f + noise_std * degrade * noise[j]
        out[j, 0] = np.clip(f, 0.0, DBZ_CEILING)
    return out


@dataclass
class WindowConfig:
    t_in: int = 20
    t_out: int = 45
    in_cadence_min: int = 4
    out_cadence_min: int = 8
    stride_min: int = 60
    hrrr_frames: int = 7
    hrrr_quality: float | None = None  # None: no surrogate frames
    hrrr_blur: float = 2.0
    hrrr_shift: float = 3.0
    hrrr_noise: float = 3.0
    seed: int = 0

    @classmethod
    def for_model(cls, config: ModelConfig, **kw) -> "WindowConfig":
        return cls(t_in=config.t_in, t_out=config.t_out, hrrr_frames=config.hrrr_frames, **kw)


@dataclass
class DatasetWindow:
    inputs: np.ndarray  # [T_i, H, W] dBZ
    targets: np.ndarray  # [T_o, H, W] dBZ
    input_minutes: np.ndarray
    target_minutes: np.ndarray
    hrrr: np.ndarray | None = None  # [K, 1, H, W] dBZ
    source_id: str = ""

    @property
    def lead_minutes(self) -> np.ndarray:
        return self.target_minutes - self.input_minutes[-1]


def window_dataset(seq: RadarSequence, cfg: WindowConfig) -> list[DatasetWindow]:
    index = {int(m): i for i, m in enumerate(seq.minute_offsets)}
    first, last = int(seq.minute_offsets[0]), int(seq.minute_offsets[-1])
    in_rel = np.arange(cfg.t_in) * cfg.in_cadence_min
    out_rel = in_rel[-1] + np.arange(1, cfg.t_out + 1) * cfg.out_cadence_min
    windows = []
    start = first
    n = 0
    while start + out_rel[-1] <= last:
        im, om = start + in_rel, start + out_rel
        if all(int(m) in index for m in im) and all(int(m) in index for m in om):
            targets = seq.frames[[index[int(m)] for m in om]]
            hrrr = None
            if cfg.hrrr_quality is not None:
                hrrr = make_hrrr_surrogate(
                    targets,
                    cfg.hrrr_quality,
                    seed=cfg.seed * 1_000_003 + n,
                    k=cfg.hrrr_frames,
                    blur_sigma=cfg.hrrr_blur,
                    max_shift=cfg.hrrr_shift,
                    noise_std=cfg.hrrr_noise,
                )
            windows.append(
                DatasetWindow(
                    inputs=seq.frames[[index[int(m)] for m in im]],
                    targets=targets,
                    input_minutes=im.astype(np.int64),
                    target_minutes=om.astype(np.int64),
                    hrrr=hrrr,
                    source_id=seq.id,
                )
            )
            n += 1
        start += max(cfg.stride_min, 1)
    return windows


@dataclass
class Batch:
    inputs: np.ndarray  # normalized, [B, T_i, side, side] at the model's input side
    targets: np.ndarray  # normalized, [B, T_o, 1, S, S]
    targets_dbz: np.ndarray  # [B, T_o, 1, S, S]
    hrrr: np.ndarray | None = None  # normalized, [B, K, 1, S, S]
    last_input_dbz: np.ndarray = field(default=None)  # [B, S, S] center tile


def make_batch(windows: list[DatasetWindow], config: ModelConfig) -> Batch:
    """Stack windows and cut them to the model's viewport (full LV raster or center tile)."""
    f = config.lv_factor
    inputs = np.stack([w.inputs for w in windows])
    side = inputs.shape[-1]
    if side == f * config.target_size:
        crop = lambda a: center_crop(a, f)  # noqa: E731
    elif side == config.target_size:
        crop = lambda a: a  # noqa: E731
    else:
        raise ValueError(f"raster side {side} fits neither the target tile nor the large viewport")
    if not config.use_lv:
        inputs = crop(inputs)
    elif side != f * config.target_size:
        raise ValueError("large-viewport model needs full-domain rasters")
    targets_dbz = crop(np.stack([w.targets for w in windows]))[:, :, None]
    hrrr = None
    if config.use_hrrr:
        if any(w.hrrr is None for w in windows):
            raise ValueError("HRRR-conditioned model needs surrogate frames in every window")
        hrrr = normalize(crop(np.stack([w.hrrr for w in windows])))
    last = crop(np.stack([w.inputs[-1] for w in windows]))
    return Batch(
        inputs=normalize(inputs),
        targets=normalize(targets_dbz),
        targets_dbz=np.ascontiguousarray(targets_dbz, dtype=np.float32),
        hrrr=hrrr,
        last_input_dbz=np.ascontiguousarray(last, dtype=np.float32),
    )


def write_sequence(path, seq: RadarSequence) -> None:
    write_sequence_file(path, seq.frames, seq.minute_offsets, seq.cell_km)


def read_sequence(path) -> RadarSequence:
    frames, offsets, cell_km = read_sequence_file(path)
    return RadarSequence(frames, offsets, cell_km, id=Path(path).stem)


__all__ = [
    "Batch",
    "DatasetWindow",
    "FormatError",
    "RadarSequence",
    "SyntheticConfig",
    "WindowConfig",
    "denormalize",
    "gen_synthetic_sequence",
    "make_batch",
    "make_hrrr_surrogate",
    "normalize",
    "read_sequence",
    "window_dataset",
    "write_sequence",
]
