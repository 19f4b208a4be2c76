"""One forward pass of the full-size model: [1,20,25,256,256] (+NWP [1,7,1,256,256]) -> [1,45,1,256,256]."""

import time

import numpy as np

from msnowcast.model import ModelConfig, forward, init_params, parameter_count

cfg = ModelConfig()
params = init_params(cfg, 0)
rng = np.random.default_rng(0)
x = rng.uniform(0, 1, size=(1, 20, 25, 256, 256)).astype(np.float32)
hrrr = rng.uniform(0, 1, size=(1, 7, 1, 256, 256)).astype(np.float32)
t0 = time.time()
y = forward(x, params, cfg, hrrr)
print(f"params {parameter_count(params):,}  output {y.shape}  {time.time() - t0:.1f}s")
