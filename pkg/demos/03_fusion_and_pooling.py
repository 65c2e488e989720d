"""Two-stream co-attention followed by top-rank attention pooling."""

import numpy as np

from survfuse.mhap import init_mhap, mhap_forward, self_attention_pool
from survfuse.tsmcat import init_tsmcat, tsmcat_forward

rng = np.random.default_rng(2)
C, d_k, d_model = 6, 8, 16
P0 = rng.normal(size=(C, d_k))
G0 = rng.normal(size=(C, d_k))

params = init_tsmcat(rng, d_k, d_model, depth=2)
states = []
P, G = tsmcat_forward(params, P0, G0, heads=4, states=states)
for s in states:
    print(f"level {s.depth}: intra {s.P_tr.shape}, cross {s.P_ctr.shape}, fused {s.P.shape}")

# a different gene input moves the image stream only through co-attention
P_other, _ = tsmcat_forward(params, P0, rng.normal(size=(C, d_k)), heads=4)
print("image stream change when genes change:", float(np.abs(P_other.data - P.data).max()))

pool = init_mhap(rng, 2 * d_model, heads=2)
for k in (1.0, 0.5, 0.1):
    trace = {}
    self_attention_pool(pool[0], P, k, trace=trace)
    print(f"k={k}: kept tokens {np.flatnonzero(trace['keep']).tolist()}")

y_p = mhap_forward(pool, P, 0.5)
print("pooled patient vector", y_p.shape)
