# %% [markdown]
# Reverse-mode gradients on top of numpy. Ops get recorded on a tape only
# when something upstream needs a gradient.

# %%
import numpy as np

from mmdit_adapter.tensor import Tensor, gelu, grad, layer_norm, linear, tsum

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((4, 6)), dtype=np.float64)
w = Tensor(rng.standard_normal((6, 3)) * 0.3, dtype=np.float64)
b = Tensor(np.zeros(3), dtype=np.float64)

def loss():
    h = layer_norm(gelu(linear(x, w, b)))
    return tsum(h * h)

value, (gw, gb) = grad(loss, [w, b])
print("loss", value)
print("dL/dw shape", gw.shape)

# %%
# compare one direction against a central difference
u = rng.standard_normal(w.shape)
u /= np.linalg.norm(u)
eps, base = 1e-3, w.data.copy()
w.data = base + eps * u
hi = float(loss().data)
w.data = base - eps * u
lo = float(loss().data)
w.data = base
print("analytic", float((gw * u).sum()), "numeric", (hi - lo) / (2 * eps))
