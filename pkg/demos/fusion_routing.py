# %% [markdown]
# Three encoder depths, three experts, one router. The router reads the CLS
# summaries and decides how much of each depth the adapter sees.

# %%
import numpy as np

from mmdit_adapter import MMDiT, ModelConfig, manual_coefficients
from mmdit_adapter.flow import make_scene
from mmdit_adapter.hmoe import expert_apply

model = MMDiT(ModelConfig())
rng = np.random.default_rng(1)
scenes = [make_scene(rng, "intra") for _ in range(4)]
refs = np.stack([s.reference for s in scenes])

feats = model.encode_reference(refs)
for lvl in ("low", "mid", "high"):
    print(lvl, feats.full[lvl].shape)

# %%
tokens, w = model.reference_tokens(feats)
print("routed weights (rows sum to 1)")
print(np.round(w.values(), 3), w.values().sum(-1))

# %%
# pin the mix by hand; (0, 0, 1) passes the deepest expert through untouched
only_high, _ = model.reference_tokens(feats, manual_coefficients(0, 0, 1))
experts = model.hmoe.experts
e_high = expert_apply(feats, experts, model.dtype)["high"]
print("identical to the high expert:", np.array_equal(only_high.data, e_high.data))
