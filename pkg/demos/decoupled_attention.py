# %% [markdown]
# Where the reference tokens enter the network. In training every query
# (text and image) attends to them; at inference only image queries do,
# so nothing the text branch does can reach the adapter term on the image.

# %%
import dataclasses

import numpy as np

from mmdit_adapter import AttentionMode, MMDiT, SubjectCondition
from mmdit_adapter.gradcheck import tiny_config
from mmdit_adapter.mmdit import AdapterProbe

model = MMDiT(dataclasses.replace(tiny_config(0), depth=3))
rng = np.random.default_rng(3)
x = rng.standard_normal((1, 8, 8, 3))
C, _ = model.reference_tokens(model.encode_reference(rng.uniform(-1, 1, x.shape)))
nudge = rng.standard_normal((3, model.cfg.width)) * 5

def image_terms(mode, delta):
    probe = AdapterProbe(text_query_delta=delta)
    model.predict_velocity(x, np.array([0.4]), np.array([[0, 5, 13]]), [SubjectCondition(C)], mode, probe)
    return probe.x_terms

# %%
for mode in (AttentionMode.INFER_IMAGE_ONLY, AttentionMode.BOTH_BRANCHES_LEGACY):
    a, b = image_terms(mode, None), image_terms(mode, nudge)
    print(mode.value, [float(np.abs(p - q).max()) for p, q in zip(a, b)])
# the legacy path stays clean for two layers: the text term first has to
# move T, then joint attention has to carry it into X
