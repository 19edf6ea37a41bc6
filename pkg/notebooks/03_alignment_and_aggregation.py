# coding: utf-8

# # Aligning and pooling a reference set
#
# References arrive at high resolution and slightly out of register. They are
# brought onto the LR feature grid, aligned by a deformable convolution, and
# pooled with per-pixel weights that say how well each one matches the input.

# In[1]:

import numpy as np

from hime.alignment import aggregate_baseline, block_match_flow, cofa_aggregate
from hime.imaging import make_lr
from hime.model import HimeConfig, hime_forward, model_init
from hime.training import SynthSpec, make_sample

rng = np.random.default_rng(2)


# ## Block matching
#
# The flow estimator returns integer displacements such that
# `dst(p) ~ src(p + flow(p))`.

# In[2]:

big = rng.uniform(0, 1, (1, 3, 56, 56))
src = big[:, :, 8:40, 8:40]
dst = big[:, :, 10:42, 9:41]
flow = block_match_flow(src, dst, search_radius=2)
inner = flow[0, :, 4:-4, 4:-4]
print("dy", np.unique(inner[0]), "dx", np.unique(inner[1]))


# ## Set pooling
#
# The weighted mean stays inside the per-element range of the set, does not
# care about order, and returns a single reference untouched.

# In[3]:

feats = [rng.standard_normal((1, 4, 5, 5)) for _ in range(3)]
scores = [rng.uniform(0.1, 1, (1, 1, 5, 5)) for _ in range(3)]
pooled = cofa_aggregate(feats, scores)[0]
stack = np.stack(feats)
print(bool((pooled >= stack.min(0)).all() and (pooled <= stack.max(0)).all()))
print(np.array_equal(pooled, cofa_aggregate(feats[::-1], scores[::-1])[0]))
print(np.array_equal(cofa_aggregate(feats[:1], scores[:1])[0], feats[0]))
print(np.abs(pooled - aggregate_baseline(feats, "average")[0]).mean())


# ## A forward pass with any number of references
#
# The model takes the LR image and a list of references; the list may be
# empty or longer than the set seen in training.

# In[4]:

sample = make_sample(SynthSpec(n_refs=5), 0)
model = model_init(HimeConfig.toy(), dtype=np.float64)
for n in (0, 1, 5):
    sr = hime_forward(model, sample.lr, sample.refs[:n])[0]
    print(n, sr.shape)


# The flow-guided mode needs one flow per reference. Here they come from
# block matching the downsampled reference against the LR input.

# In[5]:

large = model_init(HimeConfig.toy(rfa_mode="large"), dtype=np.float64)
flows = [block_match_flow(make_lr(r, 4), sample.lr, block=4, levels=2) for r in sample.refs[:3]]
print(hime_forward(large, sample.lr, sample.refs[:3], flows)[0].shape)
