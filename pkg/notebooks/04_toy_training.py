# coding: utf-8

# # Training on synthetic exemplars
#
# The synthetic task renders a face-like texture with detail above the LR
# Nyquist limit. References are the same texture shifted by whole LR pixels
# and slightly rotated and scaled, so they carry the detail the LR input has
# lost, a little out of register.
#
# This script trains for a short while so it finishes in about a minute; the
# acceptance suite runs the same thing for 1000 steps.

# In[1]:

import tempfile
from pathlib import Path

from hime.model import HimeConfig, load_checkpoint
from hime.training import SynthSpec, train_toy

out_dir = Path(tempfile.mkdtemp(prefix="toy_"))
spec = SynthSpec(seed=0)
iters = 200


# ## With and without references
#
# The flow-guided aligner gets a block-matching flow per reference and learns
# a residual offset on top of it.

# In[2]:

results = {}
for n_refs in (0, 3):
    res = train_toy(HimeConfig.toy(n_refs=n_refs, rfa_mode="large"), spec, iters, eval_every=50)
    results[n_refs] = res
    print(n_refs, {k: round(v, 3) for k, v in res.holdout.items()})


# The log holds one row per step and a held-out PSNR every `eval_every` steps.

# In[3]:

print(results[3].csv_text().splitlines()[:3])
print([round(r["psnr_holdout"], 2) for r in results[3].log if r["psnr_holdout"] is not None])


# ## Checkpoints and sample images
#
# Passing `out_dir` writes the checkpoint, the CSV log and SR / bicubic / GT
# images at every `sample_every` steps.

# In[4]:

train_toy(HimeConfig.toy(), spec, 20, out_dir=out_dir, sample_every=10)
print(sorted(p.name for p in out_dir.iterdir()))
print(load_checkpoint(out_dir / "checkpoint.hmc").cfg)
