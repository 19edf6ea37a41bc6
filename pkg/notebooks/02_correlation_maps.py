# coding: utf-8

# # Correlation maps as a structural loss
#
# A correlation map stores, for each pixel, the inner product of its
# centred colour vector with each neighbour in a k x k window. Comparing the
# maps of two images penalises wrong local structure rather than wrong
# intensities.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from hime.imaging import corrmap_visualize
from hime.losses import charbonnier, correlation_loss, correlation_map
from hime.training import render_texture

rng = np.random.default_rng(1)
out_dir = Path(tempfile.mkdtemp(prefix="corrmap_"))


# With k=1 the map is just the squared norm of each centred pixel.

# In[2]:

img = rng.uniform(0, 1, (1, 3, 5, 5))
cen = img - img.mean(axis=(2, 3), keepdims=True)
print(np.allclose(correlation_map(img, 1)[0], (cen ** 2).sum(axis=1, keepdims=True)))


# Adding a constant to a channel changes nothing, because channels are
# centred first.

# In[3]:

m3 = correlation_map(img, 3)[0]
print(np.abs(correlation_map(img + 0.2, 3)[0] - m3).max())


# ## Structure versus brightness
#
# A brightness offset costs a lot under Charbonnier but nothing under the
# correlation loss, while a one-pixel shift registers under both.

# In[4]:

hr = render_texture(rng, 64)
brighter = hr + 0.05
shifted = np.roll(hr, 1, axis=3)
for label, sr in [("brighter", brighter), ("shifted", shifted)]:
    print(label, round(float(charbonnier(sr, hr)[0]), 4), round(float(correlation_loss(sr, hr)[0]), 5))


# ## Rendering a map
#
# The summed map is written as a diverging colour image. Wider windows
# average more neighbours and render smoother.

# In[5]:

for k in (3, 7):
    corrmap_visualize(correlation_map(hr, k)[0], out_dir / f"corr_k{k}.png")
print(sorted(p.name for p in out_dir.iterdir()))
