# coding: utf-8

# # Operators and their backward maps
#
# Every differentiable op in `hime` returns its output together with a
# vector-Jacobian product. There is no tape: callers chain the vjps by hand,
# which keeps each backward pass small enough to read and to test.

# In[1]:

import numpy as np

from hime import diffops
from hime.gradcheck import gradcheck, run_suite

rng = np.random.default_rng(0)


# A convolution returns `(y, vjp)`. Feeding a cotangent to `vjp` gives one
# gradient per input: image, weight, bias.

# In[2]:

x = rng.standard_normal((1, 2, 6, 6))
w = rng.standard_normal((3, 2, 3, 3))
b = np.zeros((1, 3, 1, 1))
y, vjp = diffops.conv2d(x, w, b)
dx, dw, db = vjp(np.ones_like(y))
print(y.shape, dx.shape, dw.shape, db.ravel())


# ## Checking a vjp against finite differences
#
# `gradcheck` contracts the vjp with a random cotangent and compares it with
# central differences of the same scalar, coordinate by coordinate.

# In[3]:

report = gradcheck(lambda v: diffops.conv2d(*v), [x, w, b])
print(report.max_error, report.passed)


# A deliberately wrong backward pass is caught. Scaling every gradient by
# 1.01 shows up as a relative error near 1%.

# In[4]:

def off_by_one_percent(v):
    out, back = diffops.conv2d(*v)
    return out, lambda g: tuple(1.01 * t for t in back(g))

print(gradcheck(off_by_one_percent, [x, w, b]).max_error)


# ## Deformable sampling reduces to familiar ops
#
# With zero offsets the deformable convolution is a plain convolution, and
# with a 1x1 identity kernel it is a bilinear warp by the offsets.

# In[5]:

zero = np.zeros((1, 18, 6, 6))
print(np.abs(diffops.deformable_conv(x, w, b, zero)[0] - y).max())

flow = rng.uniform(-1.5, 1.5, (1, 2, 6, 6))
eye = np.eye(2).reshape(2, 2, 1, 1)
warped = diffops.deformable_conv(x, eye, np.zeros((1, 2, 1, 1)), diffops.broadcast_flow(flow, 1))[0]
print(np.abs(warped - diffops.bilinear_warp(x, flow)[0]).max())


# ## The whole suite
#
# The same check runs over every registered op, including the model stages
# and a sampled end-to-end gradient.

# In[6]:

for name, rep in run_suite():
    print(f"{name:20s} {rep.label:14s} {rep.max_error:.2e}")
