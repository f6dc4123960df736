"""
Gradients from the tape
=======================

Build a small expression, run backward, and compare with a finite difference.
"""

import numpy as np

from protoparts import autodiff as ad
from protoparts.autodiff import Tensor

rng = np.random.default_rng(0)

# a 3x3 convolution followed by relu and a 2x2 max pool
x = Tensor(rng.normal(size=(1, 2, 6, 6)))
k = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
out = ad.sum(ad.maxpool2d(ad.relu(ad.conv2d(x, k, padding=1))))
ad.backward(out)
print("loss", float(out.data))

# nudge one kernel weight and watch the loss move
h = 1e-3
k.data[0, 0, 1, 1] += h
up = float(ad.sum(ad.maxpool2d(ad.relu(ad.conv2d(x, k, padding=1)))).data)
k.data[0, 0, 1, 1] -= 2 * h
down = float(ad.sum(ad.maxpool2d(ad.relu(ad.conv2d(x, k, padding=1)))).data)
k.data[0, 0, 1, 1] += h
print("backward ", k.grad[0, 0, 1, 1])
print("numerical", (up - down) / (2 * h))
