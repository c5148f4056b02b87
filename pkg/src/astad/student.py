"""Convolutional student that regresses the flow teacher's outputs.

The student is an ordinary feed-forward net (no invertibility): an entry conv
lifting the input to the hidden width, residual blocks of conv/batch-norm/
leaky-ReLU pairs, and an exit conv down to the teacher's channel count.  The
per-pixel squared distance between student and teacher outputs is the anomaly
score.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, EmptyForegroundError
from .flow import _tile_condition
from .tensor import BatchNormState, Conv2d, Tensor


class ResidualBlock:
    """Two (3x3 conv, batch norm, leaky ReLU) sequences with an additive skip."""

    def __init__(self, width, slope=0.2, bn_momentum=0.1, rng=None, dtype=np.float32, name="res"):
        self.slope = slope
        self.conv1 = Conv2d(width, width, 3, rng=rng, bias=False, dtype=dtype, name=f"{name}.conv1")
        self.bn1 = BatchNormState(width, momentum=bn_momentum, dtype=dtype, name=f"{name}.bn1")
        self.conv2 = Conv2d(width, width, 3, rng=rng, bias=False, dtype=dtype, name=f"{name}.conv2")
        self.bn2 = BatchNormState(width, momentum=bn_momentum, dtype=dtype, name=f"{name}.bn2")

    def forward(self, x, mode):
        h = T.leaky_relu(T.batchnorm2d(self.conv1(x), self.bn1, mode), self.slope)
        h = T.leaky_relu(T.batchnorm2d(self.conv2(h), self.bn2, mode), self.slope)
        return x + h

    def parameters(self):
        return (self.conv1.parameters() + self.bn1.parameters()
                + self.conv2.parameters() + self.bn2.parameters())


class StudentModel:
    """Residual conv regressor from (input ++ positional condition) to teacher space."""

    def __init__(self, in_channels, condition_channels=32, out_channels=None, hidden=64,
                 n_st_blocks=4, slope=0.2, bn_momentum=0.1, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        self.in_channels = in_channels
        self.condition_channels = condition_channels
        self.out_channels = in_channels if out_channels is None else out_channels
        self.hidden = hidden
        self.slope = slope
        self.entry = Conv2d(in_channels + condition_channels, hidden, 3, rng=rng, dtype=dtype, name="entry")
        self.blocks = [
            ResidualBlock(hidden, slope, bn_momentum, rng=rng, dtype=dtype, name=f"res{i}")
            for i in range(n_st_blocks)
        ]
        self.exit = Conv2d(hidden, self.out_channels, 3, rng=rng, dtype=dtype, name="exit")

    @property
    def n_st_blocks(self):
        return len(self.blocks)

    def forward(self, x, condition, mode="eval"):
        if x.shape[T._channel_axis(x)] != self.in_channels:
            raise DimensionError(f"student expects {self.in_channels} input channels, got {x.shape}")
        if condition.shape[T._channel_axis(condition)] != self.condition_channels:
            raise DimensionError(
                f"student expects a {self.condition_channels}-channel condition, got {condition.shape}")
        h = T.leaky_relu(self.entry(T.concat([x, _tile_condition(condition, x)])), self.slope)
        for block in self.blocks:
            h = block.forward(h, mode)
        return self.exit(h)

    def parameters(self):
        params = self.entry.parameters()
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend(self.exit.parameters())
        return params

    def count_parameters(self):
        return sum(int(np.prod(p.shape)) for _, p in self.parameters())


def student_forward(model, x, condition, mode="eval"):
    return model.forward(x, condition, mode)


def distance_map(f_s, f_t):
    """Per-pixel squared L2 distance over channels between two feature maps."""
    if f_s.shape != f_t.shape:
        raise DimensionError(f"distance_map: shapes {f_s.shape} and {f_t.shape} differ")
    diff = f_s - f_t
    return T.square(diff).sum(axis=T._channel_axis(diff))


def student_loss(dist, mask=None):
    """Mean distance over foreground pixels (all pixels when unmasked)."""
    return T.masked_mean(dist, mask)


def image_score(dist, mask=None):
    """Aggregate a distance map to one score: max over foreground, or mean of all.

    With a foreground mask the score is the maximum distance inside the
    foreground; without one (RGB-only mode) it is the mean over all pixels.
    """
    d = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    if mask is None:
        return float(d.mean(dtype=np.float64))
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != d.shape:
        raise DimensionError(f"image_score: mask shape {m.shape} != distance shape {d.shape}")
    selected = d[m > 0]
    if selected.size == 0:
        raise EmptyForegroundError("image_score: mask selects no foreground pixels")
    return float(selected.max())
