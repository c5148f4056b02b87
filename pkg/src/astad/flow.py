"""Conditional normalizing-flow teacher built from affine coupling blocks.

Each block applies a fixed channel permutation, splits the channels in half,
and updates the halves sequentially: the second half is scaled/shifted from
the first, then the first half is scaled/shifted from the already-transformed
second half.  That ordering keeps the Jacobian triangular, so the per-pixel
log-determinant is simply the channel sum of the clamped scale coefficients,
and the inverse is exact in two steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, NonFiniteError
from .tensor import Conv2d, Tensor

TWO_OVER_PI = 2.0 / math.pi


def clamp_scale(s_raw, alpha):
    """Soft-bound raw scale coefficients to (-alpha, alpha) via arctangent."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return T.atan(s_raw * (1.0 / alpha)) * (TWO_OVER_PI * alpha)


@dataclass
class FlowOutput:
    """Transformed tensor plus the per-pixel log-determinant it accumulated."""

    z: Tensor
    logdet_map: Tensor


class CouplingSubnet:
    """Shallow conv net: 3x3 conv -> ReLU -> 3x3 conv, output split into scale/shift."""

    def __init__(self, in_channels, hidden, out_channels, rng, dtype=np.float32, name="subnet"):
        self.conv1 = Conv2d(in_channels, hidden, 3, rng=rng, dtype=dtype, name=f"{name}.conv1")
        self.conv2 = Conv2d(hidden, out_channels, 3, rng=rng, dtype=dtype, name=f"{name}.conv2")

    def __call__(self, x):
        return self.conv2(T.relu(self.conv1(x)))

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters()


class CouplingBlock:
    """One invertible coupling step with a fixed channel permutation.

    The subnets see half the channels concatenated with the positional
    condition and emit raw scale/shift pairs.  Both are gated by a learnable
    scalar gamma initialized to zero, which makes the block the identity at
    the start of training; scales are alpha-clamped before exponentiation.
    """

    def __init__(self, channels, condition_channels, hidden, alpha, rng, index=0, dtype=np.float32):
        if channels % 2 != 0:
            raise DimensionError(f"coupling block needs an even channel count, got {channels}")
        self.channels = channels
        self.condition_channels = condition_channels
        self.alpha = float(alpha)
        self.index = index
        self.perm = np.asarray(rng.permutation(channels), dtype=np.intp)
        self.inv_perm = np.empty_like(self.perm)
        self.inv_perm[self.perm] = np.arange(channels)
        half = channels // 2
        name = f"block{index}"
        self.subnet1 = CouplingSubnet(half + condition_channels, hidden, channels, rng, dtype, f"{name}.subnet1")
        self.subnet2 = CouplingSubnet(half + condition_channels, hidden, channels, rng, dtype, f"{name}.subnet2")
        self.gamma1 = Tensor(np.zeros((), dtype=dtype), requires_grad=True, name=f"{name}.gamma1")
        self.gamma2 = Tensor(np.zeros((), dtype=dtype), requires_grad=True, name=f"{name}.gamma2")

    def _gate(self, subnet, gamma, driver, condition):
        raw = subnet(T.concat([driver, condition]))
        s_raw, t_raw = T.split_half(raw)
        return clamp_scale(gamma * s_raw, self.alpha), gamma * t_raw

    def forward(self, x, condition):
        """Returns (y, logdet_map); logdet_map is the per-pixel channel sum of scales."""
        xp = T.channel_permute(x, self.perm)
        x1, x2 = T.split_half(xp)
        s1, t1 = self._gate(self.subnet1, self.gamma1, x1, condition)
        y2 = x2 * T.exp(s1) + t1
        s2, t2 = self._gate(self.subnet2, self.gamma2, y2, condition)
        y1 = x1 * T.exp(s2) + t2
        y = T.concat([y1, y2])
        if not np.all(np.isfinite(y.data)):
            raise NonFiniteError(f"coupling block {self.index} produced non-finite values")
        ax = T._channel_axis(s1)
        logdet_map = s1.sum(axis=ax) + s2.sum(axis=ax)
        return y, logdet_map

    def inverse(self, y, condition):
        """Exact algebraic inverse of forward."""
        if y.shape[T._channel_axis(y)] != self.channels:
            raise DimensionError(f"inverse: expected {self.channels} channels, got {y.shape}")
        y1, y2 = T.split_half(y)
        s2, t2 = self._gate(self.subnet2, self.gamma2, y2, condition)
        x1 = (y1 - t2) * T.exp(-s2)
        s1, t1 = self._gate(self.subnet1, self.gamma1, x1, condition)
        x2 = (y2 - t1) * T.exp(-s1)
        return T.channel_permute(T.concat([x1, x2]), self.inv_perm)

    def parameters(self):
        params = self.subnet1.parameters() + self.subnet2.parameters()
        params.append((self.gamma1.name, self.gamma1))
        params.append((self.gamma2.name, self.gamma2))
        return params


class TeacherModel:
    """Stack of coupling blocks mapping inputs to a standard-normal code."""

    def __init__(self, channels, condition_channels=32, n_blocks=4, hidden=64,
                 alpha=3.0, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        self.channels = channels
        self.condition_channels = condition_channels
        self.hidden = hidden
        self.alpha = float(alpha)
        self.dtype = dtype
        self.blocks = [
            CouplingBlock(channels, condition_channels, hidden, alpha, rng, index=i, dtype=dtype)
            for i in range(n_blocks)
        ]

    @property
    def n_blocks(self):
        return len(self.blocks)

    def _check_input(self, x, condition):
        if x.shape[T._channel_axis(x)] != self.channels:
            raise DimensionError(f"teacher expects {self.channels} channels, got {x.shape}")
        if condition.shape[T._channel_axis(condition)] != self.condition_channels:
            raise DimensionError(
                f"teacher expects a {self.condition_channels}-channel condition, got {condition.shape}")

    def forward(self, x, condition):
        self._check_input(x, condition)
        condition = _tile_condition(condition, x)
        z = x
        logdet_map = None
        for block in self.blocks:
            z, ld = block.forward(z, condition)
            logdet_map = ld if logdet_map is None else logdet_map + ld
        return FlowOutput(z=z, logdet_map=logdet_map)

    def inverse(self, z, condition):
        self._check_input(z, condition)
        condition = _tile_condition(condition, z)
        x = z
        for block in reversed(self.blocks):
            x = block.inverse(x, condition)
        return x

    def parameters(self):
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    def randomize_parameters(self, rng, gamma_scale=0.7, weight_scale=None):
        """Draw non-degenerate parameters; used by numerical verification suites."""
        rng = np.random.default_rng(rng)
        for block in self.blocks:
            for subnet in (block.subnet1, block.subnet2):
                for conv in (subnet.conv1, subnet.conv2):
                    fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
                    scale = weight_scale if weight_scale is not None else math.sqrt(1.0 / fan_in)
                    conv.weight.data = rng.normal(0.0, scale, size=conv.weight.shape).astype(self.dtype)
                    conv.bias.data = rng.normal(0.0, 0.05, size=conv.bias.shape).astype(self.dtype)
            block.gamma1.data = np.asarray(rng.normal(0.0, gamma_scale), dtype=self.dtype)
            block.gamma2.data = np.asarray(rng.normal(0.0, gamma_scale), dtype=self.dtype)


def _tile_condition(condition, x):
    """Repeat a [C_pe,H,W] condition across the batch when x is batched."""
    if x.ndim == 3 or condition.ndim == 4:
        return condition
    tiled = np.broadcast_to(condition.data[None], (x.shape[0],) + condition.shape)
    return Tensor(np.ascontiguousarray(tiled))


def teacher_forward(model, x, condition):
    return model.forward(x, condition)


def teacher_inverse(model, z, condition):
    return model.inverse(z, condition)


def nll_map(out):
    """Per-pixel negative log likelihood: ||z||^2/2 minus the local log-det.

    The additive Gaussian normalization constant is omitted; callers that
    need true densities add (C/2)*log(2*pi) themselves.
    """
    ax = T._channel_axis(out.z)
    return T.square(out.z).sum(axis=ax) * 0.5 - out.logdet_map


def teacher_loss(model, x, condition, mask=None):
    """Mean NLL over foreground pixels across the batch (all pixels if unmasked)."""
    return T.masked_mean(nll_map(model.forward(x, condition)), mask)


def teacher_score_map(model, x, condition):
    """Teacher-only anomaly scores (higher = more anomalous): the NLL map."""
    return nll_map(model.forward(x.detach(), condition))
