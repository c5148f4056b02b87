"""Two-phase optimization: flow teacher by masked NLL, then student by masked
regression against frozen teacher outputs.  Includes Adam, deterministic
batching, end-to-end scoring, and the checkpoint container format.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import positional_encoding, tensor_from_bytes, tensor_to_bytes, _atomic_write
from .errors import FormatError, NonFiniteError
from .flow import TeacherModel, nll_map, teacher_loss
from .student import StudentModel, distance_map, image_score, student_loss
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Optimizer settings plus preset-derived model dimensions."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs_teacher: int = 240
    epochs_student: int = 240
    batch_size: int = 8
    seed: int = 0
    c_pe: int = 32
    n_blocks: int = 4
    alpha: float = 3.0
    teacher_hidden: int = 1024
    student_hidden: int = 1024
    n_st_blocks: int = 4
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    threads: int = 1

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "adam_eps", "batch_size", "c_pe",
                     "n_blocks", "alpha", "teacher_hidden", "student_hidden",
                     "n_st_blocks", "bn_momentum", "threads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        for name in ("epochs_teacher", "epochs_student", "weight_decay", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"TrainConfig.{name} must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    @classmethod
    def preset(cls, name, **overrides):
        """Named configurations: full-scale 2-D / 3-D runs and the fast desk scale."""
        presets = {
            "mvt2d": dict(epochs_teacher=240, epochs_student=240,
                          teacher_hidden=1024, student_hidden=1024, alpha=3.0),
            "mvt3d": dict(epochs_teacher=72, epochs_student=72,
                          teacher_hidden=64, student_hidden=1024, alpha=1.9),
            "desk": dict(epochs_teacher=30, epochs_student=30, lr=1e-3,
                         c_pe=8, teacher_hidden=32, student_hidden=64, alpha=3.0),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(presets)}")
        merged = dict(presets[name])
        merged.update(overrides)
        return cls(**merged)


def adam_step(theta, grad, m, v, step, *, lr, beta1, beta2, eps, weight_decay):
    """One bias-corrected Adam update; returns (theta, m, v).

    Weight decay is the classic coupled form, added to the gradient before
    the moment updates.  Internals run in float64; theta keeps its dtype.
    """
    g = grad.astype(np.float64)
    if weight_decay:
        g = g + weight_decay * theta.astype(np.float64)
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta = (theta.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(theta.dtype)
    return theta, m, v


class Adam:
    """Adam over a list of (name, Tensor) parameters with float64 moments."""

    def __init__(self, params, config):
        self.params = list(params)
        self.lr = config.lr
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.step_count = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for _, p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for _, p in self.params]

    def step(self):
        self.step_count += 1
        for i, (name, p) in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            p.data, self.m[i], self.v[i] = adam_step(
                p.data, grad, self.m[i], self.v[i], self.step_count,
                lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                eps=self.eps, weight_decay=self.weight_decay)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def stack_batch(samples):
    """Stack sample inputs into [N,C,H,W] plus per-sample masks (or None)."""
    xs = np.stack([s.model_input().data for s in samples])
    if any(s.mask is not None for s in samples):
        masks = np.stack([
            s.mask_array() if s.mask is not None else np.ones(xs.shape[2:], dtype=np.float32)
            for s in samples
        ])
    else:
        masks = None
    return xs, masks


def _check_corpus(corpus):
    if not corpus:
        raise ValueError("training corpus is empty")
    for s in corpus:
        if s.label != "normal":
            raise ValueError("training corpora must contain only normal samples")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_teacher(corpus, config):
    """Fit the flow teacher by masked NLL; returns (model, per-epoch mean losses)."""
    _check_corpus(corpus)
    x_all, masks = stack_batch(corpus)
    _, c, h, w = x_all.shape
    pe = positional_encoding(h, w, config.c_pe)
    model = TeacherModel(c, config.c_pe, config.n_blocks, config.teacher_hidden,
                         config.alpha, rng=np.random.default_rng([config.seed, 10]))
    opt = Adam(model.parameters(), config)
    shuffle_rng = np.random.default_rng([config.seed, 11])
    losses = []
    for epoch in range(config.epochs_teacher):
        total, count = 0.0, 0
        for batch_no, idx in enumerate(_batches(len(corpus), config.batch_size, shuffle_rng)):
            xb = Tensor(x_all[idx])
            mb = None if masks is None else masks[idx]
            loss = teacher_loss(model, xb, pe, mb)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"teacher loss non-finite at epoch {epoch}, batch {batch_no}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        losses.append(total / count)
    return model, losses


def _teacher_targets(model, x_all, pe, chunk=64):
    """Precompute frozen teacher outputs for every sample (no gradients)."""
    outs = []
    for start in range(0, len(x_all), chunk):
        z = model.forward(Tensor(x_all[start:start + chunk]), pe).z
        outs.append(z.data)
    return np.concatenate(outs, axis=0)


def train_student(corpus, teacher, config):
    """Fit the student to regress frozen teacher outputs; returns (model, losses)."""
    _check_corpus(corpus)
    x_all, masks = stack_batch(corpus)
    _, c_in, h, w = x_all.shape
    pe = positional_encoding(h, w, config.c_pe)
    targets = _teacher_targets(teacher, x_all, pe)
    model = StudentModel(c_in, config.c_pe, out_channels=teacher.channels,
                         hidden=config.student_hidden, n_st_blocks=config.n_st_blocks,
                         slope=config.leaky_slope, bn_momentum=config.bn_momentum,
                         rng=np.random.default_rng([config.seed, 20]))
    opt = Adam(model.parameters(), config)
    shuffle_rng = np.random.default_rng([config.seed, 21])
    losses = []
    for epoch in range(config.epochs_student):
        total, count = 0.0, 0
        for batch_no, idx in enumerate(_batches(len(corpus), config.batch_size, shuffle_rng)):
            xb = Tensor(x_all[idx])
            mb = None if masks is None else masks[idx]
            pred = model.forward(xb, pe, "train")
            loss = student_loss(distance_map(pred, Tensor(targets[idx])), mb)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"student loss non-finite at epoch {epoch}, batch {batch_no}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        losses.append(total / count)
    return model, losses


@dataclass
class ScoreReport:
    """Per-sample scoring result: distance map, aggregated scores, labels."""

    index: int
    label: str
    score: float
    teacher_score: float
    dist_map: np.ndarray
    teacher_nll: np.ndarray
    mask: Optional[np.ndarray] = None
    gt_mask: Optional[np.ndarray] = None


def score_corpus(test, teacher, student, chunk=32):
    """Score each test sample with the trained pair (student in eval mode).

    The image score is the max distance over the foreground when the sample
    has a mask, the mean over all pixels otherwise.  The teacher-only NLL
    score (same aggregation) is reported for the density-estimation baseline.
    Samples are processed in chunks purely for speed; per-sample results do
    not depend on the ordering.
    """
    h, w = test[0].features.shape[1:]
    pe = positional_encoding(h, w, teacher.condition_channels)
    reports = []
    for start in range(0, len(test), chunk):
        batch = test[start:start + chunk]
        x = Tensor(np.stack([s.model_input().data for s in batch]))
        flow_out = teacher.forward(x, pe)
        dist = distance_map(student.forward(x, pe, "eval"), flow_out.z)
        nll = nll_map(flow_out)
        for j, sample in enumerate(batch):
            mask = sample.mask_array()
            reports.append(ScoreReport(
                index=start + j,
                label=sample.label,
                score=image_score(dist.data[j], mask),
                teacher_score=image_score(nll.data[j], mask),
                dist_map=dist.data[j].copy(),
                teacher_nll=nll.data[j].copy(),
                mask=None if mask is None else mask.copy(),
                gt_mask=None if sample.gt_mask is None else sample.gt_mask.data.copy(),
            ))
    return reports


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + concatenated ASTT sections
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"ASTC"
_CKPT_VERSION = 1


def _write_container(path, kind, config, meta, sections):
    blobs, index = [], []
    offset = 0
    for name, arr in sections:
        blob = tensor_to_bytes(arr)
        index.append({"name": name, "offset": offset, "length": len(blob),
                      "shape": list(np.asarray(arr).shape)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "version": _CKPT_VERSION, "config": config.to_dict(),
         "meta": meta, "sections": index},
        sort_keys=True).encode("utf-8")
    payload = _CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(header)) + header + b"".join(blobs)
    _atomic_write(path, payload)


def _read_container(path, expect_kind):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[0:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint container")
    version, header_len = struct.unpack_from("<II", buf, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[12:12 + header_len].decode("utf-8"))
    if header.get("kind") != expect_kind:
        raise FormatError(f"{path}: expected a {expect_kind} checkpoint, got {header.get('kind')!r}")
    base = 12 + header_len
    tensors = {}
    for section in header["sections"]:
        start = base + section["offset"]
        arr, _ = tensor_from_bytes(buf[start:start + section["length"]], base_offset=start)
        tensors[section["name"]] = arr
    return header, tensors


def save_teacher(path, model, config):
    meta = {
        "channels": model.channels,
        "condition_channels": model.condition_channels,
        "n_blocks": model.n_blocks,
        "hidden": model.hidden,
        "alpha": model.alpha,
        "perms": [block.perm.tolist() for block in model.blocks],
    }
    sections = [(name, p.data) for name, p in model.parameters()]
    _write_container(path, "teacher", config, meta, sections)


def load_teacher(path):
    header, tensors = _read_container(path, "teacher")
    meta = header["meta"]
    config = TrainConfig.from_dict(header["config"])
    model = TeacherModel(meta["channels"], meta["condition_channels"], meta["n_blocks"],
                         meta["hidden"], meta["alpha"], rng=np.random.default_rng(0))
    for block, perm in zip(model.blocks, meta["perms"]):
        block.perm = np.asarray(perm, dtype=np.intp)
        block.inv_perm = np.empty_like(block.perm)
        block.inv_perm[block.perm] = np.arange(block.perm.size)
    for name, p in model.parameters():
        if name not in tensors:
            raise FormatError(f"{path}: missing section {name!r}")
        p.data = tensors[name].reshape(p.shape)
    return model, config


def save_student(path, model, config):
    meta = {
        "in_channels": model.in_channels,
        "condition_channels": model.condition_channels,
        "out_channels": model.out_channels,
        "hidden": model.hidden,
        "n_st_blocks": model.n_st_blocks,
        "slope": model.slope,
    }
    sections = [(name, p.data) for name, p in model.parameters()]
    for i, block in enumerate(model.blocks):
        for tag, bn in (("bn1", block.bn1), ("bn2", block.bn2)):
            sections.append((f"res{i}.{tag}.running_mean", bn.running_mean))
            sections.append((f"res{i}.{tag}.running_var", bn.running_var))
    _write_container(path, "student", config, meta, sections)


def load_student(path):
    header, tensors = _read_container(path, "student")
    meta = header["meta"]
    config = TrainConfig.from_dict(header["config"])
    model = StudentModel(meta["in_channels"], meta["condition_channels"],
                         out_channels=meta["out_channels"], hidden=meta["hidden"],
                         n_st_blocks=meta["n_st_blocks"], slope=meta["slope"],
                         bn_momentum=config.bn_momentum, rng=np.random.default_rng(0))
    for name, p in model.parameters():
        if name not in tensors:
            raise FormatError(f"{path}: missing section {name!r}")
        p.data = tensors[name].reshape(p.shape)
    for i, block in enumerate(model.blocks):
        for tag, bn in (("bn1", block.bn1), ("bn2", block.bn2)):
            bn.running_mean = tensors[f"res{i}.{tag}.running_mean"].reshape(bn.running_mean.shape)
            bn.running_var = tensors[f"res{i}.{tag}.running_var"].reshape(bn.running_var.shape)
    return model, config
