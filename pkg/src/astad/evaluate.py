"""Metrics (image/pixel AUROC), diagnostic artifacts (histograms, random
orthographic projections, score-map export) and the 1-D mini-MLP experiment
contrasting symmetric and asymmetric student-teacher pairs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import _atomic_write
from .errors import DegenerateLabelsError, DimensionError, NonFiniteError
from .tensor import Conv2d, Tensor
from .training import Adam, TrainConfig


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------

def _tied_ranks(x):
    """1-based ranks with ties sharing their average rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = ends - (counts - 1) / 2.0
    return avg[inverse]


def auroc(scores, labels):
    """P(score_pos > score_neg) + 0.5*P(tie), via average-rank statistics."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"auroc: {scores.shape[0]} scores vs {labels.shape[0]} labels")
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("auroc needs both classes present")
    ranks = _tied_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pixel_auroc(dist_maps, gt_masks, fg_masks=None):
    """AUROC over all evaluated pixels pooled across the test set.

    gt masks are binary at feature resolution; background pixels are dropped
    when foreground masks are supplied.
    """
    scores, labels = [], []
    fg_masks = fg_masks if fg_masks is not None else [None] * len(dist_maps)
    if not (len(dist_maps) == len(gt_masks) == len(fg_masks)):
        raise DimensionError("pixel_auroc: per-sample lists differ in length")
    for dist, gt, fg in zip(dist_maps, gt_masks, fg_masks):
        dist = np.asarray(dist, dtype=np.float64)
        gt = np.asarray(gt)
        if dist.shape != gt.shape:
            raise DimensionError(f"pixel_auroc: map {dist.shape} vs gt {gt.shape}")
        keep = np.ones(dist.shape, dtype=bool) if fg is None else np.asarray(fg) > 0
        scores.append(dist[keep])
        labels.append((gt > 0)[keep])
    return auroc(np.concatenate(scores), np.concatenate(labels).astype(np.float64))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass
class HistogramResult:
    edges: np.ndarray
    counts: dict  # class label (0/1) -> per-bin counts


def histogram(scores, labels, bins):
    """Per-class counts over shared bin edges spanning min..max of all scores."""
    if bins < 1:
        raise ValueError("histogram needs bins >= 1")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {}
    for cls in (0, 1):
        counts[cls], _ = np.histogram(scores[labels == cls], bins=edges)
    return HistogramResult(edges=edges, counts=counts)


def write_histogram_csv(path, hist):
    lines = ["bin_lo,bin_hi,count_normal,count_anomalous"]
    for i in range(len(hist.edges) - 1):
        lines.append(f"{hist.edges[i]:.17g},{hist.edges[i + 1]:.17g},"
                     f"{hist.counts[0][i]},{hist.counts[1][i]}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def random_orthonormal_basis(dim, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    return q


def random_projection_2d(points, seed):
    """Project C-dim points to 2-D with a seeded orthonormal basis.

    All points passed in one call share the basis, so teacher and student
    outputs of the same pixel stay comparable: project their concatenation.
    """
    pts = np.asarray([p.data if isinstance(p, Tensor) else p for p in points], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 2:
        raise DimensionError(f"random_projection_2d needs [N,C] points with C >= 2, got {pts.shape}")
    return pts @ random_orthonormal_basis(pts.shape[1], seed)


def projection_rows(test, teacher, student, seed=0, max_points=2000):
    """Paired teacher/student output projections for foreground pixels.

    Pools per-pixel output vectors across the test set (foreground only when
    masks exist), subsamples to max_points pixels, and projects teacher and
    student vectors with one shared basis.  Returns (rows, header) where each
    row is (kind, label, u, v).
    """
    from .data import positional_encoding

    h, w = test[0].features.shape[1:]
    pe = positional_encoding(h, w, teacher.condition_channels)
    teacher_pts, student_pts, labels = [], [], []
    for sample in test:
        x = sample.model_input().detach()
        z = teacher.forward(x, pe).z.data
        y = student.forward(x, pe, "eval").data
        mask = sample.mask_array()
        keep = np.ones((h, w), bool) if mask is None else mask > 0
        teacher_pts.append(z[:, keep].T)
        student_pts.append(y[:, keep].T)
        labels.extend([sample.label] * int(keep.sum()))
    teacher_pts = np.concatenate(teacher_pts)
    student_pts = np.concatenate(student_pts)
    labels = np.asarray(labels)
    if len(labels) > max_points:
        idx = np.random.default_rng(seed).choice(len(labels), max_points, replace=False)
        teacher_pts, student_pts, labels = teacher_pts[idx], student_pts[idx], labels[idx]
    both = random_projection_2d(np.concatenate([teacher_pts, student_pts]), seed)
    n = len(labels)
    rows = []
    for kind, proj in (("teacher", both[:n]), ("student", both[n:])):
        for label, (u, v) in zip(labels, proj):
            rows.append((kind, label, float(u), float(v)))
    return rows


def write_projections_csv(path, rows):
    lines = ["kind,label,u,v"]
    for kind, label, u, v in rows:
        lines.append(f"{kind},{label},{u:.17g},{v:.17g}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# metrics report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Image-level AUROC plus optional pixel-level AUROC and per-sample scores."""

    image_auroc: float
    teacher_image_auroc: float
    pixel_auroc: Optional[float]
    scores: list          # [{"index", "label", "score", "teacher_score"}]
    seed: int
    config_digest: str

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def compute_metrics(reports, seed=0, config_digest=""):
    """Build a MetricsReport from score_corpus output."""
    labels = np.array([1.0 if r.label == "anomalous" else 0.0 for r in reports])
    image = auroc([r.score for r in reports], labels)
    teacher_image = auroc([r.teacher_score for r in reports], labels)
    pix = None
    if any(r.gt_mask is not None for r in reports):
        dist_maps, gts, fgs = [], [], []
        for r in reports:
            gt = r.gt_mask if r.gt_mask is not None else np.zeros_like(r.dist_map)
            dist_maps.append(r.dist_map)
            gts.append(gt)
            fgs.append(r.mask)
        pix = pixel_auroc(dist_maps, gts, fgs)
    rows = [{"index": r.index, "label": r.label, "score": r.score,
             "teacher_score": r.teacher_score} for r in reports]
    return MetricsReport(image_auroc=image, teacher_image_auroc=teacher_image,
                         pixel_auroc=pix, scores=rows, seed=seed, config_digest=config_digest)


def write_scores_csv(path, reports):
    lines = ["index,label,score,teacher_score"]
    for r in reports:
        lines.append(f"{r.index},{r.label},{r.score:.17g},{r.teacher_score:.17g}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# score-map export
# ---------------------------------------------------------------------------

def export_score_map(dist, path):
    """Write a min-max normalized 16-bit binary PGM plus a raw-float CSV sidecar."""
    d = np.asarray(dist.data if isinstance(dist, Tensor) else dist, dtype=np.float64)
    if d.ndim != 2:
        raise DimensionError(f"score maps must be 2-D, got shape {d.shape}")
    lo, hi = float(d.min()), float(d.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    quantized = np.round((d - lo) * scale).astype(">u2")
    header = f"P5\n{d.shape[1]} {d.shape[0]}\n65535\n".encode("ascii")
    _atomic_write(path, header + quantized.tobytes())
    csv_lines = [",".join(f"{v:.17g}" for v in row) for row in d]
    _atomic_write(f"{path}.csv", ("\n".join(csv_lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# 1-D mini-MLP experiment (symmetric vs asymmetric student)
# ---------------------------------------------------------------------------

@dataclass
class ToySpec:
    """Scalar teacher/student regression setup on disjoint intervals."""

    seed: int = 0
    hidden_width: int = 32
    teacher_layers: int = 1
    symmetric_layers: int = 1
    asymmetric_layers: int = 3
    train_points: int = 256
    train_interval: tuple = (-1.0, 1.0)
    anomaly_intervals: tuple = ((-2.0, -1.0), (1.0, 2.0))
    eval_points_per_unit: int = 200
    steps: int = 3000
    lr: float = 1e-2

    def __post_init__(self):
        lo, hi = self.train_interval
        for a, b in self.anomaly_intervals:
            if a > b:
                raise ValueError(f"bad anomaly interval ({a},{b})")
            if a < hi and b > lo:
                raise ValueError("anomaly intervals must be disjoint from the training interval")

    def to_dict(self):
        d = asdict(self)
        d["train_interval"] = list(self.train_interval)
        d["anomaly_intervals"] = [list(p) for p in self.anomaly_intervals]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "train_interval" in d:
            d["train_interval"] = tuple(d["train_interval"])
        if "anomaly_intervals" in d:
            d["anomaly_intervals"] = tuple(tuple(p) for p in d["anomaly_intervals"])
        return cls(**d)


class _ScalarMLP:
    """Scalar-to-scalar tanh MLP expressed through 1x1 convolutions.

    First-layer biases are drawn uniformly so the tanh transition centers
    spread across the working interval instead of all sitting at zero.
    """

    def __init__(self, n_hidden_layers, width, rng, first_scale=2.0,
                 first_bias=1.0, mid_bias=0.5):
        first = Conv2d(1, width, 1, rng=rng, weight_scale=first_scale, name="in")
        first.bias.data = rng.uniform(-first_bias, first_bias, width).astype(np.float32)
        layers = [first]
        for i in range(n_hidden_layers - 1):
            mid = Conv2d(width, width, 1, rng=rng, name=f"mid{i}")
            mid.bias.data = rng.uniform(-mid_bias, mid_bias, width).astype(np.float32)
            layers.append(mid)
        layers.append(Conv2d(width, 1, 1, rng=rng, name="out"))
        self.layers = layers

    def __call__(self, x):
        h = x
        for layer in self.layers[:-1]:
            h = T.tanh(layer(h))
        return self.layers[-1](h)

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params


def _as_input(xs):
    return Tensor(np.asarray(xs, dtype=np.float32).reshape(-1, 1, 1, 1))


def _mlp_eval(mlp, xs):
    return mlp(_as_input(xs)).data.reshape(-1)


@dataclass
class ToyResult:
    symmetric_ood_dist: Optional[float]
    asymmetric_ood_dist: Optional[float]
    symmetric_train_err: float
    asymmetric_train_err: float
    teacher_range: float
    curves: np.ndarray  # columns: x, teacher, symmetric student, asymmetric student

    def summary_dict(self):
        return {
            "symmetric_ood_dist": self.symmetric_ood_dist,
            "asymmetric_ood_dist": self.asymmetric_ood_dist,
            "symmetric_train_err": self.symmetric_train_err,
            "asymmetric_train_err": self.asymmetric_train_err,
            "teacher_range": self.teacher_range,
        }


def _fit_mlp(model, x_in, target, spec):
    config = TrainConfig(lr=spec.lr, weight_decay=0.0, seed=spec.seed)
    opt = Adam(model.parameters(), config)
    for _ in range(spec.steps):
        loss = T.square(model(x_in) - target).mean()
        if not math.isfinite(loss.item()):
            raise NonFiniteError("toy training diverged")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def toy_experiment(spec):
    """Train symmetric and asymmetric students against a frozen trained teacher.

    The teacher is a one-hidden-layer MLP fitted to a seeded random sinusoid
    mixture on the training interval and then frozen, so its shape is a
    natural product of the same optimizer the students use.  Both students
    regress the teacher on the training interval; the reported numbers are
    the mean |student - teacher| on the disjoint anomaly intervals, plus
    dense curve samples for plotting.
    """
    rng = np.random.default_rng([spec.seed, 0])
    lo, hi = spec.train_interval
    xs_train = np.sort(rng.uniform(lo, hi, spec.train_points))
    freqs = rng.uniform(0.5, 4.0, 4)
    amps = rng.normal(0.0, 1.0, 4)
    phases = rng.uniform(0.0, 6.28, 4)
    pre_target = sum(a * np.sin(f * xs_train + p) for a, f, p in zip(amps, freqs, phases))
    teacher = _ScalarMLP(spec.teacher_layers, spec.hidden_width, rng)
    x_in = _as_input(xs_train)
    _fit_mlp(teacher, x_in, _as_input(pre_target), spec)

    target = Tensor(teacher(x_in).data.copy())
    sym = _fit_mlp(_ScalarMLP(spec.symmetric_layers, spec.hidden_width,
                              np.random.default_rng([spec.seed, 1])), x_in, target, spec)
    asym = _fit_mlp(_ScalarMLP(spec.asymmetric_layers, spec.hidden_width,
                               np.random.default_rng([spec.seed, 2])), x_in, target, spec)

    grid_train = np.linspace(lo, hi, max(2, int((hi - lo) * spec.eval_points_per_unit)))
    f_t = _mlp_eval(teacher, grid_train)
    teacher_range = float(f_t.max() - f_t.min())
    sym_train_err = float(np.abs(_mlp_eval(sym, grid_train) - f_t).mean())
    asym_train_err = float(np.abs(_mlp_eval(asym, grid_train) - f_t).mean())

    ood_points = []
    for a, b in spec.anomaly_intervals:
        n = int(round((b - a) * spec.eval_points_per_unit))
        if n > 0:
            ood_points.append(np.linspace(a, b, n))
    sym_ood = asym_ood = None
    if ood_points:
        xs_ood = np.concatenate(ood_points)
        f_t_ood = _mlp_eval(teacher, xs_ood)
        sym_ood = float(np.abs(_mlp_eval(sym, xs_ood) - f_t_ood).mean())
        asym_ood = float(np.abs(_mlp_eval(asym, xs_ood) - f_t_ood).mean())

    span = [lo, hi] + [v for pair in spec.anomaly_intervals for v in pair]
    xs_curve = np.linspace(min(span), max(span), 401)
    curves = np.column_stack([xs_curve, _mlp_eval(teacher, xs_curve),
                              _mlp_eval(sym, xs_curve), _mlp_eval(asym, xs_curve)])
    return ToyResult(symmetric_ood_dist=sym_ood, asymmetric_ood_dist=asym_ood,
                     symmetric_train_err=sym_train_err, asymmetric_train_err=asym_train_err,
                     teacher_range=teacher_range, curves=curves)


def write_toy_curves_csv(path, result):
    lines = ["x,teacher,student_symmetric,student_asymmetric"]
    for row in result.curves:
        lines.append(",".join(f"{v:.17g}" for v in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
