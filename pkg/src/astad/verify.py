"""Numerical verification suites shared by the CLI and the acceptance tests:
gradient checks for every primitive and the composed losses, bijectivity and
log-determinant checks against brute-force Jacobians, rank-metric and
preprocessing oracles, and the desk-scale end-to-end study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
import numpy as np

from . import tensor as T
from .data import (
    DepthMap,
    SynthSpec,
    background_plane,
    downsample_mask,
    extract_foreground,
    fill_missing_depth,
    positional_encoding,
    synth_corpus,
)
from .evaluate import auroc, compute_metrics
from .flow import TeacherModel, teacher_loss
from .student import StudentModel, distance_map, student_loss
from .tensor import BatchNormState, Tensor, gradcheck
from .training import TrainConfig, score_corpus, train_student, train_teacher


@dataclass
class CheckRow:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self):
        return self.value < self.tolerance


# ---------------------------------------------------------------------------
# gradient-check suite
# ---------------------------------------------------------------------------

def _rand(rng, shape):
    return Tensor(rng.normal(size=shape))  # float64 for numerical verification


def _tiny_teacher(seed, dtype=np.float64, channels=4, c_pe=4, blocks=2, hidden=6, spatial=2):
    model = TeacherModel(channels, c_pe, blocks, hidden, alpha=3.0,
                         rng=np.random.default_rng([seed, 0]), dtype=dtype)
    model.randomize_parameters(np.random.default_rng([seed, 1]))
    pe = Tensor(positional_encoding(spatial, spatial, c_pe).data.astype(dtype))
    x = np.random.default_rng([seed, 2]).normal(size=(channels, spatial, spatial))
    return model, Tensor(np.asarray(x, dtype=dtype)), pe


def _tiny_student(seed, dtype=np.float64):
    model = StudentModel(4, 4, out_channels=4, hidden=6, n_st_blocks=1,
                         rng=np.random.default_rng([seed, 0]), dtype=dtype)
    pe = Tensor(positional_encoding(3, 3, 4).data.astype(dtype))
    rng = np.random.default_rng([seed, 1])
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    target = Tensor(rng.normal(size=(2, 4, 3, 3)))
    return model, x, target, pe


def param_gradcheck(loss_fn, params, h=1e-4):
    """Max relative error of d(loss)/d(param) over every parameter coordinate.

    Uses the same relative-error definition as tensor.gradcheck but perturbs
    model parameters in place, so composed losses can be checked without
    rebuilding the model functionally.
    """
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for name, p in params}
    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn().item()
            flat[i] = orig - h
            lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * h)
            rel = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
        p.grad = None
    return worst


def gradcheck_report(seed=0, points=10):
    """Gradcheck every primitive op (tol 1e-4) and the composed losses (tol 1e-3)."""
    rows = []
    rng = np.random.default_rng(seed)

    def multi(name, fn, shape, tol=1e-4, h=1e-5):
        worst = 0.0
        for _ in range(points):
            worst = max(worst, gradcheck(fn, _rand(rng, shape), h))
        rows.append(CheckRow(name, worst, tol))

    w_mix = Tensor(rng.normal(size=(3, 4, 4)))
    conv_w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    conv_b = Tensor(rng.normal(size=(3,)) * 0.5, requires_grad=True)
    conv_x = Tensor(rng.normal(size=(2, 4, 4)))
    multi("conv2d/input", lambda t: (T.conv2d(t, conv_w, conv_b) * w_mix).sum(), (2, 4, 4))
    multi("conv2d/weight", lambda t: (T.conv2d(conv_x, t, conv_b) * w_mix).sum(), (3, 2, 3, 3))
    multi("conv2d/bias", lambda t: (T.conv2d(conv_x, conv_w, t) * w_mix).sum(), (3,))

    bn = BatchNormState(3, dtype=np.float64)
    bn_mix = Tensor(rng.normal(size=(2, 3, 3, 3)))
    multi("batchnorm2d/train-input",
          lambda t: (T.batchnorm2d(t, bn, "train") * bn_mix).sum(), (2, 3, 3, 3), tol=1e-3)
    bn_x = Tensor(rng.normal(size=(2, 3, 3, 3)))

    def bn_gamma(t):
        state = BatchNormState(3, dtype=np.float64)
        state.gamma = t
        return (T.batchnorm2d(bn_x, state, "train") * bn_mix).sum()

    multi("batchnorm2d/train-gamma", bn_gamma, (3,), tol=1e-3)
    multi("batchnorm2d/eval-input",
          lambda t: (T.batchnorm2d(t, bn, "eval") * bn_mix).sum(), (2, 3, 3, 3))

    mix6 = Tensor(rng.normal(size=(6,)))
    multi("leaky_relu", lambda t: (T.leaky_relu(t, 0.2) * mix6).sum(), (6,))
    multi("exp", lambda t: (T.exp(t) * mix6).sum(), (6,))
    multi("atan", lambda t: (T.atan(t) * mix6).sum(), (6,))
    multi("square", lambda t: (T.square(t) * mix6).sum(), (6,))
    multi("tanh", lambda t: (T.tanh(t) * mix6).sum(), (6,))
    multi("exp-atan composition", lambda t: (T.exp(T.atan(t)) * mix6).sum(), (6,))

    other6 = Tensor(rng.normal(size=(6,)))
    multi("mul", lambda t: (t * other6).sum(), (6,))
    multi("add", lambda t: (t + other6).sum(), (6,))
    multi("sub", lambda t: (t - other6).sum(), (6,))
    multi("mean", lambda t: t.mean(), (3, 5))

    mix_ch = Tensor(rng.normal(size=(4, 4, 4)))
    perm = np.random.default_rng(seed).permutation(4)
    multi("channel_permute", lambda t: (T.channel_permute(t, perm) * mix_ch).sum(), (4, 4, 4))
    multi("split/concat", lambda t: (T.concat(list(T.split_half(t))) * mix_ch).sum(), (4, 4, 4))
    mix_un = Tensor(rng.normal(size=(16, 2, 2)))
    multi("pixel_unshuffle", lambda t: (T.pixel_unshuffle(t, 2) * mix_un).sum(), (4, 4, 4))

    from .flow import clamp_scale
    multi("clamp_scale", lambda t: (clamp_scale(t, 1.9) * mix6).sum(), (6,))

    # composed losses over inputs and over every model parameter
    model, x, pe = _tiny_teacher(seed)
    rows.append(CheckRow(
        "teacher NLL/input",
        gradcheck(lambda t: teacher_loss(model, t, pe), x, h=1e-4), 1e-3))
    rows.append(CheckRow(
        "teacher NLL/params",
        param_gradcheck(lambda: teacher_loss(model, Tensor(x.data), pe), model.parameters(), h=1e-3),
        1e-3))

    smodel, sx, starget, spe = _tiny_student(seed)

    def s_loss():
        return student_loss(distance_map(smodel.forward(Tensor(sx.data), spe, "train"),
                                         Tensor(starget.data)))

    rows.append(CheckRow(
        "student loss/input",
        gradcheck(lambda t: student_loss(
            distance_map(smodel.forward(t, spe, "train"), Tensor(starget.data))), sx, h=1e-4),
        1e-3))
    rows.append(CheckRow("student loss/params",
                         param_gradcheck(s_loss, smodel.parameters(), h=1e-4), 1e-3))
    return rows


# ---------------------------------------------------------------------------
# bijectivity / log-det suites
# ---------------------------------------------------------------------------

def bijectivity_report(seed=0, n_configs=20):
    """Round-trip inverse(forward(x)) error for random configurations (float32).

    Half the configurations take a few optimizer steps first so trained
    parameter regimes are covered too.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_configs):
        channels = int(rng.choice([4, 8, 16]))
        spatial = int(rng.integers(2, 7))
        blocks = int(rng.integers(1, 5))
        hidden = int(rng.choice([4, 8]))
        alpha = float(rng.choice([1.9, 3.0]))
        model = TeacherModel(channels, 4, blocks, hidden, alpha, rng=np.random.default_rng([seed, i]))
        model.randomize_parameters(np.random.default_rng([seed, i, 1]))
        pe = positional_encoding(spatial, spatial, 4)
        if i % 2 == 0:
            corpus_x = rng.normal(size=(8, channels, spatial, spatial)).astype(np.float32)
            from .training import Adam
            opt = Adam(model.parameters(), TrainConfig(lr=1e-3, seed=seed))
            for _ in range(3):
                loss = teacher_loss(model, Tensor(corpus_x), pe)
                opt.zero_grad()
                loss.backward()
                opt.step()
        x = Tensor(rng.normal(size=(channels, spatial, spatial)).astype(np.float32))
        out = model.forward(x, pe)
        err = float(np.abs(model.inverse(out.z, pe).data - x.data).max())
        rows.append(CheckRow(f"bijectivity[{i}] C={channels} {spatial}x{spatial} b={blocks}", err, 1e-4))
    return rows


def brute_force_logdet(model, x, pe, h=1e-4):
    """log|det J| of the flattened forward map via central differences."""
    shape = x.shape
    n = int(np.prod(shape))
    flat = np.array(x.data, dtype=np.float64).ravel()
    jac = np.zeros((n, n))
    for i in range(n):
        orig = flat[i]
        flat[i] = orig + h
        hi = model.forward(Tensor(flat.reshape(shape)), pe).z.data.ravel()
        flat[i] = orig - h
        lo = model.forward(Tensor(flat.reshape(shape)), pe).z.data.ravel()
        flat[i] = orig
        jac[:, i] = (hi - lo) / (2 * h)
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0:
        raise ArithmeticError("numerically singular Jacobian")
    return float(logdet)


def logdet_report(seed=0, n_models=10):
    """Sum of logdet_map vs the brute-force Jacobian log-determinant (float64)."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_models):
        channels = int(rng.choice([4, 8]))
        spatial = int(rng.choice([2, 2, 4] if channels == 4 else [2]))
        blocks = int(rng.integers(1, 5))
        model = TeacherModel(channels, 4, blocks, hidden=6, alpha=3.0,
                             rng=np.random.default_rng([seed, i]), dtype=np.float64)
        model.randomize_parameters(np.random.default_rng([seed, i, 1]))
        pe = Tensor(positional_encoding(spatial, spatial, 4).data.astype(np.float64))
        x = Tensor(rng.normal(size=(channels, spatial, spatial)))
        flow_ld = float(model.forward(x, pe).logdet_map.data.sum(dtype=np.float64))
        brute_ld = brute_force_logdet(model, x, pe)
        rel = abs(flow_ld - brute_ld) / max(abs(brute_ld), 1e-8)
        rows.append(CheckRow(f"logdet[{i}] C={channels} {spatial}x{spatial} b={blocks}", rel, 1e-3))
    return rows


# ---------------------------------------------------------------------------
# metric / preprocessing oracles
# ---------------------------------------------------------------------------

def pairwise_auroc(scores, labels):
    """O(n^2) definition: P(pos > neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels > 0]
    neg = scores[labels <= 0]
    wins = ties = 0
    for p in pos:
        wins += int((p > neg).sum())
        ties += int((p == neg).sum())
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def auroc_oracle_report(seed=0, instances=100, max_n=500):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(4, max_n + 1))
        labels = np.zeros(n)
        labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = 1
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        # heavy ties: quantized scores
        scores = np.round(rng.normal(size=n) * rng.choice([0.5, 2.0]), int(rng.integers(0, 2)))
        worst = max(worst, abs(auroc(scores, labels) - pairwise_auroc(scores, labels)))
    return [CheckRow(f"auroc vs pairwise oracle ({instances} instances)", worst, 1e-9)]


def _oracle_fill(values, valid, iterations=3):
    vals = values.astype(np.float64).copy()
    v = valid.copy()
    h, w = vals.shape
    for _ in range(iterations):
        new_vals = vals.copy()
        new_valid = v.copy()
        for i in range(h):
            for j in range(w):
                if v[i, j]:
                    continue
                acc, cnt = 0.0, 0
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        if di == 0 and dj == 0:
                            continue
                        ii, jj = i + di, j + dj
                        if 0 <= ii < h and 0 <= jj < w and v[ii, jj]:
                            acc += vals[ii, jj]
                            cnt += 1
                if cnt:
                    new_vals[i, j] = acc / cnt
                    new_valid[i, j] = True
        vals, v = new_vals, new_valid
    vals[~v] = 0.0
    return vals, v


def _oracle_dilate(mask):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            hit = False
            for a in range(-3, 5):
                for b in range(-3, 5):
                    ii, jj = i + a, j + b
                    if 0 <= ii < h and 0 <= jj < w and mask[ii, jj]:
                        hit = True
            out[i, j] = hit
    return out


def _oracle_bilinear_binarize(mask, oh, ow):
    h, w = mask.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            sr = (i + 0.5) * h / oh - 0.5
            sc = (j + 0.5) * w / ow - 0.5
            r0, c0 = math.floor(sr), math.floor(sc)
            fr, fc = sr - r0, sc - c0
            val = 0.0
            for (rr, wr) in ((r0, 1 - fr), (r0 + 1, fr)):
                for (cc, wc) in ((c0, 1 - fc), (c0 + 1, fc)):
                    val += wr * wc * mask[min(max(rr, 0), h - 1), min(max(cc, 0), w - 1)]
            out[i, j] = 1.0 if val > 0 else 0.0
    return out


def preprocessing_report(seed=0, n_maps=50):
    """Brute-force oracle equivalence for the full depth preprocessing chain."""
    rng = np.random.default_rng(seed)
    fill_bad = plane_bad = dilate_bad = mask_bad = 0
    plane_err = 0.0
    for _ in range(n_maps):
        h = int(rng.integers(10, 25))
        w = int(rng.integers(10, 25))
        vals = rng.normal(10.0, 2.0, size=(h, w))
        valid = rng.uniform(size=(h, w)) >= 0.25
        valid[0, 0] = valid[0, -1] = valid[-1, 0] = valid[-1, -1] = True
        d = DepthMap.from_arrays(vals, valid)

        filled = fill_missing_depth(d)
        ov, om = _oracle_fill(d.values.data, valid)
        if not (np.array_equal(filled.values.data, ov.astype(np.float32))
                and np.array_equal(filled.validity.data > 0, om)):
            fill_bad += 1

        plane = background_plane(filled)
        c00, c01 = float(filled.values.data[0, 0]), float(filled.values.data[0, -1])
        c10, c11 = float(filled.values.data[-1, 0]), float(filled.values.data[-1, -1])
        for _ in range(20):
            i = int(rng.integers(0, h))
            j = int(rng.integers(0, w))
            u = i / (h - 1)
            v = j / (w - 1)
            want = (1 - u) * ((1 - v) * c00 + v * c01) + u * ((1 - v) * c10 + v * c11)
            plane_err = max(plane_err, abs(float(plane.data[i, j]) - want))
        if plane_err > 1e-6:
            plane_bad += 1

        fg = extract_foreground(filled, plane, 0.7)
        base = np.abs(filled.values.data.astype(np.float64) - plane.data.astype(np.float64)) > 0.7
        if not np.array_equal(fg.array() > 0, _oracle_dilate(base)):
            dilate_bad += 1

        oh, ow = max(2, h // 3), max(2, w // 3)
        got = downsample_mask(fg, oh, ow).array()
        want = _oracle_bilinear_binarize(fg.array().astype(np.float64), oh, ow)
        if not np.array_equal(got, want.astype(np.float32)):
            mask_bad += 1

    return [
        CheckRow(f"hole filling vs oracle ({n_maps} maps)", float(fill_bad), 1.0),
        CheckRow("corner plane vs formula (max abs err)", plane_err, 1e-6),
        CheckRow(f"threshold+dilation vs oracle ({n_maps} maps)", float(dilate_bad), 1.0),
        CheckRow(f"mask binarization vs oracle ({n_maps} maps)", float(mask_bad), 1.0),
    ]


# ---------------------------------------------------------------------------
# desk-scale end-to-end study (one seed; the acceptance suite aggregates)
# ---------------------------------------------------------------------------

def desk_spec(seed):
    return SynthSpec(seed=seed)


def run_desk_seed(seed, limit_threads=True):
    """Train teacher + students on the desk corpus for one seed and score.

    Returns AUROCs for the paired score, the teacher-only baseline and the
    1-residual-block student, plus loss curves and a null-control AUROC
    (amplitude-0 anomalies scored with the same trained models).
    """
    if limit_threads:
        try:
            from threadpoolctl import threadpool_limits
            ctx = threadpool_limits(limits=1)
        except ImportError:  # pragma: no cover
            ctx = None
    else:
        ctx = None
    try:
        spec = desk_spec(seed)
        train, test = synth_corpus(spec)
        config = TrainConfig.preset("desk", seed=seed)
        teacher, teacher_losses = train_teacher(train, config)
        student4, student_losses = train_student(train, teacher, config)
        student1, _ = train_student(train, teacher, replace(config, n_st_blocks=1))

        labels = [1.0 if s.label == "anomalous" else 0.0 for s in test]
        reports4 = score_corpus(test, teacher, student4)
        reports1 = score_corpus(test, teacher, student1)
        metrics = compute_metrics(reports4, seed=seed, config_digest=config.digest())

        _, null_test = synth_corpus(replace(spec, feature_amplitude=0.0, depth_amplitude_cm=0.0))
        null_reports = score_corpus(null_test, teacher, student4)
        null_auroc = auroc([r.score for r in null_reports], labels)

        return {
            "seed": seed,
            "ast_auroc": metrics.image_auroc,
            "teacher_auroc": metrics.teacher_image_auroc,
            "pixel_auroc": metrics.pixel_auroc,
            "ast_auroc_1block": auroc([r.score for r in reports1], labels),
            "null_auroc": null_auroc,
            "teacher_losses": teacher_losses,
            "student_losses": student_losses,
        }
    finally:
        if ctx is not None:
            ctx.unregister()


def run_toy_seed(seed):
    """One seed of the 1-D experiment; returns OOD distances and fit quality."""
    from .evaluate import ToySpec, toy_experiment

    result = toy_experiment(ToySpec(seed=seed))
    return {
        "seed": seed,
        "symmetric_ood": result.symmetric_ood_dist,
        "asymmetric_ood": result.asymmetric_ood_dist,
        "symmetric_fit": result.symmetric_train_err / result.teacher_range,
        "asymmetric_fit": result.asymmetric_train_err / result.teacher_range,
    }


def student_param_counts(blocks_list=(1, 2, 4, 8)):
    counts = {}
    for b in blocks_list:
        model = StudentModel(20, 8, out_channels=20, hidden=64, n_st_blocks=b,
                             rng=np.random.default_rng(0))
        counts[b] = model.count_parameters()
    return counts


# ---------------------------------------------------------------------------
# aggregated selftest
# ---------------------------------------------------------------------------

def selftest_report(seed=0):
    rows = []
    rows.extend(bijectivity_report(seed, n_configs=6))
    rows.extend(logdet_report(seed, n_models=4))
    rows.extend(auroc_oracle_report(seed, instances=30, max_n=200))
    rows.extend(preprocessing_report(seed, n_maps=10))
    # pixel shuffle identity, bitwise
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 6, 6)).astype(np.float32))
    round1 = T.pixel_shuffle(T.pixel_unshuffle(x, 2), 2)
    rows.append(CheckRow("pixel_unshuffle/shuffle identity",
                         0.0 if np.array_equal(round1.data, x.data) else 1.0, 0.5))
    return rows


def format_report(rows):
    lines = []
    width = max(len(r.name) for r in rows)
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.value:12.3e}  (tol {r.tolerance:.0e})  {status}")
    return "\n".join(lines)
