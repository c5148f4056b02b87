"""Subcommand CLI tying the pipeline together.

Exit codes: 0 success, 1 validation/usage error, 2 numerical failure.
Heavy imports happen inside the handlers so `--threads` can cap the BLAS
pools before numpy spins them up.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    parser = _Parser(prog="ast", description="Asymmetric student-teacher anomaly detection")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS thread pools (1 = fully deterministic)")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", help="SynthSpec JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    for name, help_text in (("train-teacher", "train the flow teacher"),
                            ("train-student", "train the student against a teacher")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--corpus", required=True, help="corpus directory (train split is used)")
        p.add_argument("--config", help="TrainConfig JSON file")
        p.add_argument("--preset", choices=("mvt2d", "mvt3d", "desk"), default="desk")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        if name == "train-student":
            p.add_argument("--teacher", required=True, help="teacher checkpoint path")

    for name, help_text in (("score", "score a test corpus"),
                            ("eval", "score and compute metrics")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--corpus", required=True, help="corpus directory (test split is used)")
        p.add_argument("--teacher", required=True)
        p.add_argument("--student", required=True)
        p.add_argument("--out", required=True)
        if name == "score":
            p.add_argument("--maps", action="store_true", help="also export per-sample score maps")

    p = sub.add_parser("toy", help="run the 1-D symmetric-vs-asymmetric experiment")
    p.add_argument("--config", help="ToySpec JSON file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=10)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _limit_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _resolve_split(corpus_dir, split):
    for candidate in (os.path.join(corpus_dir, split, "manifest.json"),
                      os.path.join(corpus_dir, "manifest.json")):
        if os.path.isfile(candidate):
            return candidate
    raise FileNotFoundError(f"no manifest found for the {split} split under {corpus_dir}")


def _write_text(path, text):
    from .data import _atomic_write
    _atomic_write(path, text.encode("utf-8"))


def _cmd_synth(args):
    from .data import SynthSpec, save_corpus, synth_corpus

    spec_dict = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_dict)
    train, test = synth_corpus(spec)
    meta = {
        "synth_spec": spec.to_dict(),
        "threshold_cm": spec.threshold_cm,
        "depth_factor": spec.depth_factor,
        "depth_resize": spec.height * spec.depth_factor,
    }
    save_corpus(os.path.join(args.out, "train"), train, meta)
    save_corpus(os.path.join(args.out, "test"), test, meta)
    _write_text(os.path.join(args.out, "synth_spec.json"),
                json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    print(f"wrote {len(train)} train and {len(test)} test samples to {args.out}")
    return 0


def _train_config(args):
    from .training import TrainConfig

    overrides = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return TrainConfig.preset(args.preset, **overrides)


def _cmd_train_teacher(args):
    from .data import load_corpus
    from .training import save_teacher, train_teacher

    config = _train_config(args)
    corpus = load_corpus(_resolve_split(args.corpus, "train"))
    model, losses = train_teacher(corpus, config)
    os.makedirs(args.out, exist_ok=True)
    save_teacher(os.path.join(args.out, "teacher.ckpt"), model, config)
    _write_text(os.path.join(args.out, "teacher_losses.csv"),
                "epoch,loss\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(losses)))
    final = f", final loss {losses[-1]:.5g}" if losses else ""
    print(f"teacher trained for {config.epochs_teacher} epochs{final}; saved to {args.out}")
    return 0


def _cmd_train_student(args):
    from .data import load_corpus
    from .training import load_teacher, save_student, train_student

    config = _train_config(args)
    teacher, _ = load_teacher(args.teacher)
    corpus = load_corpus(_resolve_split(args.corpus, "train"))
    model, losses = train_student(corpus, teacher, config)
    os.makedirs(args.out, exist_ok=True)
    save_student(os.path.join(args.out, "student.ckpt"), model, config)
    _write_text(os.path.join(args.out, "student_losses.csv"),
                "epoch,loss\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(losses)))
    final = f", final loss {losses[-1]:.5g}" if losses else ""
    print(f"student trained for {config.epochs_student} epochs{final}; saved to {args.out}")
    return 0


def _score_reports(args):
    from .data import load_corpus
    from .training import load_student, load_teacher, score_corpus

    teacher, teacher_config = load_teacher(args.teacher)
    student, _ = load_student(args.student)
    test = load_corpus(_resolve_split(args.corpus, "test"))
    return score_corpus(test, teacher, student), teacher_config


def _cmd_score(args):
    from .evaluate import export_score_map, write_scores_csv

    reports, _ = _score_reports(args)
    os.makedirs(args.out, exist_ok=True)
    write_scores_csv(os.path.join(args.out, "scores.csv"), reports)
    if args.maps:
        for r in reports:
            export_score_map(r.dist_map, os.path.join(args.out, f"dist_{r.index:05d}.pgm"))
    print(f"scored {len(reports)} samples; results in {args.out}")
    return 0


def _cmd_eval(args):
    import numpy as np

    from .data import load_corpus
    from .evaluate import (compute_metrics, histogram, projection_rows,
                           write_histogram_csv, write_projections_csv, write_scores_csv)
    from .training import load_student, load_teacher, score_corpus

    teacher, teacher_config = load_teacher(args.teacher)
    student, _ = load_student(args.student)
    test = load_corpus(_resolve_split(args.corpus, "test"))
    reports = score_corpus(test, teacher, student)
    metrics = compute_metrics(reports, seed=teacher_config.seed,
                              config_digest=teacher_config.digest())
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "metrics.json"), metrics.to_json())
    write_scores_csv(os.path.join(args.out, "scores.csv"), reports)
    labels = np.array([1 if r.label == "anomalous" else 0 for r in reports])
    write_histogram_csv(os.path.join(args.out, "histogram.csv"),
                        histogram([r.score for r in reports], labels, bins=20))
    write_projections_csv(os.path.join(args.out, "projections.csv"),
                          projection_rows(test, teacher, student, seed=teacher_config.seed))
    pix = "n/a" if metrics.pixel_auroc is None else f"{metrics.pixel_auroc:.4f}"
    print(f"image AUROC {metrics.image_auroc:.4f} (teacher-only {metrics.teacher_image_auroc:.4f}, "
          f"pixel {pix}); reports in {args.out}")
    return 0


def _cmd_toy(args):
    from .evaluate import ToySpec, toy_experiment, write_toy_curves_csv

    spec_dict = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = ToySpec.from_dict(spec_dict)
    result = toy_experiment(spec)
    os.makedirs(args.out, exist_ok=True)
    summary = {"spec": spec.to_dict(), **result.summary_dict()}
    _write_text(os.path.join(args.out, "toy_summary.json"),
                json.dumps(summary, indent=2, sort_keys=True))
    write_toy_curves_csv(os.path.join(args.out, "toy_curves.csv"), result)
    print(f"toy run: symmetric OOD {result.symmetric_ood_dist}, "
          f"asymmetric OOD {result.asymmetric_ood_dist}; outputs in {args.out}")
    return 0


def _cmd_gradcheck(args):
    from .verify import format_report, gradcheck_report

    rows = gradcheck_report(seed=args.seed, points=args.points)
    print(format_report(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} gradient checks passed")
    return 2 if failed else 0


def _cmd_selftest(args):
    from .verify import format_report, selftest_report

    rows = selftest_report(seed=args.seed)
    print(format_report(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} self-tests passed")
    return 2 if failed else 0


_HANDLERS = {
    "synth": _cmd_synth,
    "train-teacher": _cmd_train_teacher,
    "train-student": _cmd_train_student,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "toy": _cmd_toy,
    "gradcheck": _cmd_gradcheck,
    "selftest": _cmd_selftest,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    _limit_threads(args.threads)
    from .errors import NonFiniteError

    try:
        return _HANDLERS[args.command](args)
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
