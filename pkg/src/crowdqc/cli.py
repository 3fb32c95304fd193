"""``crowdqc`` command-line interface.

Exit codes: 0 success, 2 usage or input error, 3 stopped at the Spammer Index
gate, 4 numerical failure (outputs still written, with error annotations).
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys
import warnings
from pathlib import Path

import numpy as np

from . import export
from .chains import BehaviorArchetype, Strategy
from .core import ResponseScale, ScaleKind, atomic_write_text, format_float, parse_dataset, write_dataset
from .errors import CrowdQCError, DatasetError, NonConvergence, ThresholdMismatch
from .glrm import FitConfig, VarianceComponents, fit_glrm, icc_fixed_error
from .pipeline import PipelineConfig, run_pipeline
from .simulate import (
    SimConfig,
    ThresholdSet,
    akld_samples,
    calibrate_thresholds,
    paper_mix,
    sensitivity_sweep,
    simulate_credible,
    simulate_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_GATE = 3
EXIT_NUMERIC = 4

SEED_ENV = "CROWDQC_SEED"


class UsageError(Exception):
    pass


def _diagnostic(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def resolve_seed(seed) -> int:
    """``--seed``, else ``$CROWDQC_SEED``, else a fresh seed that is printed."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    if env:
        return int(env)
    drawn = secrets.randbits(63)
    print(f"seed: {drawn}", file=sys.stderr)
    return drawn


def _load_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read JSON config {path}: {exc}") from exc


# -- argument groups ----------------------------------------------------------------


def _add_scale_args(p):
    p.add_argument("--scale", choices=[k.value for k in ScaleKind], default="binary")
    p.add_argument("--k", type=int, default=None, help="number of categories (ordinal/nominal)")
    p.add_argument("--labels", default=None, help="comma-separated category labels in index order")
    p.add_argument(
        "--column", action="append", default=[], metavar="NAME=HEADER",
        help="map a canonical column (worker_id, task_id, response, order, duration_seconds, truth) to a file header",
    )


def _scale_from_args(args) -> ResponseScale:
    kind = ScaleKind(args.scale)
    labels = tuple(args.labels.split(",")) if args.labels else None
    if kind is ScaleKind.BINARY:
        return ResponseScale.binary(labels) if labels else ResponseScale.binary()
    k = args.k if args.k is not None else (len(labels) if labels else None)
    if k is None:
        raise UsageError(f"--k or --labels is required for a {kind.value} scale")
    return ResponseScale(kind, labels) if labels else getattr(ResponseScale, kind.value)(k)


def _columns(args) -> dict:
    out = {}
    for item in args.column:
        if "=" not in item:
            raise UsageError(f"--column expects NAME=HEADER, got {item!r}")
        name, header = item.split("=", 1)
        out[name.strip()] = header.strip()
    return out


def _read(args):
    return parse_dataset(args.input, _scale_from_args(args), _columns(args))


def _parse_mix(text: str) -> tuple:
    """``rp=4,pc=4,rg=4`` or ``paper``."""
    if text == "paper":
        return paper_mix()
    mix = []
    for part in filter(None, text.split(",")):
        name, _, count = part.partition("=")
        mix.append((BehaviorArchetype.parse(name), int(count or 1)))
    return tuple(mix)


# -- commands ----------------------------------------------------------------------


def cmd_validate(args) -> int:
    d = _read(args)
    print(f"{d.n_workers} workers, {d.n_tasks} tasks, {d.n_records} records")
    return EXIT_OK


def cmd_fit(args) -> int:
    d = _read(args)
    fit_cfg = FitConfig.from_dict(_load_json(args.config).get("fit", {}))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_glrm(d, fit_cfg)
    out = {
        "spammer_index": fit.spammer_index,
        "estimated_spammer_count": int(round(fit.spammer_index * d.n_workers)),
        "variance_components": fit.vc.to_dict(),
        "loglik": fit.loglik,
        "converged": fit.converged,
        "boundary": list(fit.boundary),
        "n_evals": fit.n_evals,
        "notes": list(fit.notes),
    }
    if isinstance(fit.vc, VarianceComponents):
        out["icc_fixed_error"] = icc_fixed_error(fit.vc)
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    print(f"spammer_index {format_float(fit.spammer_index)}")
    if not fit.converged:
        _diagnostic("NonConvergence", fit.message)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_calibrate(args) -> int:
    seed = resolve_seed(args.seed)
    ts = calibrate_thresholds(args.n_tasks, args.k, args.alpha, args.n_sims, seed, kind=args.kind)
    atomic_write_text(args.out, ts.to_json())
    if args.histogram:
        samples = akld_samples(args.n_tasks, args.k, args.n_sims, seed, kind=args.kind)
        atomic_write_text(args.histogram, export.akld_histogram_csv(samples))
    print(
        f"beta_pc {format_float(ts.beta_pc)} beta_rp {format_float(ts.beta_rp)} beta_rg {format_float(ts.beta_rg)}; "
        f"type2 pc {format_float(ts.type2_pc)} rp {format_float(ts.type2_rp)} rg {format_float(ts.type2_rg)}"
        + (" (low precision)" if ts.low_precision else "")
    )
    return EXIT_OK


def _pipeline_config(args, d) -> PipelineConfig:
    raw = _load_json(args.config)
    raw = raw.get("pipeline", raw)
    if args.si_threshold is not None:
        raw["si_threshold"] = args.si_threshold
    if args.strategy is not None:
        raw["kld_strategy"] = args.strategy
    if args.n_jobs is not None:
        raw["n_jobs"] = args.n_jobs
    raw["seed"] = resolve_seed(args.seed if args.seed is not None else raw.get("seed"))
    if args.thresholds:
        try:
            raw["thresholds"] = ThresholdSet.from_json(Path(args.thresholds).read_text(encoding="utf-8")).to_dict()
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read threshold cache {args.thresholds}: {exc}") from exc
    elif not args.calibrate and not raw.get("thresholds"):
        raise UsageError("no threshold cache given; pass --thresholds FILE or --calibrate")
    try:
        return PipelineConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid pipeline config: {exc}") from exc


def cmd_detect(args) -> int:
    d = _read(args)
    cfg = _pipeline_config(args, d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = run_pipeline(d, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "risk.csv": export.risk_csv(report.risk),
        "deviance.csv": export.deviance_csv(report.c2_flags),
        "deviance_plot.csv": export.deviance_plot_csv(report.c2_flags, d.worker_index),
        "akld.csv": export.akld_csv(report.c1_matches),
    }
    if args.svg and report.c2_flags:
        files["deviance.svg"] = export.deviance_svg(report.c2_flags, d.worker_index)
    for name, text in files.items():
        atomic_write_text(out / name, text)
    # report.json last, so its presence marks a completed run.
    atomic_write_text(out / "report.json", report.to_json())
    print(
        f"spammer_index {format_float(report.spammer_index)}; "
        + (f"{len(report.final_spammers)} spammer(s) flagged" if report.gate_passed else "stopped at gate")
    )
    if report.errors:
        for e in report.errors:
            _diagnostic("NonConvergence", e)
        return EXIT_NUMERIC
    return EXIT_OK if report.gate_passed else EXIT_GATE


def _sim_config(args, seed) -> SimConfig:
    raw = _load_json(args.config)
    raw = raw.get("simulation", raw)
    kind = ScaleKind(args.scale)
    if kind is ScaleKind.BINARY:
        scale = ResponseScale.binary()
    else:
        scale = getattr(ResponseScale, kind.value)(args.k or 3)
    kw = {"n_workers": args.n_workers, "n_tasks": args.n_tasks, "scale": scale, "seed": seed}
    if "vc" in raw:
        kw["vc"] = VarianceComponents(**raw["vc"])
    for name in ("accuracy_band", "intercept", "task_mean", "calibrate_accuracy"):
        if name in raw:
            kw[name] = tuple(raw[name]) if name == "accuracy_band" else raw[name]
    mix = args.mix if args.mix is not None else raw.get("spammer_mix")
    if isinstance(mix, str):
        kw["spammer_mix"] = _parse_mix(mix)
    elif mix:
        kw["spammer_mix"] = tuple((BehaviorArchetype.parse(a), int(c)) for a, c in mix)
    return SimConfig(**kw)


def cmd_simulate(args) -> int:
    seed = resolve_seed(args.seed)
    cfg = _sim_config(args, seed)
    d = simulate_dataset(cfg) if cfg.spammer_mix or cfg.scale.kind is not ScaleKind.BINARY else simulate_credible(cfg)
    write_dataset(d, args.out)
    print(f"{d.n_workers} workers, {d.n_tasks} tasks, {d.n_records} records")
    return EXIT_OK


def cmd_sweep(args) -> int:
    seed = resolve_seed(args.seed)
    base = SimConfig(args.n_workers, args.n_tasks, seed=seed)
    fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else list(
        np.round(np.arange(0.0, args.max_fraction + 1e-9, args.step), 10)
    )
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name in args.archetypes.split(","):
            arch = BehaviorArchetype.parse(name)
            for f, si in sensitivity_sweep(base, arch, fractions):
                rows.append((f, arch.name, si))
    atomic_write_text(args.out, export.sweep_csv(rows))
    if args.svg:
        atomic_write_text(args.svg, export.sweep_svg(rows))
    print(f"{len(rows)} rows")
    return EXIT_OK


def cmd_score(args) -> int:
    """Behaviour scores only (Criterion 1), no model fit."""
    from .chains import classify_worker, score_all

    d = _read(args)
    try:
        ts = ThresholdSet.from_json(Path(args.thresholds).read_text(encoding="utf-8"))
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read threshold cache {args.thresholds}: {exc}") from exc
    k = d.scale.num_categories
    rows = []
    for w in d.worker_ids:
        seq = d.response_sequence(w)
        scores = score_all(seq, k, w, ts.eps)
        hit = classify_worker(scores, ts, Strategy(args.strategy), n_tasks=len(seq))
        for s in scores:
            rows.append((w, s.archetype.name, float(s.akld), float(s.mkld), "true" if hit == s.archetype else "false"))
    text = export._csv(("worker_id", "archetype", "akld", "mkld", "matched"), rows)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdqc", description="Crowdsourced response quality evaluation and spammer detection.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a response CSV")
    v.add_argument("input")
    _add_scale_args(v)
    v.set_defaults(func=cmd_validate)

    f = sub.add_parser("fit", help="fit the crossed random-effects model and report the Spammer Index")
    f.add_argument("input")
    _add_scale_args(f)
    f.add_argument("--config")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("calibrate", help="simulate aKLD cutoffs and write a threshold cache")
    c.add_argument("--n-tasks", type=int, default=80)
    c.add_argument("--k", type=int, default=2)
    c.add_argument("--kind", choices=[k.value for k in ScaleKind], default=None)
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--n-sims", type=int, default=30_000)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.add_argument("--histogram", help="also write aKLD histogram CSV here")
    c.set_defaults(func=cmd_calibrate)

    dt = sub.add_parser("detect", help="run the full evaluation and write the report")
    dt.add_argument("input")
    _add_scale_args(dt)
    dt.add_argument("--config")
    dt.add_argument("--thresholds", help="threshold cache JSON from `crowdqc calibrate`")
    dt.add_argument("--calibrate", action="store_true", help="calibrate thresholds when no cache is given")
    dt.add_argument("--si-threshold", type=float)
    dt.add_argument("--strategy", choices=[s.value for s in Strategy])
    dt.add_argument("--n-jobs", type=int)
    dt.add_argument("--seed", type=int)
    dt.add_argument("--out-dir", required=True)
    dt.add_argument("--svg", action="store_true", help="also render deviance.svg")
    dt.set_defaults(func=cmd_detect)

    s = sub.add_parser("simulate", help="write a simulated response CSV")
    s.add_argument("--n-workers", type=int, default=120)
    s.add_argument("--n-tasks", type=int, default=80)
    s.add_argument("--scale", choices=[k.value for k in ScaleKind], default="binary")
    s.add_argument("--k", type=int)
    s.add_argument("--mix", help="spammer mix, e.g. rp=4,pc=4,rg=4, or 'paper'")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="Spammer Index versus spammer fraction")
    w.add_argument("--n-workers", type=int, default=100)
    w.add_argument("--n-tasks", type=int, default=80)
    w.add_argument("--archetypes", default="pc,rp,rg")
    w.add_argument("--fractions", help="comma-separated fractions (overrides --max-fraction/--step)")
    w.add_argument("--max-fraction", type=float, default=0.3)
    w.add_argument("--step", type=float, default=0.05)
    w.add_argument("--seed", type=int)
    w.add_argument("--out", required=True)
    w.add_argument("--svg")
    w.set_defaults(func=cmd_sweep)

    sc = sub.add_parser("score", help="behaviour-pattern scores against a threshold cache")
    sc.add_argument("input")
    _add_scale_args(sc)
    sc.add_argument("--thresholds", required=True)
    sc.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.ALL_ROWS_BELOW.value)
    sc.add_argument("--out")
    sc.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DatasetError as exc:
        extra = {k: v for k, v in vars(exc).items() if isinstance(v, (str, int, list, type(None)))}
        _diagnostic(type(exc).__name__, str(exc), **extra)
        return EXIT_USAGE
    except (UsageError, ThresholdMismatch) as exc:
        _diagnostic(type(exc).__name__, str(exc))
        return EXIT_USAGE
    except (NonConvergence, ArithmeticError) as exc:
        _diagnostic(type(exc).__name__, str(exc))
        return EXIT_NUMERIC
    except (CrowdQCError, ValueError, OSError) as exc:
        _diagnostic(type(exc).__name__, str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
