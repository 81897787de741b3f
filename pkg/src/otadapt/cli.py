"""Command-line entry point.

Machine-readable results go to stdout (or a declared file); diagnostics go
to stderr.  Exit codes: 0 success, 1 user error, 2 internal error.
Config files are TOML with flat dotted keys (``train.lr = 0.01``); explicit
flags override config values, and the environment is never consulted.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .data_gen import (
    FeatureFileError,
    SynthSpec,
    generate,
    geometry_certificate,
    load_features,
    save_certificate,
    save_features,
)
from .identification import (
    compute_scores,
    identify,
    nearest_centroid_labels,
)
from .metrics import bound_terms, collapse_labels, eval_osda, eval_pda, ident_metrics
from .ot_solver import (
    CostSpec,
    Histogram,
    dump_plan,
    label_mask,
    solve_entropic_ot,
    solve_masked_semirelaxed,
    squared_distances,
)
from .trainer import TaskConfig, train, write_log

SCHEMA_VERSION = 1


class UsageError(Exception):
    """User-facing problem: bad flags, missing files, malformed input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 by default; flag problems are user errors
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

# (argparse dest, config key, hard default)
_TRAIN_OPTIONS = [
    ("scenario", "task.scenario", None),
    ("n_source_classes", "task.n_source_classes", None),
    ("n_shared_classes", "task.n_shared_classes", None),
    ("lam", "solver.lam", None),
    ("beta2", "solver.beta2", 0.05),
    ("eta1", "train.eta1", None),
    ("eta2", "train.eta2", None),
    ("epochs", "train.epochs", 200),
    ("lr", "train.lr", 1e-2),
    ("momentum", "train.momentum", 0.9),
    ("grad_clip", "train.grad_clip", 5.0),
    ("seed", "train.seed", 0),
    ("pretrain_epochs", "train.pretrain_epochs", 100),
    ("pretrain_lr", "train.pretrain_lr", None),
    ("g_hidden", "model.g_hidden", None),
    ("g_out", "model.g_out", None),
    ("source", "data.source", None),
    ("target", "data.target", None),
    ("synthetic", "data.synthetic", False),
    ("out", "out.dir", None),
]

_KNOWN_KEYS = {key for _, key, _ in _TRAIN_OPTIONS}


def _flatten(table, prefix=""):
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _load_config(path):
    try:
        with open(path, "rb") as fh:
            flat = _flatten(tomllib.load(fh))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}")
    unknown = sorted(set(flat) - _KNOWN_KEYS)
    if unknown:
        raise UsageError(
            f"{path}: unknown config keys {unknown}; known keys: "
            f"{sorted(_KNOWN_KEYS)}"
        )
    return flat


def _resolve(args, config):
    resolved = {}
    for dest, key, default in _TRAIN_OPTIONS:
        value = getattr(args, dest, None)
        if value is None or (dest == "synthetic" and value is False):
            value = config.get(key, default)
        resolved[dest] = value
    return resolved


# ---------------------------------------------------------------------------
# Shared IO helpers
# ---------------------------------------------------------------------------


def _emit(payload, out_path=None):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def _read_int_column(path):
    values = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    values.append(int(line.split(",")[0]))
                except ValueError:
                    raise UsageError(
                        f"{path}:{lineno}: expected an integer, got {line!r}"
                    )
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}")
    if not values:
        raise UsageError(f"{path}: no values found")
    return np.array(values, dtype=int)


def _load_set(path, has_labels, domain):
    try:
        return load_features(path, has_labels, domain)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}")
    except FeatureFileError as exc:
        raise UsageError(str(exc))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_gen(args):
    spec = SynthSpec(
        K_shared=args.k_shared,
        K_private=args.k_private,
        d=args.dim,
        n_per_class=args.n_per_class,
        domain_shift=args.domain_shift,
        within_sigma=args.within_sigma,
        private_placement=args.placement,
        seed=args.seed,
    )
    source, target = generate(spec, args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_features(out / "source.csv", source)
    save_features(out / "target.csv", target)
    cert = geometry_certificate(source, target, spec, args.scenario)
    save_certificate(out / "geometry.json", cert)
    _emit(
        {
            "schema_version": SCHEMA_VERSION,
            "out": str(out),
            "n_source": source.n,
            "n_target": target.n,
            "dim": source.dim,
            "certificate_holds": cert["holds"],
        }
    )
    return 0


def _parse_seeds(text):
    seeds = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if "-" in chunk[1:]:
            lo, hi = chunk.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif chunk:
            seeds.append(int(chunk))
    if not seeds:
        raise UsageError(f"could not parse any seed from {text!r}")
    return seeds


def _train_single(options, seed, out_dir):
    scenario = options["scenario"]
    if options["synthetic"]:
        spec = SynthSpec(seed=seed)
        source, target = generate(spec, scenario)
        n_source = spec.K_shared + (spec.K_private if scenario == "pda" else 0)
        n_shared = spec.K_shared
    else:
        if not options["source"] or not options["target"]:
            raise UsageError("provide --source and --target files or --synthetic")
        source = _load_set(options["source"], True, "source")
        target = _load_set(
            options["target"], not options.get("target_unlabeled", False), "target"
        )
        n_source = options["n_source_classes"] or int(source.true_labels.max())
        n_shared = options["n_shared_classes"] or (
            n_source if scenario == "osda" else None
        )
        if n_shared is None:
            raise UsageError("partial tasks need --n-shared-classes")
    # wider defaults for high-dimensional precomputed features
    g_hidden = options["g_hidden"] or (1024 if source.dim > 256 else 64)
    g_out = options["g_out"] or (256 if source.dim > 256 else 16)
    cfg = TaskConfig(
        scenario=scenario,
        n_source_classes=n_source,
        n_shared_classes=n_shared,
        lam=options["lam"],
        beta2=options["beta2"],
        eta1=options["eta1"],
        eta2=options["eta2"],
        epochs=options["epochs"],
        lr=options["lr"],
        momentum=options["momentum"],
        grad_clip=options["grad_clip"],
        seed=seed,
        pretrain_epochs=options["pretrain_epochs"],
        pretrain_lr=options["pretrain_lr"],
        g_hidden=g_hidden,
        g_out=g_out,
    )
    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = str(out_dir / "checkpoint.json")
    model, records = train(
        source, target, cfg,
        checkpoint_path=checkpoint,
        checkpoint_every=options.get("checkpoint_every"),
        resume_from=options.get("resume"),
    )
    final = records[-1] if records else {}
    report = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "seed": seed,
        "epochs": cfg.epochs,
        "final": final,
    }
    if out_dir is not None:
        write_log(records, out_dir / "log.jsonl")
        _emit(report, out_dir / "report.json")
    return report


def _cmd_train(args):
    config = _load_config(args.config) if args.config else {}
    options = _resolve(args, config)
    options["checkpoint_every"] = args.checkpoint_every
    options["resume"] = args.resume
    options["target_unlabeled"] = args.target_unlabeled
    if options["scenario"] not in ("osda", "pda"):
        raise UsageError("--scenario must be osda or pda")
    if args.seeds:
        seeds = _parse_seeds(args.seeds)
        if options["out"] is None:
            raise UsageError("sweep mode needs --out for per-seed results")
        out_root = Path(options["out"])
        jobs = max(1, args.jobs)
        run_args = [
            (options, seed, out_root / f"seed_{seed}") for seed in seeds
        ]
        if jobs == 1:
            reports = [_train_single(*a) for a in run_args]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                reports = list(pool.map(_train_single_star, run_args))
        summary = _sweep_summary(reports)
        _emit(summary, out_root / "summary.json")
        _emit(summary)
        return 0
    report = _train_single(options, options["seed"], options["out"])
    _emit(report)
    return 0


def _train_single_star(packed):
    return _train_single(*packed)


def _sweep_summary(reports):
    keys = ("h", "acc", "ident_ratio", "false_pos_rate")
    means = {}
    for key in keys:
        values = [
            r["final"][key]
            for r in reports
            if r["final"].get(key) is not None
        ]
        if values:
            means[f"mean_{key}"] = float(np.mean(values))
    return {
        "schema_version": SCHEMA_VERSION,
        "n_runs": len(reports),
        "seeds": [r["seed"] for r in reports],
        **means,
        "runs": reports,
    }


def _cmd_identify(args):
    reference = _load_set(args.reference, True, "source")
    candidates = _load_set(args.candidates, args.candidates_labeled, "target")
    pseudo = nearest_centroid_labels(
        reference.features, reference.true_labels, candidates.features
    )
    cost = squared_distances(reference.features, candidates.features)
    mask = label_mask(reference.true_labels, pseudo)
    open_rows = mask.any(axis=1)
    spec = CostSpec.semirelaxed(
        cost[open_rows], mask[open_rows], args.lam, args.beta2
    )
    plan = solve_masked_semirelaxed(
        Histogram.uniform(int(open_rows.sum())),
        Histogram.uniform(candidates.n),
        spec,
    )
    scores = compute_scores(plan)
    result = identify(scores)
    assignment = np.full(candidates.n, "undecided", dtype=object)
    assignment[result.shared_idx] = "shared"
    assignment[result.private_idx] = "private"
    payload = {
        "schema_version": SCHEMA_VERSION,
        "m": candidates.n,
        "thresholds": {"shared": 0.0, "private": scores.private_threshold},
        "solver": {
            "lambda": args.lam,
            "beta2": args.beta2,
            "iterations": plan.iterations,
            "converged": plan.converged,
        },
        "samples": [
            {"index": j, "score": float(scores.scores[j]), "set": assignment[j]}
            for j in range(candidates.n)
        ],
        "counts": {
            "shared": int(result.shared_idx.size),
            "private": int(result.private_idx.size),
            "undecided": int(result.undecided_idx.size),
        },
    }
    if candidates.true_labels is not None:
        shared_labels = np.unique(reference.true_labels)
        ratio, fp = ident_metrics(result, candidates.true_labels, shared_labels)
        payload["ident_ratio"] = ratio
        payload["false_pos_rate"] = fp
    _emit(payload, args.out)
    return 0


def _cmd_eval(args):
    predictions = _read_int_column(args.predictions)
    labels = _read_int_column(args.labels)
    if predictions.size != labels.size:
        raise UsageError(
            f"{predictions.size} predictions vs {labels.size} labels"
        )
    if args.scenario == "osda":
        if args.n_shared is None:
            raise UsageError("--n-shared is required for open-set evaluation")
        report = eval_osda(predictions, labels, args.n_shared)
    else:
        report = eval_pda(predictions, labels)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "scenario": args.scenario,
        "acc": report.acc,
        "os_star": report.os_star,
        "unk": report.unk,
        "h": report.h,
        "per_class_acc": report.per_class_acc,
    }
    if args.source_predictions:
        if not args.source_labels:
            raise UsageError("--source-labels is required with --source-predictions")
        n_shared = args.n_shared or int(labels.max())
        n_source = args.n_source_classes or n_shared
        shared = range(1, n_shared + 1)
        if args.scenario == "osda":
            src_prv: tuple = ()
            tgt_prv = (n_shared + 1,)
        else:
            src_prv = tuple(range(n_shared + 1, n_source + 1))
            tgt_prv = ()

        def collapse(values):
            return collapse_labels(
                values, shared, src_prv, tgt_prv, unknown_output=n_source + 1
            )

        bound = bound_terms(
            collapse(_read_int_column(args.source_predictions)),
            collapse(_read_int_column(args.source_labels)),
            collapse(predictions),
            collapse(labels),
            shared,
        )
        payload["bound"] = {
            "eps_s": bound.eps_s,
            "eps_t": bound.eps_t,
            "delta_mpe": bound.delta_mpe,
            "delta_scg": bound.delta_scg,
            "label_l1": bound.label_l1,
            "private_terms": list(bound.private_terms),
            "n_labels": bound.n_labels,
            "bound_value": bound.bound_value,
            "holds": bound.holds,
        }
    if args.csv:
        fields = ["acc", "os_star", "unk", "h"]
        row = [payload.get(f) for f in fields]
        sys.stdout.write(
            ",".join("" if v is None else f"{v:.6f}" for v in row) + "\n"
        )
    else:
        _emit(payload, args.out)
    return 0


def _cmd_solve_ot(args):
    x1 = _load_set(args.x1, args.x1_labeled, "source")
    x2 = _load_set(args.x2, args.x2_labeled, "target")
    cost = squared_distances(x1.features, x2.features)
    p = Histogram.uniform(x1.n)
    q = Histogram.uniform(x2.n)
    if args.balanced:
        plan = solve_entropic_ot(p, q, CostSpec.balanced(cost, args.lam))
    else:
        if x1.true_labels is None or x2.true_labels is None:
            raise UsageError(
                "masked solving needs labels on both sides; pass "
                "--x1-labeled/--x2-labeled or use --balanced"
            )
        mask = label_mask(x1.true_labels, x2.true_labels)
        spec = CostSpec.semirelaxed(cost, mask, args.lam, args.beta2)
        plan = solve_masked_semirelaxed(p, q, spec)
    dump_plan(plan, args.out_plan, args.out_meta)
    _emit(
        {
            "schema_version": SCHEMA_VERSION,
            "plan": args.out_plan,
            "meta": args.out_meta,
            "converged": plan.converged,
            "iterations": plan.iterations,
        }
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser():
    parser = _Parser(prog="otadapt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    show_defaults = {"formatter_class": argparse.ArgumentDefaultsHelpFormatter}

    gen = sub.add_parser("gen", help="generate a synthetic task", **show_defaults)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--scenario", default="osda", choices=["osda", "pda"],
                     help="which side carries the private classes")
    gen.add_argument("--seed", type=int, default=0, help="generator seed")
    gen.add_argument("--k-shared", type=int, default=4,
                     help="number of shared classes")
    gen.add_argument("--k-private", type=int, default=2,
                     help="number of private clusters")
    gen.add_argument("--dim", type=int, default=16, help="feature dimension")
    gen.add_argument("--n-per-class", type=int, default=50,
                     help="samples per class and domain")
    gen.add_argument("--domain-shift", type=float, default=1.5,
                     help="translation of target class means")
    gen.add_argument("--within-sigma", type=float, default=1.0,
                     help="within-class standard deviation")
    gen.add_argument(
        "--placement", default="near_other_shared",
        choices=["far", "near_other_shared"],
        help="where private clusters sit relative to shared ones",
    )
    gen.set_defaults(func=_cmd_gen)

    tr = sub.add_parser("train", help="run the adaptation training loop")
    tr.add_argument("--config", help="TOML config with flat dotted keys")
    tr.add_argument("--scenario", choices=["osda", "pda"])
    tr.add_argument("--source", help="labeled source feature CSV")
    tr.add_argument("--target", help="target feature CSV")
    tr.add_argument("--synthetic", action="store_true",
                    help="generate the default synthetic task instead of reading files")
    tr.add_argument("--target-unlabeled", action="store_true",
                    help="the target CSV has no label column (disables evaluation)")
    tr.add_argument("--out", help="output directory (log, checkpoint, report)")
    tr.add_argument("--seed", type=int, help="run seed (default 0)")
    tr.add_argument("--seeds", help="sweep mode: comma list or lo-hi range")
    tr.add_argument("--jobs", type=int, default=1,
                    help="parallel workers for sweep mode (default 1)")
    tr.add_argument("--n-source-classes", type=int)
    tr.add_argument("--n-shared-classes", type=int)
    tr.add_argument("--lam", type=float, help="entropy weight (default 0.1 osda / 0.05 pda)")
    tr.add_argument("--beta2", type=float,
                    help="column KL penalty (default 0.05)")
    tr.add_argument("--eta1", type=float,
                    help="transfer-loss weight (default 1.0 osda / 0.3 pda)")
    tr.add_argument("--eta2", type=float,
                    help="reconstruction weight (default 1.0 osda / 3.5 pda)")
    tr.add_argument("--epochs", type=int, help="training epochs (default 200)")
    tr.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    tr.add_argument("--momentum", type=float, help="momentum (default 0.9)")
    tr.add_argument("--grad-clip", type=float,
                    help="global gradient-norm clip (default 5.0)")
    tr.add_argument("--pretrain-epochs", type=int,
                    help="source-only warmup epochs (default 100)")
    tr.add_argument("--pretrain-lr", type=float)
    tr.add_argument("--g-hidden", type=int,
                    help="hidden width (default 64; 1024 for wide inputs)")
    tr.add_argument("--g-out", type=int,
                    help="feature dim (default 16; 256 for wide inputs)")
    tr.add_argument("--checkpoint-every", type=int)
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.set_defaults(func=_cmd_train)

    ident = sub.add_parser("identify", help="one-shot private-class identification",
                           **show_defaults)
    ident.add_argument("--reference", required=True,
                       help="labeled feature CSV for the shared-only side")
    ident.add_argument("--candidates", required=True,
                       help="feature CSV for the side that may contain privates")
    ident.add_argument("--candidates-labeled", action="store_true",
                       help="candidate file carries ground-truth labels")
    ident.add_argument("--lam", type=float, default=0.05, help="entropy weight")
    ident.add_argument("--beta2", type=float, default=0.05,
                       help="column KL penalty")
    ident.add_argument("--out", help="write the JSON report here instead of stdout")
    ident.set_defaults(func=_cmd_identify)

    ev = sub.add_parser("eval", help="metrics from predictions and labels")
    ev.add_argument("--scenario", required=True, choices=["osda", "pda"])
    ev.add_argument("--predictions", required=True,
                    help="file with one predicted label per line")
    ev.add_argument("--labels", required=True,
                    help="file with one true label per line")
    ev.add_argument("--n-shared", type=int, help="number of shared classes")
    ev.add_argument("--n-source-classes", type=int)
    ev.add_argument("--source-predictions",
                    help="adds the error-bound diagnostics")
    ev.add_argument("--source-labels")
    ev.add_argument("--csv", action="store_true",
                    help="one-line CSV row instead of JSON")
    ev.add_argument("--out")
    ev.set_defaults(func=_cmd_eval)

    so = sub.add_parser("solve-ot", help="debug transport-plan dump", **show_defaults)
    so.add_argument("--x1", required=True, help="row-side feature CSV")
    so.add_argument("--x2", required=True, help="column-side feature CSV")
    so.add_argument("--x1-labeled", action="store_true",
                    help="row file carries labels")
    so.add_argument("--x2-labeled", action="store_true",
                    help="column file carries labels")
    so.add_argument("--balanced", action="store_true",
                    help="classical entropic OT with both marginals hard")
    so.add_argument("--lam", type=float, default=0.05, help="entropy weight")
    so.add_argument("--beta2", type=float, default=0.05,
                    help="column KL penalty")
    so.add_argument("--out-plan", required=True, help="plan CSV path")
    so.add_argument("--out-meta", required=True, help="metadata JSON path")
    so.set_defaults(func=_cmd_solve_ot)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"otadapt: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"otadapt: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        code = exc.code
        return int(code) if code is not None else 0
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
