"""Command-line entry point.

Every run resolves its configuration (built-in defaults < --config file <
--set overrides < dedicated flags), writes the resolved snapshot beside its
outputs so it can be rerun verbatim, and emits line-delimited records for
anything tabular. Diagnostics go to stderr; results go to stdout and files.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_model
from .config import TrainConfig
from .conflict import run_conflict_probe, taylor_diagnostic
from .evalbench import PerturbationSpec, evaluate, run_paradigm_comparison
from .forge import build_dataset
from .metrics import METRIC_NAMES, corpus_profile, radar_scores
from .records import load_config_file, output_root, write_config_snapshot, \
    write_records
from .train import save_checkpoint, train_expert, train_mixed_baseline, train_sef
from .validation import FormatError, GenerationError, InputError, StateError, \
    TrainingDiverged

_THREAD_LIMITER = None  # held for the process lifetime


class _UsageError(Exception):
    def __init__(self, parser, message):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we want exit 1
        raise _UsageError(self, message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _set_threads(n) -> None:
    global _THREAD_LIMITER
    if n is None:
        return
    if n < 1:
        raise InputError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits
    _THREAD_LIMITER = threadpool_limits(limits=int(n))


def _parse_set(pairs) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in pairs or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve_train_config(args) -> TrainConfig:
    overrides: dict = {}
    if getattr(args, "config", None):
        overrides.update(load_config_file(args.config))
    overrides.update(_parse_set(getattr(args, "set", None)))
    cfg = TrainConfig.from_overrides(TrainConfig(), overrides)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else output_root() / "runs" / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_common(sp, seed_default=None):
    sp.add_argument("--seed", type=int, default=seed_default,
                    help="base RNG seed")
    sp.add_argument("--config", metavar="FILE",
                    help="key=value config file (applied over defaults)")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="single config override (repeatable; applied over "
                         "--config)")
    sp.add_argument("--out", metavar="DIR",
                    help="output directory (default: $SEFDET_OUT/runs/<command>)")
    sp.add_argument("--threads", type=int, metavar="N",
                    help="cap BLAS threads; --threads 1 makes runs "
                         "bit-reproducible")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    defaults = {"n": 200, "height": 72, "width": 72, "seed": 0,
                "aug_prob": 0.5}
    vals = dict(defaults)
    casts = {k: type(v) for k, v in defaults.items()}
    merged: dict = {}
    if args.config:
        merged.update(load_config_file(args.config))
    merged.update(_parse_set(args.set))
    for key, value in merged.items():
        if key not in vals:
            raise InputError(f"unknown gen-data option {key!r}")
        try:
            vals[key] = casts[key](value)
        except ValueError as exc:
            raise InputError(f"bad value for {key}: {value!r}") from exc
    if args.n is not None:
        vals["n"] = args.n
    if args.size is not None:
        vals["height"] = vals["width"] = args.size
    if args.seed is not None:
        vals["seed"] = args.seed
    if args.aug_prob is not None:
        vals["aug_prob"] = args.aug_prob
    out = _out_dir(args, "gen-data")
    man = build_dataset(vals["n"], vals["height"], vals["width"], vals["seed"],
                        out, aug_prob=vals["aug_prob"])
    write_config_snapshot(out, vals)
    lo, hi = man.seed_range
    print(f"wrote {len(man.entries)} aligned entries "
          f"(anchor seeds {lo}..{hi}) to {out}")
    return 0


def _train_command(args, command: str, runner) -> int:
    cfg = _resolve_train_config(args)
    out = _out_dir(args, command)
    write_config_snapshot(out, cfg.to_dict())
    model, records = runner(cfg)
    ckpt_path = out / f"{command.replace('train-', '')}.ckpt"
    save_checkpoint(model, ckpt_path)
    write_records(out / "train_log.jsonl", records)
    final = records[-1]["loss"] if records else float("nan")
    print(f"trained {model.meta.get('kind')} "
          f"({model.meta.get('domain', model.meta.get('domains'))}) "
          f"final loss {final} -> {ckpt_path}")
    return 0


def _cmd_train_expert(args) -> int:
    return _train_command(
        args, "train-expert",
        lambda cfg: train_expert(cfg, args.data, args.domain, log=_log))


def _cmd_train_mixed(args) -> int:
    return _train_command(
        args, "train-mixed",
        lambda cfg: train_mixed_baseline(cfg, args.data, log=_log))


def _cmd_train_sef(args) -> int:
    return _train_command(
        args, "train-sef",
        lambda cfg: train_sef(cfg, args.data, args.expert_vae, args.expert_gan,
                              log=_log))


def _cmd_evaluate(args) -> int:
    cfg = _resolve_train_config(args)
    out = _out_dir(args, "evaluate")
    spec = PerturbationSpec.from_names(args.perturb, p=args.perturb_p,
                                       seed=cfg.seed)
    model = load_model(args.ckpt)
    results = evaluate(model, args.data, spec)
    write_config_snapshot(out, cfg.to_dict())
    rows = [results[d].to_record() for d in sorted(results)]
    write_records(out / "results.jsonl", rows)
    for d in sorted(results):
        r = results[d]
        print(f"{d}: balanced_accuracy {r.balanced_accuracy:.2f} "
              f"(tp {r.tp} tn {r.tn} fp {r.fp} fn {r.fn})"
              + (f" perturb={','.join(r.perturbations)}"
                 if r.perturbations else ""))
    return 0


def _cmd_compare(args) -> int:
    cfg = _resolve_train_config(args)
    out = _out_dir(args, "compare-paradigms")
    write_config_snapshot(out, cfg.to_dict())
    base = cfg.seed
    seeds = [base + j for j in range(args.seeds)]
    table = run_paradigm_comparison(cfg, args.train_data, args.test_data,
                                    seeds, log=_log)
    write_records(out / "comparison.jsonl", table.to_records())
    print(table.format_table())
    return 0


def _cmd_conflict(args) -> int:
    cfg = _resolve_train_config(args)
    out = _out_dir(args, "conflict-report")
    write_config_snapshot(out, cfg.to_dict())
    rows = []
    summaries = []
    for j in range(args.seeds):
        cfg_j = cfg.replace(seed=cfg.seed + j)
        report = run_conflict_probe(cfg_j, args.data, iters=args.iters,
                                    log=_log)
        for row in report.to_records():
            row["seed"] = cfg_j.seed
            rows.append(row)
        summaries.append((cfg_j.seed, report))
    if args.taylor_steps > 0:
        diag = taylor_diagnostic(cfg, args.data, steps=args.taylor_steps,
                                 log=_log)
        for row in diag.to_records():
            rows.append(row)
    write_records(out / "conflict.jsonl", rows)

    print(f"{'seed':>6} {'mean':>8} {'std':>8} {'mean|c|':>8} {'conflict%':>10}")
    for seed, rep in summaries:
        print(f"{seed:>6} {rep.mean_cosine:>8.4f} {rep.std_cosine:>8.4f} "
              f"{rep.mean_abs_cosine:>8.4f} {100 * rep.conflict_fraction:>9.1f}%")
    rep = summaries[0][1]
    print("\nper-block mean cosine (seed {}):".format(summaries[0][0]))
    means = rep.per_layer_cosines.mean(axis=0)
    for i, m in enumerate(means):
        print(f"  blk{i}: {m:+.4f}")
    if args.taylor_steps > 0:
        print(f"\ntaylor: sign agreement {diag.sign_agreement:.2%}, "
              f"correlation {diag.correlation:.4f} over "
              f"{args.taylor_steps} steps at eta={diag.eta:g}")
    return 0


def _load_image_dir(path) -> list[np.ndarray]:
    from .imagelab import load_image
    root = Path(path)
    if not root.is_dir():
        raise InputError(f"{path} is not a directory")
    files = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise InputError(f"no images found in {path}")
    return [load_image(p) for p in files]


def _cmd_metrics(args) -> int:
    out = _out_dir(args, "metrics")
    reals = _load_image_dir(args.real)
    vaes = _load_image_dir(args.vae)
    gans = _load_image_dir(args.gan)
    if not (len(reals) == len(vaes) == len(gans)):
        raise InputError(f"corpus sizes differ: {len(reals)} real, "
                         f"{len(vaes)} vae, {len(gans)} gan")
    prof_r = corpus_profile(reals)
    prof_v = corpus_profile(vaes, reference=reals)
    prof_g = corpus_profile(gans, reference=reals)
    rad_v, rad_g = radar_scores(prof_r, prof_v, prof_g)
    rows = [
        {"record": "profile", "corpus": "real", **prof_r.as_dict()},
        {"record": "profile", "corpus": "vae", **prof_v.as_dict()},
        {"record": "profile", "corpus": "gan", **prof_g.as_dict()},
        {"record": "radar", "corpus": "vae", "alpha": rad_v.alpha,
         **rad_v.as_dict()},
        {"record": "radar", "corpus": "gan", "alpha": rad_g.alpha,
         **rad_g.as_dict()},
    ]
    write_records(out / "metrics.jsonl", rows)
    name_w = max(len(n) for n in METRIC_NAMES)
    print(f"{'metric':<{name_w}} {'real':>12} {'vae':>12} {'gan':>12} "
          f"{'radar_v':>9} {'radar_g':>9}")
    for n in METRIC_NAMES:
        print(f"{n:<{name_w}} {getattr(prof_r, n):>12.6f} "
              f"{getattr(prof_v, n):>12.6f} {getattr(prof_g, n):>12.6f} "
              f"{rad_v.scores[n]:>9.4f} {rad_g.scores[n]:>9.4f}")
    print(f"(radar alpha {rad_v.alpha}, records in {out / 'metrics.jsonl'})")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="sefdet",
                     description="Desk-scale forgery-source detector bench: "
                                 "aligned data, per-source experts, gated "
                                 "fusion, conflict probes, evaluation.")
    parser.add_argument("--version", action="version",
                        version=f"sefdet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    sp = sub.add_parser("gen-data", help="generate an aligned dataset")
    sp.add_argument("--n", type=int, help="number of aligned entries")
    sp.add_argument("--size", type=int,
                    help="square image size in pixels (multiple of 8)")
    sp.add_argument("--aug-prob", type=float, dest="aug_prob",
                    help="probability an entry's fakes are mask composites")
    _add_common(sp)
    sp.set_defaults(func=_cmd_gen_data)

    sp = sub.add_parser("train-expert", help="train a single-source expert")
    sp.add_argument("--data", required=True, metavar="DIR",
                    help="training dataset directory")
    sp.add_argument("--domain", required=True, choices=("vae", "gan"))
    _add_common(sp)
    sp.set_defaults(func=_cmd_train_expert)

    sp = sub.add_parser("train-mixed", help="train the joint-training baseline")
    sp.add_argument("--data", required=True, metavar="DIR")
    _add_common(sp)
    sp.set_defaults(func=_cmd_train_mixed)

    sp = sub.add_parser("train-sef", help="fuse two experts (stage 2)")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--expert-vae", required=True, metavar="CKPT",
                    dest="expert_vae")
    sp.add_argument("--expert-gan", required=True, metavar="CKPT",
                    dest="expert_gan")
    _add_common(sp)
    sp.set_defaults(func=_cmd_train_sef)

    sp = sub.add_parser("evaluate", help="score a checkpoint on held-out data")
    sp.add_argument("--ckpt", required=True, metavar="CKPT")
    sp.add_argument("--data", required=True, metavar="DIR",
                    help="held-out dataset directory")
    sp.add_argument("--perturb", default="none", metavar="LIST",
                    help="comma list of blur,crop,jpeg,noise or all|none")
    sp.add_argument("--perturb-p", type=float, default=0.5, dest="perturb_p",
                    help="per-image application probability")
    _add_common(sp, seed_default=0)
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("compare-paradigms",
                        help="train and evaluate all four paradigms per seed")
    sp.add_argument("--train-data", required=True, metavar="DIR",
                    dest="train_data")
    sp.add_argument("--test-data", required=True, metavar="DIR",
                    dest="test_data")
    sp.add_argument("--seeds", type=int, default=5,
                    help="number of seeds (base --seed upward)")
    _add_common(sp, seed_default=0)
    sp.set_defaults(func=_cmd_compare)

    sp = sub.add_parser("conflict-report",
                        help="gradient-conflict probe over mixed training")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--iters", type=int, default=50)
    sp.add_argument("--seeds", type=int, default=5,
                    help="number of probe seeds (base --seed upward)")
    sp.add_argument("--taylor-steps", type=int, default=0, dest="taylor_steps",
                    help="also run the first-order loss-change diagnostic")
    _add_common(sp, seed_default=0)
    sp.set_defaults(func=_cmd_conflict)

    sp = sub.add_parser("metrics",
                        help="forensic metric profiles and radar scores")
    sp.add_argument("--real", required=True, metavar="DIR")
    sp.add_argument("--vae", required=True, metavar="DIR")
    sp.add_argument("--gan", required=True, metavar="DIR")
    _add_common(sp)
    sp.set_defaults(func=_cmd_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc.parser.format_usage(), file=sys.stderr, end="")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help/--version
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        print(parser.format_usage(), file=sys.stderr, end="")
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        _set_threads(getattr(args, "threads", None))
        return args.func(args)
    except (InputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GenerationError, StateError, TrainingDiverged, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
