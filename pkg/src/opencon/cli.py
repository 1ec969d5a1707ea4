"""Command-line front end.

Subcommands: gen-data | train | eval | ablate | estimate-k | verify.
JSON on stdout (or --out) is the stable machine contract; human-readable
tables go to stderr. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time

import numpy as np

from opencon.core import OpenConError, Rng
from opencon.data import (
    generate_synthetic,
    ingest_features,
    make_split,
    write_features,
)
from opencon.encoder import forward
from opencon.evaluation import estimate_class_number, run_verification_suite
from opencon.prototype import pseudo_labels
from opencon.trainer import (
    LOSS_COMPONENT_VARIANTS,
    P_SWEEP_VALUES,
    TrainConfig,
    ablate,
    checkpoint_load,
    checkpoint_save,
    detection_report,
    evaluate_model,
    train,
)

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str):
    if name not in _CONFIG_FIELDS:
        raise OpenConError(f"unknown config key {name!r}")
    current = getattr(TrainConfig(), name)
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise OpenConError(f"config key {name!r} expects a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(part) for part in raw.split(",") if part.strip())
    return raw


def load_config_file(path) -> dict:
    """Flat `key = value` lines; keys are TrainConfig field names. `#` starts
    a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise OpenConError(f"{path}:{lineno}: expected `key = value`")
            key, raw = (part.strip() for part in line.split("=", 1))
            out[key] = _coerce(key, raw)
    return out


def build_train_config(args) -> TrainConfig:
    """Precedence: explicit flags > config file > defaults."""
    settings: dict = {}
    if getattr(args, "config", None):
        settings.update(load_config_file(args.config))
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            settings[name] = flag
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    return TrainConfig(**settings)


def _emit_json(payload: dict, out_path, no_timestamps: bool) -> None:
    if not no_timestamps:
        payload = dict(payload)
        payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _table(rows: list[dict], columns: list[str]) -> str:
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in columns}
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    lines = [header, "  ".join("-" * widths[c] for c in columns)]
    for r in rows:
        lines.append("  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in columns))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _load_split(args):
    dataset = ingest_features(args.data)
    rng = Rng(args.seed if args.seed is not None else 0, "data")
    return make_split(dataset, args.known_frac, args.label_ratio, rng)


def cmd_gen_data(args) -> int:
    rng = Rng(args.seed if args.seed is not None else 0, "data")
    dataset = generate_synthetic(args.classes, args.per_class, args.dim,
                                 args.kappa, rng,
                                 max_mean_cosine=args.max_mean_cosine)
    if dataset.n == 0:
        print("warning: wrote an empty dataset", file=sys.stderr)
    write_features(args.out, dataset, fmt="binary")
    sidecar = {
        "classes": args.classes,
        "per_class": args.per_class,
        "dim": args.dim,
        "kappa": args.kappa,
        "seed": args.seed if args.seed is not None else 0,
        "max_mean_cosine": args.max_mean_cosine,
        "n_samples": dataset.n,
        "path": str(args.out),
    }
    _emit_json(sidecar, str(args.out) + ".json", args.no_timestamps)
    print(f"wrote {dataset.n} samples to {args.out}", file=sys.stderr)
    return 0


def _metrics_sink(path):
    if path:
        return open(path, "w", encoding="utf-8")
    return sys.stdout


def cmd_train(args) -> int:
    config = build_train_config(args)
    split = _load_split(args)
    start_state = checkpoint_load(args.resume) if args.resume else None

    sink = _metrics_sink(args.metrics)
    try:
        result = train(config, split, start_state=start_state,
                       checkpoint_path=args.checkpoint_out,
                       checkpoint_every=args.checkpoint_every)
        for report in result.reports:
            sink.write(json.dumps(report.as_dict(), sort_keys=True) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()

    if args.checkpoint_out:
        checkpoint_save(args.checkpoint_out, result.final_state)

    final = result.final
    detection = detection_report(result.mlp, result.store, split, config.tau_n)
    summary = {
        "config": config.as_dict(),
        "epochs_run": len(result.reports),
        "accuracy": {"all": final.acc_all, "novel": final.acc_novel,
                     "seen": final.acc_seen},
        "converged_prototypes": final.active_prototypes,
        "final_loss": final.loss_total,
        "detection": {k: {"auroc": v.auroc, "fpr95": v.fpr95}
                      for k, v in detection.items()},
    }
    _emit_json(summary, args.summary, args.no_timestamps)
    print(f"final accuracy all/novel/seen = "
          f"{_fmt(final.acc_all)}/{_fmt(final.acc_novel)}/{_fmt(final.acc_seen)}",
          file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    split = _load_split(args)
    state = checkpoint_load(args.checkpoint)
    triple, _ = evaluate_model(state.mlp, state.store, split)
    detection = detection_report(state.mlp, state.store, split, args.tau)
    payload = {
        "accuracy": triple.as_dict(),
        "converged_prototypes": int(np.sum(state.store.assignment_counts > 0)),
        "detection": {k: {"auroc": v.auroc, "fpr95": v.fpr95}
                      for k, v in detection.items()},
    }
    _emit_json(payload, args.out, args.no_timestamps)
    return 0


def cmd_ablate(args) -> int:
    config = build_train_config(args)
    split = _load_split(args)
    if args.preset == "loss-components":
        variants = list(LOSS_COMPONENT_VARIANTS)
    elif args.preset == "p-sweep":
        variants = [(f"p={value}", {"p": float(value)}) for value in P_SWEEP_VALUES]
    else:  # modified-loss comparison
        variants = [("full", {}), ("modified", {"use_modified_loss": True})]
    rows = ablate(config, split, variants)
    payload = {"preset": args.preset, "rows": rows,
               "config": config.as_dict()}
    _emit_json(payload, args.out, args.no_timestamps)
    print(_table(rows, ["variant", "acc_all", "acc_novel", "acc_seen"]),
          file=sys.stderr)
    return 0


def cmd_estimate_k(args) -> int:
    split = _load_split(args)
    lo, _, hi = args.range.partition(":")
    candidates = range(int(lo), int(hi) + 1)
    feats = np.concatenate([split.labeled_features(), split.unlabeled_features()])
    labeled_mask = np.concatenate([
        np.ones(split.n_labeled, bool), np.zeros(split.n_unlabeled, bool)])
    labels = np.concatenate([split.labeled_labels(), split.unlabeled_true_labels()])
    if args.checkpoint:
        state = checkpoint_load(args.checkpoint)
        embeddings, _ = forward(state.mlp, feats)
    else:
        from opencon.core import l2_normalize
        embeddings = l2_normalize(feats)
    rng = Rng(args.seed if args.seed is not None else 0, "theory")
    estimate = estimate_class_number(embeddings, labeled_mask, labels,
                                     candidates, rng)
    _emit_json({"estimate": estimate,
                "range": [int(lo), int(hi)]}, args.out, args.no_timestamps)
    print(f"estimated class count: {estimate}", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    summary = run_verification_suite(args.trials,
                                     args.seed if args.seed is not None else 0,
                                     perturb=args.perturb)
    _emit_json({"trials": summary.trials, "passed": summary.passed,
                "failures": list(summary.failures)}, args.out, args.no_timestamps)
    for failure in summary.failures:
        print(f"FAIL {failure}", file=sys.stderr)
    if summary.trials and summary.passed:
        print(f"all {summary.trials} verification trials passed", file=sys.stderr)
    return 0 if summary.passed else 1


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="feature file (binary or csv)")
    p.add_argument("--known-frac", type=float, default=0.5)
    p.add_argument("--label-ratio", type=float, default=0.5)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for name, f in _CONFIG_FIELDS.items():
        if name in ("seed", "milestones"):
            continue
        flag = "--" + name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(flag, dest=name, action="store_true", default=None)
            p.add_argument("--no-" + name.replace("_", "-"), dest=name,
                           action="store_false", default=None)
        elif isinstance(f.default, int):
            p.add_argument(flag, dest=name, type=int, default=None)
        elif isinstance(f.default, float):
            p.add_argument(flag, dest=name, type=float, default=None)
        elif isinstance(f.default, str):
            p.add_argument(flag, dest=name, type=str, default=None)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opencon",
        description="open-world contrastive learning: data generation, "
                    "training, evaluation, ablations, and verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_out=True):
        p.add_argument("--seed", type=int, default=None)
        if with_out:
            p.add_argument("--out", default=None,
                           help="write JSON here instead of stdout")
        p.add_argument("--no-timestamps", action="store_true")

    p = sub.add_parser("gen-data", help="write a synthetic feature file")
    common(p, with_out=False)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--max-mean-cosine", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output feature file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the training loop")
    common(p)
    _add_split_flags(p)
    _add_train_flags(p)
    p.add_argument("--metrics", help="epoch metrics JSON-lines file (default stdout)")
    p.add_argument("--summary", help="final summary JSON file (default stdout)")
    p.add_argument("--checkpoint-out")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    _add_split_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float, default=0.7,
                   help="temperature for msp/energy detection scores")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare variants")
    common(p)
    _add_split_flags(p)
    _add_train_flags(p)
    p.add_argument("--preset", choices=("loss-components", "p-sweep", "modified-loss"),
                   default="loss-components")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("estimate-k", help="estimate the class count")
    common(p)
    _add_split_flags(p)
    p.add_argument("--range", required=True, help="candidate range, e.g. 2:20")
    p.add_argument("--checkpoint", help="embed with this encoder (default: raw features)")
    p.set_defaults(func=cmd_estimate_k)

    p = sub.add_parser("verify", help="run the numerical verification suite")
    common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--perturb", action="store_true",
                   help=argparse.SUPPRESS)  # test hook: inject one failure
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OpenConError as exc:
        print(f"error: {exc}", file=sys.stderr)
        state = getattr(exc, "state", None)
        if state is not None:
            print(f"diagnostic: {json.dumps(state, sort_keys=True)}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
