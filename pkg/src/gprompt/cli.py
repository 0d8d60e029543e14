"""Command-line entry point: ``gprompt <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric or
verification failure. Outputs go to ``--out``, else ``$GPROMPT_OUTPUT_DIR``,
else ``./gprompt-out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import config as cfgmod
from . import theorem
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, GPromptError, ParseError
from .graph import write_dataset
from .metrics import aggregate
from .trainer import VARIANTS, ablation_run, make_dataset, prepare

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2
OUTPUT_ENV = "GPROMPT_OUTPUT_DIR"

log = logging.getLogger("gprompt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(args):
    path = args.out or os.environ.get(OUTPUT_ENV) or "gprompt-out"
    os.makedirs(path, exist_ok=True)
    return path


def _json(obj):
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_json(r) + "\n")


def _write_tsv(path, rows, columns):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in rows:
            fh.write("\t".join(_cell(r.get(c)) for c in columns) + "\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _plot(args, fn, *a, **kw):
    if args.no_plots:
        return
    from . import plotting
    getattr(plotting, fn)(*a, **kw)


def _load_config(args):
    return cfgmod.load(args.config, args.set or ())


# ---- commands ----

def cmd_verify(args):
    layers = tuple(int(x) for x in args.layers.split(","))
    if any(L < 1 for L in layers):
        raise ConfigError("--layers entries must be >= 1")
    if args.cases < 0 or args.necessity < 0:
        raise ConfigError("--cases and --necessity must be >= 0")
    try:
        trials = theorem.run_suite(args.cases, args.necessity, args.max_nodes, layers, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tol = None if args.tolerance is None else {k: args.tolerance for k in theorem.TOLERANCES}
    ok, worst = theorem.judge(trials, tol)
    out = _out_dir(args)
    _write_jsonl(os.path.join(out, "trials.jsonl"), trials)
    limits = dict(theorem.TOLERANCES, **(tol or {}))
    _plot(args, "plot_residuals", trials, os.path.join(out, "residuals.png"), limits)
    for kind in theorem.SUFFICIENCY_KINDS + ("necessity",):
        n = sum(t["kind"] == kind for t in trials)
        failed = sum(t["kind"] == kind and not t["passed"] for t in trials)
        print(f"{kind}\ttrials={n}\tmax_residual={worst.get(kind, 0.0):.3e}\ttolerance={limits[kind]:.1e}\tfailed={failed}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gen(args):
    exp = _load_config(args)
    seed = args.seed if args.seed is not None else (exp.data_seed or 0)
    graphs = make_dataset(exp, seed)
    from .graph import split_dataset
    split = split_dataset(graphs, exp.split_ratios, seed=seed)
    out = _out_dir(args)
    meta = {"seed": seed, "config": cfgmod.resolved_dict(exp)}
    write_dataset(out, graphs, split, meta)
    print(f"wrote {len(graphs)} graphs to {out}")
    return EXIT_OK


def _seed(args, exp):
    return args.seed if args.seed is not None else exp.train.seed


def cmd_pretrain(args):
    exp = _load_config(args)
    seed = _seed(args, exp)
    _, _, backbone, history = prepare(exp, seed)
    out = _out_dir(args)
    rows = [{"epoch": i + 1, "loss": v} for i, v in enumerate(history)]
    _write_tsv(os.path.join(out, "pretrain_curve.tsv"), rows, ["epoch", "loss"])
    record = {"command": "pretrain", "seed": seed, "config": cfgmod.resolved_dict(exp),
              "final_loss": history[-1] if history else None, "backbone_checksum": backbone.checksum()}
    _write_jsonl(os.path.join(out, "metrics.jsonl"), [record])
    ck = Checkpoint({"backbone": {"in_dim": backbone.in_dim, "hidden": backbone.hidden,
                                  "layers": backbone.num_layers, "dropout": backbone.dropout,
                                  "learn_eps": backbone.learn_eps}, "seed": seed},
                    {"backbone": backbone.state()})
    save_checkpoint(os.path.join(out, "backbone.ckpt"), ck)
    _plot(args, "plot_loss", history, os.path.join(out, "pretrain_curve.png"))
    print(f"pretraining done: final loss {record['final_loss']}")
    return EXIT_OK


CURVE_COLUMNS = ["epoch", "train_loss", "val_loss", "val_roc_auc", "val_accuracy"]
SUMMARY_COLUMNS = ["variant", "seed", "roc_auc", "accuracy", "macro_f1", "epochs_run", "best_epoch",
                   "policy_updates", "mean_distinct_edited", "mean_final_ecr"]


def _run_one(exp, seed, variant, prepared=None, trajectories=None):
    graphs, split, backbone, _ = prepared or prepare(exp, seed)
    train_cfg = dataclasses.replace(exp.train, seed=seed)
    result = ablation_run(variant, graphs, split, backbone, train_cfg, keep_transitions=trajectories is not None)
    if trajectories is not None:
        from .rl import dump_trajectories
        dump_trajectories(result.transitions, trajectories)
    run_exp = dataclasses.replace(exp, train=dataclasses.replace(train_cfg, variant=variant))
    record = dict(result.metrics, config=cfgmod.resolved_dict(run_exp))
    return result, record


def cmd_train(args):
    exp = _load_config(args)
    seed = _seed(args, exp)
    variant = args.variant or exp.train.variant
    out = _out_dir(args)
    traj = open(os.path.join(out, "trajectories.jsonl"), "w", encoding="utf-8") if args.dump_trajectories else None
    try:
        result, record = _run_one(exp, seed, variant, trajectories=traj)
    finally:
        if traj:
            traj.close()
    _write_jsonl(os.path.join(out, "metrics.jsonl"), [dict(record, command="train")])
    _write_tsv(os.path.join(out, "curve.tsv"), result.curve, CURVE_COLUMNS)
    _write_tsv(os.path.join(out, "summary.tsv"), [record], SUMMARY_COLUMNS)
    save_checkpoint(os.path.join(out, "checkpoint.ckpt"), Checkpoint.from_model(result.model, result.rng_state))
    _plot(args, "plot_curve", result.curve, os.path.join(out, "curve.png"), f"{variant} seed {seed}")
    print(f"{variant}\tseed={seed}\troc_auc={record.get('roc_auc')}\taccuracy={record.get('accuracy')}")
    return EXIT_OK


def cmd_ablate(args):
    exp = _load_config(args)
    seed = _seed(args, exp)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    out = _out_dir(args)
    prepared = prepare(exp, seed)
    records, curves = [], []
    for v in variants:
        result, record = _run_one(exp, seed, v, prepared)
        records.append(dict(record, command="ablate"))
        curves += [dict(row, variant=v) for row in result.curve]
        print(f"{v}\troc_auc={record.get('roc_auc')}\tdistinct={record['mean_distinct_edited']}")
    _write_jsonl(os.path.join(out, "metrics.jsonl"), records)
    _write_tsv(os.path.join(out, "summary.tsv"), records, SUMMARY_COLUMNS)
    _write_tsv(os.path.join(out, "curve.tsv"), curves, ["variant"] + CURVE_COLUMNS)
    _plot(args, "plot_variants", records, os.path.join(out, "variants.png"))
    return EXIT_OK


def cmd_sweep(args):
    exp = _load_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from exc
    variant = args.variant or exp.train.variant
    out = _out_dir(args)
    records = []
    for s in seeds:
        _, record = _run_one(exp, s, variant)
        records.append(dict(record, command="sweep"))
        print(f"seed={s}\troc_auc={record.get('roc_auc')}")
    agg = aggregate(records)
    summary = {"command": "sweep", "aggregate": agg, "seeds": seeds, "variant": variant,
               "config": cfgmod.resolved_dict(exp)}
    _write_jsonl(os.path.join(out, "metrics.jsonl"), records + [summary])
    rows = [{"metric": k, "mean": v["mean"], "std": v["std"], "n": v["n"]} for k, v in agg.items()]
    _write_tsv(os.path.join(out, "summary.tsv"), rows, ["metric", "mean", "std", "n"])
    for r in rows:
        print(f"{r['metric']}\t{r['mean']:.4f} +/- {r['std']:.4f}")
    return EXIT_OK


# ---- parser ----

def build_parser():
    p = _Parser(prog="gprompt", description="Graph prompt tuning with RL-edited prompts.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seeded=True):
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./gprompt-out)")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")
        if seeded:
            sp.add_argument("--config", help="flat key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
            sp.add_argument("--seed", type=int)

    v = sub.add_parser("verify", help="numerically check prompt/manipulation equivalence")
    common(v, seeded=False)
    v.add_argument("--cases", type=int, default=200, help="trials per manipulation kind")
    v.add_argument("--necessity", type=int, default=100, help="necessity witness trials")
    v.add_argument("--max-nodes", type=int, default=8)
    v.add_argument("--layers", default="1,2,3", help="comma-separated layer counts")
    v.add_argument("--tolerance", type=float, help="one tolerance for every kind")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)

    g = sub.add_parser("gen", help="write a synthetic dataset and manifest")
    common(g)
    g.set_defaults(fn=cmd_gen)

    pt = sub.add_parser("pretrain", help="masked-edge pretraining of the backbone")
    common(pt)
    pt.set_defaults(fn=cmd_pretrain)

    t = sub.add_parser("train", help="pretrain, then tune prompts, edits and head")
    common(t)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--dump-trajectories", action="store_true", help="write every policy transition")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("ablate", help="run several variants on one seed")
    common(a)
    a.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("sweep", help="one variant over several seeds, plus mean/std")
    common(s)
    s.add_argument("--seeds", default="1,2,3,4,5")
    s.add_argument("--variant", choices=VARIANTS)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ParseError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GPromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
