"""Command-line entry point: ``minnsa <subcommand> [flags]``.

Every run writes its outputs plus a ``manifest.json`` into ``--out``
(default: ``$MINNSA_OUT`` or ``./minnsa-out``). ``minnsa replay
manifest.json`` re-executes a run from its manifest alone.

Flag precedence is: command-line flag > ``--config`` JSON file > default.
"""

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .bagdata import SynthConfig, parse_bag_file, stratified_holdout, synth_generate, write_bag_file
from .evaluation import (
    ablation_rows,
    ablation_run,
    bagsize_sweep,
    cross_validate,
    derive_seed,
    export_attention,
    export_features,
    fold_rows,
    sweep_rows,
    write_csv,
)
from .metrics import auc
from .network import ModelConfig, init_model, load_model, save_model
from .training import TrainConfig, predict, train

logger = logging.getLogger("minnsa")

OUT_ENV = "MINNSA_OUT"


class UsageError(Exception):
    pass


def version_string():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed; every other seed derives from it")
    p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./minnsa-out)")
    p.add_argument("--config", default=None, help="JSON file of flag defaults (keys are flag names with underscores)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--m-star", type=int, default=100, help="instance capacity per bag")
    g.add_argument("--blocks", type=int, default=2, help="number of residual blocks")
    g.add_argument("--attn-hidden", type=int, default=64, help="attention head hidden width")
    g.add_argument("--dropout", type=float, default=0.3, help="dropout rate")
    g.add_argument("--no-skip", action="store_true", help="disable skip connections")
    g.add_argument("--dense-attention", action="store_true", help="softmax instead of sparsemax attention")


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=100, help="training epochs")
    g.add_argument("--batch-size", type=int, default=32, help="mini-batch size")
    g.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    g.add_argument("--beta1", type=float, default=0.9, help="Adam beta1")
    g.add_argument("--beta2", type=float, default=0.999, help="Adam beta2")
    g.add_argument("--eps", type=float, default=1e-8, help="Adam epsilon")
    g.add_argument("--selection", choices=("val_auc", "train_loss"), default="val_auc",
                   help="best-epoch selection metric")
    g.add_argument("--val-fraction", type=float, default=0.1, help="stratified validation fraction of the training data")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="minnsa", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bag file", formatter_class=fmt)
    p.add_argument("--n", type=int, default=400, help="number of bags")
    p.add_argument("--pos-frac", type=float, default=0.5, help="fraction of positive bags")
    p.add_argument("--p", type=int, default=30, help="instance dimension")
    p.add_argument("--bag-size-mean", type=float, default=4.0, help="mean bag size")
    p.add_argument("--bag-size-max", type=int, default=100, help="maximum bag size")
    p.add_argument("--witness-rate", type=float, default=1.0, help="primary-instance rate in positive bags")
    p.add_argument("--signal-shift", type=float, default=5.0, help="mean shift of primary instances")
    _add_common(p)

    p = sub.add_parser("train", help="train one model", formatter_class=fmt)
    p.add_argument("--data", required=True, help="bag file")
    _add_model(p)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("predict", help="score bags with a trained model", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="bag file")
    _add_common(p)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation", formatter_class=fmt)
    p.add_argument("--data", required=True, help="bag file")
    p.add_argument("--k", type=int, default=10, help="number of folds")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds")
    _add_model(p)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("ablation", help="FC / Skip / Sparse / Proposed comparison", formatter_class=fmt)
    p.add_argument("--data", required=True, nargs="+", help="bag files, one per scenario (column named by file stem)")
    p.add_argument("--k", type=int, default=10, help="number of folds")
    p.add_argument("--seeds", type=int_list, default=[0], help="comma-separated CV seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds")
    _add_model(p)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("sweep", help="mean CV AUC over instance capacities", formatter_class=fmt)
    p.add_argument("--data", required=True, help="bag file")
    p.add_argument("--mstar", type=int_list, default=[30, 60, 90, 120, 150], help="comma-separated m* grid")
    p.add_argument("--k", type=int, default=10, help="number of folds")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds")
    _add_model(p)
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("export-attention", help="write the attention matrix of a model", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="bag file")
    _add_common(p)

    p = sub.add_parser("export-features", help="write pooled bag features", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="bag file")
    p.add_argument("--normalize", action="store_true", help="min-max normalize each feature column")
    p.add_argument("--log-constant", type=float, default=None, help="apply log(1 + u*(K-1)) with this K after normalizing")
    _add_common(p)

    p = sub.add_parser("replay", help="re-run a command from its manifest", formatter_class=fmt)
    p.add_argument("manifest", help="manifest.json of an earlier run")
    p.add_argument("--out", default=None, help="output directory for the replay (default: the manifest's)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.subcommands = sub.choices
    return parser


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        with open(known.config, encoding="utf-8") as fh:
            defaults = json.load(fh)
        # the subcommand parsers own the defaults
        for sp in parser.subcommands.values():
            sp.set_defaults(**defaults)
    return parser, parser.parse_args(argv)


# ---------------------------------------------------------------------------
# config resolution


def _checked(cls, **kwargs):
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def model_config(args, p):
    return _checked(
        ModelConfig,
        p=p,
        m_star=args.m_star,
        n_blocks=args.blocks,
        attn_hidden=args.attn_hidden,
        dropout_rate=args.dropout,
        use_skip=not args.no_skip,
        use_sparse=not args.dense_attention,
        seed=derive_seed(args.seed, 1),
    )


def train_config(args):
    return _checked(
        TrainConfig,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.eps,
        selection_metric=args.selection,
        seed=derive_seed(args.seed, 2),
    )


def out_dir(args):
    path = Path(args.out or os.environ.get(OUT_ENV) or "minnsa-out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_data(path):
    try:
        return parse_bag_file(str(path))
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None


def _fmt(x):
    return format(float(x), ".9g")


# ---------------------------------------------------------------------------
# subcommands; each returns (outputs, extra manifest fields)


def cmd_synth(args, out):
    cfg = _checked(
        SynthConfig,
        n_bags=args.n,
        positive_fraction=args.pos_frac,
        p=args.p,
        bag_size_mean=args.bag_size_mean,
        bag_size_max=args.bag_size_max,
        witness_rate=args.witness_rate,
        signal_shift=args.signal_shift,
        seed=args.seed,
    )
    ds = synth_generate(cfg)
    path = out / "bags.csv"
    write_bag_file(ds, path)
    sizes = ds.sizes
    n_pos = int(ds.labels.sum())
    print(f"bags: {len(ds)}  positive: {n_pos}  negative: {len(ds) - n_pos}")
    q = np.percentile(sizes, [50, 90, 99])
    print(f"bag size: mean {sizes.mean():.2f}  median {q[0]:.0f}  p90 {q[1]:.0f}  p99 {q[2]:.0f}  max {sizes.max()}")
    edges = [1, 2, 5, 10, 30, 100, np.inf]
    for lo, hi in zip(edges[:-1], edges[1:]):
        count = int(((sizes >= lo) & (sizes < hi)).sum())
        label = f"[{lo}, {hi})" if np.isfinite(hi) else f"[{lo}, inf)"
        print(f"  {label:>12}: {count}")
    return [path], {"synth_config": asdict(cfg)}


def cmd_train(args, out):
    ds = load_data(args.data)
    mcfg, tcfg = model_config(args, ds.p), train_config(args)
    if tcfg.learning_rate == 0:
        print("warning: --lr 0, parameters will stay at their initial values", file=sys.stderr)
    outputs = []
    if tcfg.selection_metric == "val_auc":
        keep, hold = stratified_holdout(ds.labels, args.val_fraction, derive_seed(args.seed, 0))
        train_ds, val_ds = ds.subset(keep), ds.subset(hold)
        write_bag_file(val_ds, out / "val_bags.csv")
        outputs.append(out / "val_bags.csv")
    else:
        train_ds, val_ds = ds, None
    best, history = train(init_model(mcfg), train_ds, val_ds, tcfg)
    save_model(best, out / "model.npz")
    history.to_csv(out / "history.csv")
    outputs += [out / "model.npz", out / "history.csv"]
    print(f"variant: {mcfg.variant}  best epoch: {history.best_epoch}  best {tcfg.selection_metric}: {history.best_metric!r}")
    return outputs, {
        "model_config": asdict(mcfg),
        "train_config": asdict(tcfg),
        "best_epoch": history.best_epoch,
        "best_metric": history.best_metric,
    }


def cmd_predict(args, out):
    model = load_model(args.model)
    ds = load_data(args.data)
    pred = predict(model, ds)
    rows = [["bag_id", "label", "probability"]]
    rows += [[b.bag_id, b.label, repr(float(p))] for b, p in zip(ds.bags, pred.probabilities)]
    write_csv(rows, out / "predictions.csv")
    extra = {}
    if len(np.unique(ds.labels)) == 2:
        value = auc(pred.probabilities, ds.labels)
        print(f"auc: {value!r}")
        extra["auc"] = value
    return [out / "predictions.csv"], extra


def cmd_cv(args, out):
    ds = load_data(args.data)
    mcfg, tcfg = model_config(args, ds.p), train_config(args)
    rep = cross_validate(ds, mcfg, tcfg, k=args.k, seed=args.seed, val_fraction=args.val_fraction, jobs=args.jobs)
    write_csv(fold_rows(rep), out / "folds.csv")
    (out / "summary.json").write_text(json.dumps(rep.summary(), indent=2, sort_keys=True) + "\n")
    for f in rep.folds:
        print(f"fold {f.fold}: auc {f.auc:.4f}")
    print(f"mean auc: {rep.mean_auc:.4f}")
    return [out / "folds.csv", out / "summary.json"], {"fold_aucs": rep.fold_aucs.tolist()}


def cmd_ablation(args, out):
    datasets = {}
    for path in args.data:
        name = Path(path).stem
        if name in datasets:
            raise UsageError(f"two scenario files share the name {name!r}")
        datasets[name] = load_data(path)
    p_values = {ds.p for ds in datasets.values()}
    if len(p_values) != 1:
        raise UsageError("all scenario files must share one instance dimension")
    mcfg, tcfg = model_config(args, p_values.pop()), train_config(args)
    table = ablation_run(datasets, mcfg, tcfg, seeds=args.seeds, k=args.k, jobs=args.jobs)
    rows = ablation_rows(table)
    write_csv(rows, out / "ablation.csv")
    per_fold = [["variant", "scenario", "seed", "fold", "auc"]]
    for (variant, sc, s), rep in sorted(table.cv.items()):
        per_fold += [[variant, sc, s, f.fold, _fmt(f.auc)] for f in rep.folds]
    write_csv(per_fold, out / "ablation_folds.csv")
    for r in rows:
        print(",".join(str(x) for x in r))
    return [out / "ablation.csv", out / "ablation_folds.csv"], {}


def cmd_sweep(args, out):
    ds = load_data(args.data)
    mcfg, tcfg = model_config(args, ds.p), train_config(args)
    rows = bagsize_sweep(ds, mcfg, tcfg, m_stars=args.mstar, k=args.k, seed=args.seed, jobs=args.jobs)
    write_csv(sweep_rows(rows), out / "sweep.csv")
    for r in rows:
        print(f"m*={r['m_star']}: mean auc {r['mean_auc']:.4f}")
    return [out / "sweep.csv"], {}


def cmd_export_attention(args, out):
    model = load_model(args.model)
    ds = load_data(args.data)
    export_attention(model, ds, out / "attention.csv", out / "attention_mask.csv")
    return [out / "attention.csv", out / "attention_mask.csv"], {}


def cmd_export_features(args, out):
    model = load_model(args.model)
    ds = load_data(args.data)
    if args.log_constant is not None and not args.normalize:
        raise UsageError("--log-constant requires --normalize")
    export_features(model, ds, out / "features.csv", normalize=args.normalize, log_constant=args.log_constant)
    return [out / "features.csv"], {}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "ablation": cmd_ablation,
    "sweep": cmd_sweep,
    "export-attention": cmd_export_attention,
    "export-features": cmd_export_features,
}


def _validate_outputs(paths):
    for path in paths:
        path = Path(path)
        if not path.is_file() or path.stat().st_size == 0:
            raise RuntimeError(f"output {path} was not written")
        if path.suffix == ".csv":
            with open(path, newline="", encoding="utf-8") as fh:
                rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
            if len(rows) < 2:
                raise RuntimeError(f"output {path} has no data rows")
            width = len(rows[0])
            if any(len(r) != width for r in rows):
                raise RuntimeError(f"output {path} has ragged rows")
        elif path.suffix == ".json":
            json.loads(path.read_text())


def run(args):
    out = out_dir(args)
    resolved = {k: v for k, v in vars(args).items() if k not in ("out", "config", "verbose")}
    start = time.perf_counter()
    outputs, extra = COMMANDS[args.command](args, out)
    _validate_outputs(outputs)
    manifest = {
        "subcommand": args.command,
        "args": resolved,
        "seed": args.seed,
        "derived_seeds": {"split": derive_seed(args.seed, 0), "model": derive_seed(args.seed, 1), "train": derive_seed(args.seed, 2)},
        "inputs": {k: resolved[k] for k in ("data", "model") if k in resolved},
        "outputs": [str(Path(p).name) for p in outputs],
        "out_dir": str(out),
        "version": version_string(),
        "wall_clock_seconds": time.perf_counter() - start,
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return 0


def replay(manifest_path, out=None, verbose=False):
    manifest = json.loads(Path(manifest_path).read_text())
    ns = argparse.Namespace(**manifest["args"])
    ns.out = out or manifest["out_dir"]
    ns.config = None
    ns.verbose = verbose
    return run(ns)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    parser, args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return replay(args.manifest, args.out, args.verbose)
        return run(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
