"""Cross-validation, ablation and m* sweeps, plus attention/feature export."""

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bagdata import Bag, Dataset, stratified_holdout, stratified_kfold, write_bag_file
from .metrics import auc, roc_curve, wilcoxon_signed_rank
from .network import init_model
from .training import TrainConfig, predict, train

VARIANTS = (
    ("FC", False, False),
    ("Skip", True, False),
    ("Sparse", False, True),
    ("Proposed", True, True),
)


def derive_seed(*key):
    """Deterministic 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def config_hash(*configs):
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FoldResult:
    fold: int
    auc: float
    test_indices: np.ndarray
    probabilities: np.ndarray
    roc: tuple
    best_epoch: int


@dataclass
class EvalReport:
    folds: list
    k: int
    seed: int
    model_config: object
    train_config: object
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def fold_aucs(self):
        return np.array([f.auc for f in self.folds])

    @property
    def mean_auc(self):
        return float(self.fold_aucs.mean())

    def summary(self):
        return {
            "config_hash": config_hash(self.model_config, self.train_config),
            "model_config": asdict(self.model_config),
            "train_config": asdict(self.train_config),
            "seed": self.seed,
            "k": self.k,
            "fold_aucs": [float(a) for a in self.fold_aucs],
            "mean_auc": self.mean_auc,
            "wall_clock_seconds": self.wall_time,
        }


def _run_fold(ds, model_cfg, train_cfg, train_idx, test_idx, fold, seed, val_fraction):
    fold_seed = derive_seed(seed, fold)
    labels = ds.labels
    inner_keep, inner_val = stratified_holdout(labels[train_idx], val_fraction, derive_seed(fold_seed, 0))
    tr = ds.subset(train_idx[inner_keep])
    va = ds.subset(train_idx[inner_val])
    te = ds.subset(test_idx)
    model = init_model(replace(model_cfg, seed=derive_seed(fold_seed, 1)))
    best, history = train(model, tr, va, replace(train_cfg, seed=derive_seed(fold_seed, 2)))
    probs = predict(best, te).probabilities
    return FoldResult(fold, auc(probs, te.labels), test_idx, probs, roc_curve(probs, te.labels), history.best_epoch)


def cross_validate(ds, model_cfg, train_cfg=TrainConfig(), k=10, seed=0, val_fraction=0.1, jobs=1):
    """Stratified k-fold CV. Inside each fold a stratified ``val_fraction``
    of the training split selects the best epoch."""
    if model_cfg.p != ds.p:
        raise ValueError(f"model p={model_cfg.p} does not match dataset p={ds.p}")
    start = time.perf_counter()
    splits = stratified_kfold(ds.labels, k, derive_seed(seed, 0xF01D))
    args = [(ds, model_cfg, train_cfg, tr, te, f, seed, val_fraction) for f, (tr, te) in enumerate(splits)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold, *zip(*args)))
    else:
        folds = [_run_fold(*a) for a in args]
    return EvalReport(folds, k, seed, model_cfg, train_cfg, time.perf_counter() - start)


@dataclass
class AblationTable:
    scenarios: list
    seeds: list
    # cv[(variant, scenario, seed)] -> EvalReport
    cv: dict

    def mean_auc(self, variant, scenario):
        return float(np.mean([self.cv[(variant, scenario, s)].mean_auc for s in self.seeds]))

    def rows(self):
        out = []
        for name, skip, sparse in VARIANTS:
            row = {"variant": name, "use_skip": skip, "use_sparse": sparse}
            for sc in self.scenarios:
                row[sc] = self.mean_auc(name, sc)
            out.append(row)
        return out

    def paired_values(self, variant, pairing="fold"):
        """AUC units for a paired test: every fold AUC, or one CV mean per
        (scenario, seed)."""
        vals = []
        for sc in self.scenarios:
            for s in self.seeds:
                rep = self.cv[(variant, sc, s)]
                if pairing == "fold":
                    vals.extend(rep.fold_aucs)
                elif pairing == "scenario":
                    vals.append(rep.mean_auc)
                else:
                    raise ValueError(f"unknown pairing {pairing!r}")
        return np.array(vals)

    def compare(self, a, b, pairing="fold"):
        return wilcoxon_signed_rank(self.paired_values(a, pairing), self.paired_values(b, pairing))


def ablation_run(datasets, base_cfg, train_cfg=TrainConfig(), seeds=(0,), k=10, jobs=1):
    """Cross-validate the four (use_skip, use_sparse) variants on every
    scenario with shared splits and seeds. ``datasets`` maps scenario name
    to Dataset (a bare Dataset is treated as one scenario)."""
    if isinstance(datasets, Dataset):
        datasets = {"auc": datasets}
    cv = {}
    for sc, ds in datasets.items():
        for s in seeds:
            for name, skip, sparse in VARIANTS:
                cfg = replace(base_cfg, use_skip=skip, use_sparse=sparse)
                cv[(name, sc, s)] = cross_validate(ds, cfg, train_cfg, k=k, seed=s, jobs=jobs)
    return AblationTable(list(datasets), list(seeds), cv)


def bagsize_sweep(ds, base_cfg, train_cfg=TrainConfig(), m_stars=(30, 60, 90, 120, 150), k=10, seed=0, jobs=1):
    """Mean CV AUC for each instance capacity ``m_star``."""
    rows = []
    for m in m_stars:
        rep = cross_validate(ds, replace(base_cfg, m_star=int(m)), train_cfg, k=k, seed=seed, jobs=jobs)
        rows.append({"m_star": int(m), "mean_auc": rep.mean_auc, "report": rep})
    return rows


# ---------------------------------------------------------------------------
# CSV helpers


def _fmt(x):
    return format(float(x), ".9g")


def write_csv(rows, sink, comments=()):
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    text = buf.getvalue()
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def ablation_rows(table):
    header = ["variant", "use_skip", "use_sparse"] + list(table.scenarios)
    body = [[r["variant"], int(r["use_skip"]), int(r["use_sparse"])] + [_fmt(r[s]) for s in table.scenarios] for r in table.rows()]
    return [header] + body


def sweep_rows(sweep):
    return [["m_star", "mean_auc"]] + [[r["m_star"], _fmt(r["mean_auc"])] for r in sweep]


def fold_rows(report):
    return [["fold", "auc"]] + [[f.fold, _fmt(f.auc)] for f in report.folds] + [["mean", _fmt(report.mean_auc)]]


# ---------------------------------------------------------------------------
# exports

MASKED = "NA"


def export_attention(model, ds, sink, mask_sink=None):
    """Write the n x m* attention matrix, rows sorted by decreasing bag size.

    Masked (padding) cells are written as ``NA``. A parallel 0/1 mask file is
    written to ``mask_sink`` when given. Returns ``(order, attention, mask)``.
    """
    pred = predict(model, ds)
    m_star = model.config.m_star
    sizes = ds.sizes
    order = np.argsort(-sizes, kind="stable")
    mask = np.arange(m_star)[None, :] < np.minimum(sizes, m_star)[:, None]
    header = ["bag_id", "label", "n_instances"] + [f"a{j}" for j in range(m_star)]
    rows = [header]
    mrows = [["bag_id"] + [f"m{j}" for j in range(m_star)]]
    for i in order:
        bag = ds.bags[i]
        cells = [_fmt(a) if m else MASKED for a, m in zip(pred.attention[i], mask[i])]
        rows.append([bag.bag_id, bag.label, bag.size] + cells)
        mrows.append([bag.bag_id] + [int(m) for m in mask[i]])
    write_csv(rows, sink)
    if mask_sink is not None:
        write_csv(mrows, mask_sink)
    return order, pred.attention[order], mask[order]


def normalize_features(F, log_constant=None):
    """Column-wise min-max scaling to [0, 1]; constant columns map to 0.
    With ``log_constant=K`` the scaled value u becomes ``log(1 + u (K - 1))``."""
    F = np.asarray(F, dtype=np.float64)
    lo = F.min(axis=0)
    span = F.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    U = np.where(span > 0, (F - lo) / safe, 0.0)
    if log_constant is not None:
        U = np.log1p(U * (log_constant - 1.0))
    return U


def export_features(model, ds, sink, normalize=False, log_constant=None):
    """Write pooled bag features in bag-file format (one row per bag)."""
    feats = predict(model, ds).features
    comments = []
    if normalize:
        feats = normalize_features(feats, log_constant)
        comments.append("transform=minmax per feature column; constant column -> 0")
        if log_constant is not None:
            comments.append(f"transform=log(1 + u*(K-1)), K={log_constant!r}")
    out = Dataset(tuple(Bag(b.bag_id, b.label, feats[i:i + 1]) for i, b in enumerate(ds.bags)), ds.p)
    write_bag_file(out, sink, comments=comments)
    return feats
