import csv
import io

import numpy as np
import pytest

from minnsa.bagdata import SynthConfig, parse_bag_file, synth_generate
from minnsa.evaluation import (
    MASKED,
    VARIANTS,
    ablation_rows,
    ablation_run,
    bagsize_sweep,
    cross_validate,
    export_attention,
    export_features,
    normalize_features,
)
from minnsa.network import ModelConfig, init_model
from minnsa.training import TrainConfig, train

FAST = TrainConfig(epochs=3, batch_size=16)


@pytest.fixture(scope="module")
def small_ds():
    return synth_generate(SynthConfig(n_bags=80, p=5, signal_shift=3.0, witness_rate=0.5, seed=3))


@pytest.fixture(scope="module")
def trained_pair(small_ds):
    models = {}
    for sparse in (True, False):
        m = init_model(ModelConfig(p=5, m_star=12, use_sparse=sparse, seed=1))
        m.params["w"] *= 20  # sharpen the scores so sparsemax prunes
        best, _ = train(m, small_ds, small_ds, TrainConfig(epochs=5, batch_size=16))
        models[sparse] = best
    return models


class TestCrossValidate:
    def test_contract(self, small_ds):
        rep = cross_validate(small_ds, ModelConfig(p=5, m_star=12), FAST, k=10, seed=0)
        assert len(rep.fold_aucs) == 10
        assert ((rep.fold_aucs >= 0) & (rep.fold_aucs <= 1)).all()
        test_idx = np.sort(np.concatenate([f.test_indices for f in rep.folds]))
        np.testing.assert_array_equal(test_idx, np.arange(len(small_ds)))
        summary = rep.summary()
        assert summary["k"] == 10 and len(summary["fold_aucs"]) == 10
        assert len(summary["config_hash"]) == 16

    def test_reproducible(self, small_ds):
        a = cross_validate(small_ds, ModelConfig(p=5, m_star=12), FAST, k=4, seed=7)
        b = cross_validate(small_ds, ModelConfig(p=5, m_star=12), FAST, k=4, seed=7)
        np.testing.assert_array_equal(a.fold_aucs, b.fold_aucs)

    def test_parallel_matches_serial(self, small_ds):
        a = cross_validate(small_ds, ModelConfig(p=5, m_star=12), FAST, k=3, seed=2)
        b = cross_validate(small_ds, ModelConfig(p=5, m_star=12), FAST, k=3, seed=2, jobs=2)
        np.testing.assert_array_equal(a.fold_aucs, b.fold_aucs)

    def test_dimension_mismatch(self, small_ds):
        with pytest.raises(ValueError):
            cross_validate(small_ds, ModelConfig(p=6, m_star=12), FAST, k=3)


class TestAblation:
    def test_four_variant_grid(self, small_ds):
        table = ablation_run({"balanced": small_ds}, ModelConfig(p=5, m_star=12), FAST, seeds=[0, 1], k=3)
        rows = table.rows()
        assert [(r["use_skip"], r["use_sparse"]) for r in rows] == [(False, False), (True, False), (False, True), (True, True)]
        assert [r["variant"] for r in rows] == [v[0] for v in VARIANTS]
        csv_rows = ablation_rows(table)
        assert csv_rows[0] == ["variant", "use_skip", "use_sparse", "balanced"]
        assert len(csv_rows) == 5
        # shared splits: every variant sees the same test folds
        ref = [f.test_indices for f in table.cv[("FC", "balanced", 0)].folds]
        for name, _, _ in VARIANTS:
            for f, r in zip(table.cv[(name, "balanced", 0)].folds, ref):
                np.testing.assert_array_equal(f.test_indices, r)
        assert len(table.paired_values("FC", "fold")) == 6
        assert len(table.paired_values("FC", "scenario")) == 2
        res = table.compare("Proposed", "FC", pairing="fold")
        assert 0 <= res.pvalue <= 1


class TestSweep:
    def test_grid_rows(self, small_ds):
        rows = bagsize_sweep(small_ds, ModelConfig(p=5, m_star=30), FAST, m_stars=(30, 60, 90, 120, 150), k=3)
        assert [r["m_star"] for r in rows] == [30, 60, 90, 120, 150]

    def test_truncating_capacity_runs(self, small_ds):
        assert small_ds.sizes.min() >= 1
        rows = bagsize_sweep(small_ds, ModelConfig(p=5, m_star=1), FAST, m_stars=(1,), k=3)
        assert 0 <= rows[0]["mean_auc"] <= 1


def read_rows(text):
    return list(csv.reader(io.StringIO(text)))


class TestExportAttention:
    def test_format(self, trained_pair, small_ds):
        att, mask = io.StringIO(), io.StringIO()
        order, A, M = export_attention(trained_pair[True], small_ds, att, mask)
        rows = read_rows(att.getvalue())
        mrows = read_rows(mask.getvalue())
        assert rows[0][:3] == ["bag_id", "label", "n_instances"] and len(rows[0]) == 3 + 12
        sizes = [int(r[2]) for r in rows[1:]]
        assert sizes == sorted(sizes, reverse=True)
        for r, mr in zip(rows[1:], mrows[1:]):
            assert r[0] == mr[0]
            cells = r[3:]
            flags = [int(x) for x in mr[1:]]
            assert all((c == MASKED) == (f == 0) for c, f in zip(cells, flags))
            assert abs(sum(float(c) for c in cells if c != MASKED) - 1) < 1e-6
        assert MASKED != "0"

    def test_sparse_has_more_zeros(self, trained_pair, small_ds):
        counts = {}
        for sparse, model in trained_pair.items():
            buf = io.StringIO()
            export_attention(model, small_ds, buf)
            counts[sparse] = sum(c == "0" for r in read_rows(buf.getvalue())[1:] for c in r[3:])
        assert counts[True] > counts[False]
        assert counts[False] == 0


class TestExportFeatures:
    def test_raw_round_trip(self, trained_pair, small_ds):
        buf = io.StringIO()
        feats = export_features(trained_pair[True], small_ds, buf)
        back = parse_bag_file(buf.getvalue().encode())
        assert back.bag_ids == small_ds.bag_ids
        parsed = np.vstack([b.instances for b in back.bags])
        np.testing.assert_allclose(parsed, feats, rtol=1e-8)
        assert [format(v, ".9g") for v in parsed.ravel()] == [format(v, ".9g") for v in feats.ravel()]

    def test_normalized(self, trained_pair, small_ds):
        buf = io.StringIO()
        feats = export_features(trained_pair[True], small_ds, buf, normalize=True, log_constant=10.0)
        assert buf.getvalue().startswith("# transform=minmax")
        assert "K=10.0" in buf.getvalue()
        assert feats.min() >= 0 and feats.max() <= np.log(10.0) + 1e-12
        parse_bag_file(buf.getvalue().encode())

    def test_minmax_definition(self):
        F = np.array([[1.0, 5.0, 2.0], [3.0, 5.0, -2.0], [2.0, 5.0, 0.0]])
        U = normalize_features(F)
        assert U.min() >= 0 and U.max() <= 1
        np.testing.assert_array_equal(U[:, 1], 0.0)
        np.testing.assert_allclose(U[:, 0], [0, 1, 0.5])
