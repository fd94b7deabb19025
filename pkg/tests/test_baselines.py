import numpy as np
import pytest

from lagcausal.baselines import (BaselineError, BootstrapConfig, ScoreKind, ScoreTensor, binarize, block_resample,
                                 bootstrap_probabilities, corr_scorer, get_scorer, lagged_design, read_scores,
                                 var_granger_scorer, write_scores)
from lagcausal.corpus import CorpusSpec, SeriesInstance, synthetic_instance
from lagcausal.graph import LaggedGraph
from lagcausal.stats import DegenerateStatisticError, auc
from lagcausal.tscm import Kind, MechanismPolicy


def _noise(seed, v=4, length=500):
    r = np.random.default_rng(seed)
    g = LaggedGraph(v, 3, ((0, 1, 1), (2, 3, 2), (1, 2, 3)))
    return SeriesInstance(r.normal(size=(length, v)), g, f"n{seed}")


def test_corr_example(example):
    s = corr_scorer(example, 3)
    assert s.kind is ScoreKind.CONFIDENCE and s.values.shape == (3, 3, 3)
    assert auc(s, example.graph) >= 0.99
    top3 = np.argsort(s.values.ravel())[-3:]
    assert set(top3) == set(np.flatnonzero(example.graph.adj.ravel()))


def test_var_example(example):
    assert auc(var_granger_scorer(example, 3), example.graph) == 1.0
    assert auc(var_granger_scorer(example, 3, ridge=0.0), example.graph) == 1.0


def test_copy_chain():
    r = np.random.default_rng(0)
    z = r.normal(size=303)
    x = np.column_stack([z[2:], z[1:-1], z[:-2]])  # 0 -> 1 -> 2, each a lag-1 copy
    x = x + 1e-3 * r.normal(size=x.shape)
    inst = SeriesInstance(x, LaggedGraph(3, 1, ((0, 1, 1), (1, 2, 1))))
    assert auc(corr_scorer(inst, 1), inst.graph) == 1.0
    s = var_granger_scorer(inst, 1).values
    assert np.argmax(s) in (np.ravel_multi_index((1, 0, 0), s.shape), np.ravel_multi_index((2, 1, 0), s.shape))


def test_lag1_copy_is_global_max():
    r = np.random.default_rng(4)
    x = r.normal(size=(400, 3))
    x[1:, 2] = x[:-1, 0] + 1e-6 * r.normal(size=399)
    s = var_granger_scorer(x, 2).values
    assert np.unravel_index(np.argmax(s), s.shape) == (2, 0, 1)


@pytest.mark.parametrize("scorer", [corr_scorer, var_granger_scorer])
def test_noise_auc_centered(scorer):
    aucs = [auc(scorer(_noise(s), 3), _noise(s).graph) for s in range(100)]
    assert 0.4 <= np.mean(aucs) <= 0.6


def test_corr_affine_invariance(example):
    r = np.random.default_rng(5)
    y = example.series * r.uniform(0.1, 10, size=3) + r.normal(0, 5, size=3)
    assert np.allclose(corr_scorer(example, 3).values, corr_scorer(y, 3).values, atol=1e-10)


def test_lagged_design_columns():
    x = np.arange(20, dtype=float).reshape(10, 2)
    z, y = lagged_design(x, 2)
    assert z.shape == (8, 5) and np.array_equal(y, x[2:])
    assert np.array_equal(z[:, 1:3], x[1:9]) and np.array_equal(z[:, 3:5], x[0:8])


def test_var_matches_ols_t_stats():
    r = np.random.default_rng(6)
    x = r.normal(size=(200, 2))
    z, y = lagged_design(x, 1)
    beta, *_ = np.linalg.lstsq(z, y[:, 1], rcond=None)
    resid = y[:, 1] - z @ beta
    sigma2 = resid @ resid / (z.shape[0] - z.shape[1])
    se = np.sqrt(np.diag(np.linalg.inv(z.T @ z)) * sigma2)
    s = var_granger_scorer(x, 1, ridge=0.0).values
    assert np.allclose(s[1, :, 0], np.abs(beta / se)[1:], rtol=1e-9)


def test_var_errors():
    with pytest.raises(ValueError):
        var_granger_scorer(np.random.default_rng(0).normal(size=(20, 4)), 3)
    x = np.random.default_rng(0).normal(size=(100, 3))
    x[:, 2] = x[:, 1]
    with pytest.raises(BaselineError):
        var_granger_scorer(x, 2, ridge=0.0)
    var_granger_scorer(x, 2)  # ridge regularizes the collinear design


def test_var_consistency_on_linear_var():
    spec = CorpusSpec(count=100, vars=(3, 5), density=(0.3, 0.3), allow_self_lagged=False, seed=21,
                      policy=MechanismPolicy(kinds=(Kind.LINEAR,), weight_range=(1.0, 2.0)), max_attempts=20000)
    good = total = 0
    for k in range(100):
        inst, _ = synthetic_instance(spec, k)
        try:
            a = auc(var_granger_scorer(inst, 3), inst.graph)
        except DegenerateStatisticError:
            continue
        total += 1
        good += a >= 0.95
    assert good / total >= 0.9


def test_block_resample():
    x = np.arange(100).reshape(50, 2)
    r = np.random.default_rng(0)
    assert np.array_equal(block_resample(x, 50, r), x)
    y = block_resample(x, 10, r)
    assert y.shape == x.shape
    # rows inside each block are consecutive
    for b in range(5):
        blk = y[b * 10:(b + 1) * 10, 0]
        assert np.all(np.diff(blk) == 2)


def test_binarize_rules():
    v = np.array([0.1, 0.5, 0.9, 0.2]).reshape(1, 4, 1)
    assert binarize(v, threshold=0.3).ravel().tolist() == [0, 1, 1, 0]
    assert binarize(v, top_q=0.25).ravel().tolist() == [0, 0, 1, 0]
    assert not binarize(np.zeros((2, 2, 1))).any()


def test_bootstrap_fraction(example):
    calls = iter([1, 1, 1, 1, 1, 1, 1, 0, 0, 0])

    def scorer(_):
        out = np.zeros((3, 3, 3))
        out[1, 0, 2] = next(calls)
        return ScoreTensor(out)

    p = bootstrap_probabilities(example, scorer, BootstrapConfig(n=10, threshold=0.5), 3)
    assert p.kind is ScoreKind.PROBABILITY and p.values[1, 0, 2] == pytest.approx(0.7)


def test_bootstrap_single_run_is_binary(example):
    p = bootstrap_probabilities(example, get_scorer("corr", 3), BootstrapConfig(n=1, seed=3), 3)
    assert set(np.unique(p.values)) <= {0.0, 1.0}


def test_bootstrap_identity_resample_is_binary(example):
    cfg = BootstrapConfig(n=7, block_len=example.length)
    p = bootstrap_probabilities(example, get_scorer("var", 3), cfg, 3)
    assert set(np.unique(p.values)) <= {0.0, 1.0}
    assert np.all(p.values[example.graph.adj == 1] == 1.0)


@pytest.mark.parametrize("mode", ["block", "row"])
def test_bootstrap_range_and_determinism(example, mode):
    cfg = BootstrapConfig(n=10, mode=mode, seed=4)
    a = bootstrap_probabilities(example, get_scorer("corr", 3), cfg, 3).values
    b = bootstrap_probabilities(example, get_scorer("corr", 3), cfg, 3).values
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1


def test_bootstrap_failures(example):
    state = {"k": 0}

    def flaky(x):
        state["k"] += 1
        if state["k"] % 3 == 0:
            raise np.linalg.LinAlgError("boom")
        return corr_scorer(x, 3)

    p = bootstrap_probabilities(example, flaky, BootstrapConfig(n=9), 3)
    assert p.values.max() <= 1

    def broken(x):
        raise RuntimeError("always")

    with pytest.raises(BaselineError, match="always"):
        bootstrap_probabilities(example, broken, BootstrapConfig(n=4), 3)


def test_bootstrap_config_validation():
    with pytest.raises(ValueError):
        BootstrapConfig(n=0).validate(3)
    with pytest.raises(ValueError):
        BootstrapConfig(block_len=3).validate(3)
    with pytest.raises(ValueError):
        BootstrapConfig(mode="iid").validate(3)


def test_score_file_roundtrip(tmp_path):
    s = ScoreTensor(np.random.default_rng(0).random((4, 4, 3)), ScoreKind.PROBABILITY)
    write_scores(s, tmp_path / "x.tcs", "x")
    back, meta = read_scores(tmp_path / "x.tcs")
    assert back.kind is ScoreKind.PROBABILITY and meta["id"] == "x"
    assert np.array_equal(back.values, s.values.astype(np.float32))


def test_score_tensor_validation():
    with pytest.raises(ValueError):
        ScoreTensor(np.full((2, 2, 1), 1.5), ScoreKind.PROBABILITY)
    with pytest.raises(ValueError):
        ScoreTensor(np.zeros((2, 3, 1)))
    assert ScoreTensor(np.ones((2, 2, 1))).padded(4).values.sum() == 4
    with pytest.raises(KeyError):
        get_scorer("pcmci", 3)
