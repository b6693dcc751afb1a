import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cgmexplain.metrics import IMRecord, MetricConfig, im1, im1_batch, im2, im_records, mean_ci, oracle_score, summarize


def const_ae(value):
    """Autoencoder stub returning a fixed image whatever the input."""
    return lambda x: np.broadcast_to(value, np.shape(x)).copy()


def one_pixel(v):
    img = np.zeros((28, 28))
    img[5, 5] = v
    return img


X0 = np.zeros((28, 28))


def test_im1_fixtures():
    ae_q, ae_p = const_ae(one_pixel(np.sqrt(0.5))), const_ae(one_pixel(np.sqrt(2.0)))
    assert abs(im1(X0, ae_p, ae_q) - 0.5 / (2.0 + 1e-8)) < 1e-9
    assert abs(im1(X0, ae_p, ae_q) - 0.25) < 1e-8
    x = one_pixel(0.3)
    assert im1(x, const_ae(one_pixel(0.7)), const_ae(x)) == 0.0
    assert abs(im1(x, const_ae(X0), const_ae(X0)) - 0.09 / (0.09 + 1e-8)) < 1e-9


def test_im2_fixtures():
    x = np.full((28, 28), 60.0 / 784)
    assert abs(im2(x, const_ae(X0), const_ae(one_pixel(np.sqrt(0.3)))) - 0.3 / (60.0 + 1e-8)) < 1e-9
    assert abs(im2(x, const_ae(X0), const_ae(one_pixel(np.sqrt(0.3)))) - 0.005) < 1e-9
    assert im2(x, const_ae(x), const_ae(x)) == 0.0
    black = im2(X0, const_ae(X0), const_ae(one_pixel(1e-6)))
    assert np.isfinite(black) and abs(black - 1e-12 / 1e-8) < 1e-9


def test_im_values_with_torch_autoencoder():
    class Halve:
        def reconstruct(self, x):
            return np.asarray(x) * 0.5

    x = np.full((2, 28, 28), 0.2)
    expected = np.sum((0.1 * np.ones(784)) ** 2) / (np.sum((0.1 * np.ones(784)) ** 2) + 1e-8)
    np.testing.assert_allclose(im1_batch(x, Halve(), Halve()), expected, atol=1e-12)


def test_im_records_grouping_matches_single():
    rng = np.random.default_rng(0)
    aes = [const_ae(rng.uniform(0, 1, (28, 28))) for _ in range(10)]

    class Bank(list):
        pass

    bank = Bank(aes)
    bank.global_ae = const_ae(np.full((28, 28), 0.5))
    x = rng.uniform(0, 1, (6, 28, 28))
    src, tgt = [0, 3, 0, 5, 3, 1], [1, 4, 1, 6, 5, 2]
    recs = im_records(x, src, tgt, bank, ids=[10, 11, 12, 13, 14, 15])
    assert [r.instance for r in recs] == [10, 11, 12, 13, 14, 15]
    for r, xi, p, q in zip(recs, x, src, tgt):
        assert r.im1 == pytest.approx(im1(xi, aes[p], aes[q]), abs=1e-12)
        assert r.im2 == pytest.approx(im2(xi, aes[q], bank.global_ae), abs=1e-12)
        assert r.im1 >= 0 and r.im2 >= 0


class Stub:
    """Classifier whose prediction is a per-image lookup on pixel (0, 0)."""

    def __init__(self, table):
        self.table = table

    def __call__(self, x):
        x = torch.as_tensor(x).reshape(-1, 28, 28)
        ids = x[:, 0, 0].round().long()
        return torch.nn.functional.one_hot(torch.as_tensor(self.table)[ids], 10).float()


def _ids(n):
    x = np.zeros((n, 28, 28))
    x[:, 0, 0] = np.arange(n)
    return x


def test_oracle_score_fixtures():
    f = Stub(list(range(10)))
    assert oracle_score(f, f, _ids(10)) == 1.0
    o = Stub([0, 1, 2, 3, 4, 9, 9, 9, 9, 0])
    assert oracle_score(f, o, _ids(10)) == 0.5
    with pytest.raises(ValueError):
        oracle_score(f, o, np.zeros((0, 28, 28)))


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(10))), st.lists(st.integers(0, 9), min_size=10, max_size=10))
def test_oracle_permutation_invariant(perm, table):
    f, o = Stub(list(range(10))), Stub(table)
    x = _ids(10)
    a = oracle_score(f, o, x)
    assert a == oracle_score(f, o, x[list(perm)])
    assert 0.0 <= a <= 1.0


def test_mean_ci_fixtures():
    m, h = mean_ci([0.0, 2.0], 0.95)
    assert m == 1.0
    assert abs(h - 1.959963984540054) < 1e-9
    assert mean_ci([3.0] * 7) == (3.0, 0.0)
    with pytest.raises(ValueError):
        mean_ci([1.0])
    v = np.random.default_rng(1).normal(size=40)
    assert mean_ci(np.r_[v, v])[1] < mean_ci(v)[1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), st.sampled_from([0.8, 0.9, 0.95, 0.99]))
def test_mean_ci_matches_scipy(values, level):
    v = np.array(values)
    m, h = mean_ci(v, level)
    sem = stats.sem(v, ddof=1)
    if sem == 0:
        assert h == 0
        return
    lo, hi = stats.norm.interval(level, loc=v.mean(), scale=sem)
    assert abs(m - v.mean()) < 1e-9 * (1 + abs(m))
    assert abs(h - (hi - lo) / 2) < 1e-9 * (1 + h)


def test_metric_config_validation():
    assert MetricConfig().eps == 1e-8 and MetricConfig().oracle_runs == 10
    with pytest.raises(ValueError):
        MetricConfig(eps=0.0)
    with pytest.raises(ValueError):
        MetricConfig(oracle_runs=0)


def test_summarize_is_order_free():
    recs = {"b": [IMRecord(0, 1, 2, 0.5, 0.1), IMRecord(1, 2, 3, 0.7, 0.2)], "a": [IMRecord(0, 1, 2, 1.0, 0.3)] * 3}
    r = summarize(recs, {"a": [0.9, 0.8], "b": [0.7, 0.75]}, {"a": 1.0, "b": 0.5})
    assert list(r.methods) == ["a", "b"]
    assert r.methods["b"]["im1_mean"] == pytest.approx(0.6)
    assert r.methods["a"]["im1_ci"] == 0.0
    assert [row["class"] for row in r.per_class if row["method"] == "b"] == [1, 2]
    r2 = summarize(dict(reversed(list(recs.items()))), {"b": [0.7, 0.75], "a": [0.9, 0.8]}, {"b": 0.5, "a": 1.0})
    assert r.to_dict() == r2.to_dict()
