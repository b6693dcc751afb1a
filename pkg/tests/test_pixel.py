import itertools
from math import factorial

import numpy as np
import pytest
import torch

from cgmexplain.classifiers import predict_class
from cgmexplain.data import stack
from cgmexplain.errors import BackgroundError
from cgmexplain.pixel import (
    ContrastiveConfig,
    SweepConfig,
    contrastive_explain,
    pertinent_negative,
    pertinent_positive,
    shapley_saliency,
    sweep_explain,
)


def brute_force_shapley(value, n):
    """Shapley values by enumerating all coalitions of ``n`` players."""
    phi = np.zeros(n)
    for j in range(n):
        others = [p for p in range(n) if p != j]
        for r in range(n):
            for s in itertools.combinations(others, r):
                w = factorial(r) * factorial(n - r - 1) / factorial(n)
                phi[j] += w * (value(set(s) | {j}) - value(set(s)))
    return phi


W = np.array([1.0, -2.0, 3.0, 0.5])


def linear(x):
    x = torch.as_tensor(x, dtype=torch.float32).reshape(len(x), -1)
    s = x @ torch.as_tensor(W, dtype=torch.float32) + 0.3
    return torch.stack([s, -2 * s + 1], dim=1)


def masked_value(f, x, background, k):
    def v(s):
        rows = []
        for b in background:
            z = b.copy()
            idx = list(s)
            z[idx] = x[idx]
            rows.append(z)
        return float(f(np.array(rows, dtype=np.float32))[:, k].mean())

    return v


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_toy_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, 4).astype(np.float32)
    bg = rng.uniform(0, 1, (1, 4)).astype(np.float32)
    sal = shapley_saliency(linear, x, bg, n_samples=50, seed=seed)
    for k in range(2):
        exact = brute_force_shapley(masked_value(linear, x, bg, k), 4)
        rel = np.abs(sal.values[k] - exact) / np.maximum(np.abs(exact), 1e-6)
        assert rel.max() < 0.05, (k, sal.values[k], exact)
    np.testing.assert_allclose(sal.values[0], W * (x - bg[0]), rtol=1e-5)


def test_linear_toy_background_average():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, 4).astype(np.float32)
    bg = rng.uniform(0, 1, (5, 4)).astype(np.float32)
    sal = shapley_saliency(linear, x, bg, n_samples=2000, seed=0)
    exact = brute_force_shapley(masked_value(linear, x, bg, 0), 4)
    np.testing.assert_allclose(exact, W * (x - bg.mean(0)), atol=1e-5)
    np.testing.assert_allclose(sal.values[0], exact, atol=0.05 * np.abs(W).max())


def test_constant_and_self_baseline():
    x = np.random.default_rng(0).uniform(size=(28, 28)).astype(np.float32)
    const = lambda z: torch.ones((len(z), 3)) * 0.2 + 0.0 * z.reshape(len(z), -1).sum(1, keepdim=True)
    assert np.all(shapley_saliency(const, x, x[None] * 0.5, n_samples=10).values == 0)
    from conftest import ColumnClassifier

    sal = shapley_saliency(ColumnClassifier(), x, x[None], n_samples=10)
    assert np.all(sal.values == 0)
    assert sal.values.shape == (10, 28, 28) and sal.expected.shape == (10,)


def test_empty_background():
    with pytest.raises(BackgroundError):
        shapley_saliency(linear, np.zeros(4, np.float32), np.zeros((0, 4), np.float32))


def test_completeness_nonlinear(column_classifier, synth_test_norm):
    images = stack(synth_test_norm)[0]
    x, bg = images[0], images[1:21]
    sal = shapley_saliency(column_classifier, x, bg, n_samples=800, seed=1)
    fx = column_classifier(torch.as_tensor(x[None]))[0].numpy()
    err = np.abs(sal.values.reshape(10, -1).sum(1) - (fx - sal.expected))
    assert err.max() < 0.05


def test_symmetric_pixels_equal():
    def sym(z):
        z = torch.as_tensor(z, dtype=torch.float32).reshape(len(z), -1)
        s = torch.tanh(z[:, 0] * z[:, 1] + z[:, 0] + z[:, 1]) + z[:, 2] ** 2
        return torch.stack([s, -s], 1)

    x = np.array([0.7, 0.7, 0.2], np.float32)
    bg = np.array([[0.1, 0.1, 0.5], [0.3, 0.3, 0.0]], np.float32)
    sal = shapley_saliency(sym, x, bg, n_samples=300)
    assert abs(sal.values[0, 0] - sal.values[0, 1]) < 1e-6


# --- contrastive explanations on constructed toys


def toy_class(f, x):
    return int(f(np.asarray(x, np.float32)[None]).argmax(1)[0])


def threshold_pixel0(z):
    z = torch.as_tensor(z, dtype=torch.float32).reshape(len(z), -1)
    v = 10 * (z[:, 0] - 0.5)
    return torch.softmax(torch.stack([-v, v], 1), 1)


def test_pn_changes_decisive_pixel_only():
    r = pertinent_negative(threshold_pixel0, np.array([0.8, 0.8], np.float32))
    assert r.pn_success and r.original_class == 1 and r.pn_class == 0
    assert r.pn_delta[0] < 0 and r.pn_delta[1] == 0.0
    x_pn = np.array([0.8, 0.8], np.float32) + r.pn_delta
    assert toy_class(threshold_pixel0, x_pn) != r.original_class
    assert (x_pn >= 0).all() and (x_pn <= 1).all()


def test_pp_retains_decisive_pixel_only():
    x = np.array([0.9, 0.6, 0.4], np.float32)
    r = pertinent_positive(threshold_pixel0, x)
    assert r.pp_success and r.pp_class == r.original_class == 1
    assert r.pp[0] > 0.5 and np.all(r.pp[1:] == 0)
    assert (r.pp >= 0).all() and (r.pp <= x).all()
    m = r.pp_mask
    assert (m >= 0).all() and (m <= 1).all()


def mean_pixel(z):
    z = torch.as_tensor(z, dtype=torch.float32).reshape(len(z), -1)
    v = 20 * (z.mean(1) - 0.5)
    return torch.softmax(torch.stack([-v, v], 1), 1)


def test_pn_near_boundary_is_tiny():
    lo, hi = np.full(16, 0.2, np.float32), np.full(16, 0.9, np.float32)
    a, b = 0.0, 1.0
    for _ in range(30):  # bisection for the class-0/class-1 boundary along lo -> hi
        mid = (a + b) / 2
        if toy_class(mean_pixel, lo + mid * (hi - lo)) == 1:
            b = mid
        else:
            a = mid
    near = (lo + b * (hi - lo)).astype(np.float32)
    r_near = pertinent_negative(mean_pixel, near)
    r_far = pertinent_negative(mean_pixel, hi)
    assert r_near.pn_success and r_far.pn_success
    assert np.abs(r_near.pn_delta).sum() < 0.05
    assert np.abs(r_near.pn_delta).sum() < 0.1 * np.abs(r_far.pn_delta).sum()


def test_black_image_pp_is_empty():
    def biased(z):
        z = torch.as_tensor(z, dtype=torch.float32).reshape(len(z), -1)
        return torch.softmax(torch.stack([z.sum(1), z.sum(1) * 0 + 0.5], 1), 1)

    r = pertinent_positive(biased, np.zeros((28, 28), np.float32))
    assert r.pp_success and np.all(r.pp == 0) and np.all(r.pp_mask == 0)


def test_budget_exhaustion_is_flagged():
    const = lambda z: torch.tensor([[0.9, 0.1]]).expand(len(z), 2) + 0.0 * torch.as_tensor(z).reshape(len(z), -1).sum(1, keepdim=True)
    r = pertinent_negative(const, np.full(4, 0.5, np.float32), ContrastiveConfig(c_steps=2, max_iterations=5))
    assert r.pn_success is False and np.all(r.pn_delta == 0)


def test_contrastive_on_column_classifier(column_classifier, synth_test_norm):
    x = synth_test_norm[0].image
    r = contrastive_explain(column_classifier, x, ContrastiveConfig(max_iterations=50))
    y = predict_class(column_classifier, x)
    if r.pn_success:
        assert predict_class(column_classifier, x + r.pn_delta) != y
    if r.pp_success:
        assert predict_class(column_classifier, r.pp) == y
    assert (r.pp <= x + 1e-7).all() and (r.pp >= 0).all()


# --- sweeps


def test_sweep_config_validation():
    assert SweepConfig().values == (-0.8, -0.5, 0.0, 0.5, 0.8)
    with pytest.raises(ValueError):
        SweepConfig(values=())
    with pytest.raises(ValueError):
        SweepConfig(values=(0.0, 1.5))
    with pytest.raises(ValueError):
        SweepConfig(attribute="label")
    with pytest.raises(ValueError):
        SweepConfig(explainer="lime")


def test_sweep_entries_share_latent(tiny_vae, tiny_scm, column_classifier, synth_test_norm):
    obs = synth_test_norm[0]
    bg = stack(synth_test_norm[1:6])[0]
    entries = sweep_explain(tiny_vae, tiny_scm, column_classifier, obs, SweepConfig("thickness", n_samples=20), bg)
    assert [e.value for e in entries] == [-0.8, -0.5, 0.0, 0.5, 0.8]
    assert all(np.array_equal(e.latent, entries[0].latent) for e in entries)
    assert all(e.attributes[0] == e.value for e in entries)
    for e in entries:
        assert e.scores.shape == (10,) and abs(e.scores.sum() - 1) < 1e-5
        assert e.explanation.values.shape == (10, 28, 28)
    with pytest.raises(BackgroundError):
        sweep_explain(tiny_vae, tiny_scm, column_classifier, obs, SweepConfig("slant"), None)


def test_sweep_identity_value_reconstructs(tiny_vae, tiny_scm, column_classifier, synth_test_norm):
    obs = synth_test_norm[3]
    images, cont, labels = stack([obs])
    recon = tiny_vae.reconstruct(images, cont, labels)[0]
    cfg = SweepConfig("slant", values=(float(obs.attributes.slant),), explainer="contrastive",
                      contrastive=ContrastiveConfig(c_steps=1, max_iterations=2))
    (entry,) = sweep_explain(tiny_vae, tiny_scm, column_classifier, obs, cfg)
    np.testing.assert_allclose(entry.image, recon, atol=1e-5)
    (plain,) = sweep_explain(tiny_vae, None, column_classifier, obs, cfg)
    np.testing.assert_array_equal(plain.image, recon)
