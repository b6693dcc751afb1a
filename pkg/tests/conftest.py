import sys

import numpy as np
import pytest
import torch

from cgmexplain.data import AttributeVector, Observation, fit_normalizer, normalize_observations
from cgmexplain.morphometrics import shear_image


def bar_image(thickness=3, intensity=1.0, shear=0.0, length=16, col=14):
    img = np.zeros((28, 28))
    half = thickness // 2
    img[6 : 6 + length, col - half : col - half + thickness] = intensity
    if shear:
        img = shear_image(img, shear)
    return img


def synthetic_observations(n=64, seed=0, split="train"):
    """Bars whose thickness, brightness and shear follow t -> i with random labels."""
    rng = np.random.default_rng(seed)
    obs = []
    for k in range(n):
        t = int(rng.integers(1, 6))
        i = float(np.clip(0.4 + 0.1 * t + 0.05 * rng.standard_normal(), 0.2, 1.0))
        s = float(rng.uniform(-0.4, 0.4))
        label = int(rng.integers(0, 10))
        col = 8 + label  # the label moves the bar so it is learnable
        img = bar_image(t, i, np.tan(s), col=col).astype(np.float32)
        obs.append(Observation(img, AttributeVector(float(t), i * 255.0, s, label), split, k))
    return obs


@pytest.fixture(scope="session")
def synth_train():
    return synthetic_observations(96, seed=0)


@pytest.fixture(scope="session")
def synth_norm(synth_train):
    return fit_normalizer(synth_train)


@pytest.fixture(scope="session")
def synth_train_norm(synth_train, synth_norm):
    return normalize_observations(synth_train, synth_norm)


@pytest.fixture(scope="session")
def synth_test_norm(synth_norm):
    return normalize_observations(synthetic_observations(32, seed=1, split="test"), synth_norm)


class ColumnClassifier:
    """Differentiable toy scorer: class k is the brightness of image column 8 + k."""

    def __init__(self, scale: float = 4.0):
        self.scale = scale

    def __call__(self, x):
        x = torch.as_tensor(x, dtype=torch.float32).reshape(-1, 28, 28)
        cols = x[:, :, 8:18].sum(dim=1)
        return torch.softmax(self.scale * cols, dim=1)


@pytest.fixture
def column_classifier():
    return ColumnClassifier()


TINY_CGM = dict(epochs=2, batch_size=32, d_z=8, d_e=4, channels=(8, 8, 16, 16, 32), enforce_gate=False)


@pytest.fixture(scope="session")
def tiny_vae(synth_train_norm):
    from cgmexplain.cgm import CGMConfig, train_vae

    return train_vae(synth_train_norm, CGMConfig(**TINY_CGM))


@pytest.fixture(scope="session")
def tiny_scm(synth_train_norm):
    from cgmexplain.scm import fit_mechanisms

    return fit_mechanisms(synth_train_norm, max_steps=300, seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = mod.RESULTS.get(n, (None, "not run"))
        status = "NOT RUN" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
