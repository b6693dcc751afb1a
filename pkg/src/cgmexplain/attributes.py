"""Attribute-space explanations through a Monte-Carlo attribute classifier.

The attribute classifier averages ``f`` over images rendered from a fixed
sample of prior latents,

    f_hat(a) = 1/m * sum_i f(G(z_i, a)),

so with the sample frozen it is a deterministic function of ``a`` and exact
Shapley values over the three continuous attributes are cheap to enumerate.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import factorial

import numpy as np
import torch

from .cgm import CGMHandle
from .data import CONTINUOUS, NUM_CLASSES, AttributeVector
from .errors import BackgroundError
from .utils import batched


@dataclass
class MCConfig:
    m: int = 4
    seed: int = 0
    batch_size: int = 1000
    include_label: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")


class MCAttributeClassifier:
    """``f_hat`` with its latent sample drawn once from the prior and frozen."""

    def __init__(self, f, model: CGMHandle, config: MCConfig | None = None):
        self.f = f
        self.model = model
        self.config = config or MCConfig()
        g = torch.Generator().manual_seed(self.config.seed)
        self.latents = torch.randn((self.config.m, model.d_z), generator=g)

    @torch.no_grad()
    def batch(self, cont, labels) -> np.ndarray:
        """Scores ``(n, K)`` for ``n`` normalised attribute rows and their labels."""
        cont = np.atleast_2d(np.asarray(cont, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(labels) == 1 and len(cont) > 1:
            labels = np.repeat(labels, len(cont))
        n, m = len(cont), self.config.m
        z = self.latents.repeat(n, 1)
        c = np.repeat(cont, m, axis=0)
        y = np.repeat(labels, m)
        out = []
        for sl in batched(n * m, self.config.batch_size):
            imgs = self.model.generate_batch(z[sl], c[sl], y[sl])
            s = self.f(imgs)
            out.append(s.numpy() if isinstance(s, torch.Tensor) else np.asarray(s))
        scores = np.concatenate(out).astype(np.float64)
        return scores.reshape(n, m, -1).mean(axis=1)

    def __call__(self, a: AttributeVector) -> np.ndarray:
        return self.batch(a.continuous()[None], [a.label])[0]


def mc_attribute_classifier(f, G: CGMHandle, a: AttributeVector, cfg: MCConfig | None = None) -> np.ndarray:
    return MCAttributeClassifier(f, G, cfg)(a)


# ---------------------------------------------------------------------------
# exact Shapley enumeration


@dataclass
class AttributeExplanation:
    values: np.ndarray  # (K, d_a)
    attributes: AttributeVector
    names: tuple
    base_value: np.ndarray  # (K,) mean background score
    prediction: np.ndarray  # (K,) f_hat(a)

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]


def shapley_weights(n: int) -> dict:
    """Coalition weight ``|S|! (n - |S| - 1)! / n!`` keyed by ``|S|``."""
    return {s: factorial(s) * factorial(n - s - 1) / factorial(n) for s in range(n)}


def exact_shapley(value, n: int) -> np.ndarray:
    """Shapley values from a coalition value function ``value(frozenset) -> (K,)``.

    Returns an array ``(K, n)``. Each coalition is evaluated exactly once.
    """
    cache = {}

    def v(s):
        if s not in cache:
            cache[s] = np.asarray(value(s), dtype=np.float64)
        return cache[s]

    w = shapley_weights(n)
    players = range(n)
    phi = None
    for j in players:
        others = [p for p in players if p != j]
        total = 0.0
        for r in range(n):
            for s in itertools.combinations(others, r):
                s = frozenset(s)
                total = total + w[r] * (v(s | {j}) - v(s))
        phi = np.zeros((len(total), n)) if phi is None else phi
        phi[:, j] = total
    return phi


def _background_table(background):
    """Normalised background as ``(cont (B,3), labels (B,))``."""
    if background is None or len(background) == 0:
        raise BackgroundError("attribute Shapley needs a nonempty background set")
    if isinstance(background, tuple) and len(background) == 2:
        if len(background[0]) == 0:
            raise BackgroundError("attribute Shapley needs a nonempty background set")
        cont, labels = background
        return np.atleast_2d(np.asarray(cont, dtype=np.float64)), np.asarray(labels, dtype=np.int64)
    if hasattr(background, "columns"):
        cont = background[list(CONTINUOUS)].to_numpy(np.float64)
        labels = background["label"].to_numpy(np.int64) if "label" in background.columns else np.zeros(len(cont), np.int64)
        return cont, labels
    first = background[0]
    if isinstance(first, AttributeVector):
        return np.stack([b.continuous() for b in background]), np.array([b.label for b in background])
    if hasattr(first, "attributes"):
        return np.stack([o.attributes.continuous() for o in background]), np.array([o.attributes.label for o in background])
    cont = np.atleast_2d(np.asarray(background, dtype=np.float64))
    return cont, np.zeros(len(cont), np.int64)


def attribute_shapley(f_hat, a: AttributeVector, background, include_label: bool | None = None) -> AttributeExplanation:
    """Exact Shapley values of ``f_hat`` at ``a`` over the continuous attributes.

    Attributes outside a coalition are imputed from each background row and
    the coalition value is the mean score over the background. The label is
    held at ``a.label`` unless ``include_label`` makes it a fourth player.
    ``f_hat`` is an :class:`MCAttributeClassifier` or any callable
    ``(cont (n,3), labels (n,)) -> scores (n,K)``.
    """
    bg_cont, bg_labels = _background_table(background)
    if include_label is None:
        include_label = getattr(getattr(f_hat, "config", None), "include_label", False)
    evaluate = f_hat.batch if hasattr(f_hat, "batch") else f_hat
    x = a.continuous()
    n_players = len(CONTINUOUS) + int(include_label)

    def value(s):
        cont = bg_cont.copy()
        for j in s:
            if j < len(CONTINUOUS):
                cont[:, j] = x[j]
        labels = np.full(len(cont), a.label) if (not include_label or len(CONTINUOUS) in s) else bg_labels
        return np.asarray(evaluate(cont, labels), dtype=np.float64).mean(axis=0)

    phi = exact_shapley(value, n_players)
    names = CONTINUOUS + (("label",) if include_label else ())
    base = value(frozenset())
    pred = np.asarray(evaluate(x[None], [a.label]), dtype=np.float64)[0]
    return AttributeExplanation(phi, a, names, base, pred)


def local_importance(expl: AttributeExplanation) -> np.ndarray:
    """Per-attribute mean of ``|phi|`` over the class score functions."""
    return np.abs(np.asarray(expl.values if isinstance(expl, AttributeExplanation) else expl)).mean(axis=0)


@dataclass
class GlobalImportance:
    values: np.ndarray  # (K, d_a), NaN rows for absent classes
    names: tuple
    counts: np.ndarray  # instances per class
    present: np.ndarray  # bool per class
    aggregation: dict = field(default_factory=lambda: {"over_classes": "mean_abs", "over_instances": "median"})

    def lowest_attribute(self) -> list:
        """Name of the least important attribute per class (``None`` when absent)."""
        out = []
        for k in range(len(self.values)):
            out.append(self.names[int(np.argmin(self.values[k]))] if self.present[k] else None)
        return out


def global_importance(explanations, labels, n_classes: int = NUM_CLASSES) -> GlobalImportance:
    """Median of local importances over each class's instances."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(explanations) != len(labels):
        raise ValueError("one label per explanation")
    local = np.stack([local_importance(e) for e in explanations]) if len(explanations) else np.zeros((0, 0))
    names = explanations[0].names if len(explanations) and isinstance(explanations[0], AttributeExplanation) else CONTINUOUS
    d = local.shape[1] if local.size else len(names)
    vals = np.full((n_classes, d), np.nan)
    counts = np.zeros(n_classes, dtype=np.int64)
    for k in range(n_classes):
        sel = labels == k
        counts[k] = sel.sum()
        if counts[k]:
            vals[k] = np.median(local[sel], axis=0)
    return GlobalImportance(vals, tuple(names), counts, counts > 0)
