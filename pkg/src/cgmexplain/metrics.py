"""Interpretability metrics for counterfactual explanations.

IM1 compares how well the target-class and source-class autoencoders
reconstruct a counterfactual; IM2 compares the target-class and global
autoencoders relative to the counterfactual's mass. The oracle score is the
agreement rate between the explained classifier and an independently seeded
one on the counterfactuals.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import stats

from .classifiers import predict_class
from .morphometrics import Morphometrics, batch_morphometrics, morphometrics  # noqa: F401  (re-exported)

DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class MetricConfig:
    eps: float = DEFAULT_EPS
    oracle_runs: int = 10
    level: float = 0.95

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.oracle_runs < 1:
            raise ValueError("need at least one oracle run")


@dataclass(frozen=True)
class IMRecord:
    instance: int
    source: int
    target: int
    im1: float
    im2: float

    def as_dict(self):
        return asdict(self)


def _reconstruct(ae, x: np.ndarray) -> np.ndarray:
    if hasattr(ae, "reconstruct"):
        out = ae.reconstruct(x)
    else:
        with torch.no_grad():
            out = ae(x)
    out = out.detach().numpy() if isinstance(out, torch.Tensor) else np.asarray(out)
    return out.reshape(np.shape(x)).astype(np.float64)


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def _sq(a, b):
    d = (a - b).reshape(len(a), -1)
    return np.sum(d * d, axis=1)


def im1_batch(x_cf, ae_source, ae_target, eps: float = DEFAULT_EPS) -> np.ndarray:
    """IM1 for a stack of counterfactuals sharing source and target classes."""
    x = _batch(x_cf)
    return _sq(x, _reconstruct(ae_target, x)) / (_sq(x, _reconstruct(ae_source, x)) + eps)


def im2_batch(x_cf, ae_target, ae_global, eps: float = DEFAULT_EPS) -> np.ndarray:
    x = _batch(x_cf)
    l1 = np.abs(x.reshape(len(x), -1)).sum(axis=1)
    return _sq(_reconstruct(ae_target, x), _reconstruct(ae_global, x)) / (l1 + eps)


def im1(x_cf, ae_p, ae_q, eps: float = DEFAULT_EPS) -> float:
    """``|x' - AE_q(x')|^2 / (|x' - AE_p(x')|^2 + eps)``; below 1 favours the target class q."""
    return float(im1_batch(x_cf, ae_p, ae_q, eps)[0])


def im2(x_cf, ae_q, ae_global, eps: float = DEFAULT_EPS) -> float:
    """``|AE_q(x') - AE(x')|^2 / (|x'|_1 + eps)``; lower is better."""
    return float(im2_batch(x_cf, ae_q, ae_global, eps)[0])


def im_records(x_cf, sources, targets, autoencoders, eps: float = DEFAULT_EPS, ids=None) -> list[IMRecord]:
    """IM1/IM2 for counterfactuals with per-instance source and target classes.

    Instances are grouped by (source, target) pair so each autoencoder runs
    batched; the returned list keeps input order.
    """
    x = _batch(x_cf)
    sources = np.asarray(sources, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    v1 = np.empty(len(x))
    v2 = np.empty(len(x))
    for p, q in sorted(set(zip(sources.tolist(), targets.tolist()))):
        sel = (sources == p) & (targets == q)
        v1[sel] = im1_batch(x[sel], autoencoders[p], autoencoders[q], eps)
        v2[sel] = im2_batch(x[sel], autoencoders[q], autoencoders.global_ae, eps)
    return [IMRecord(int(i), int(p), int(q), float(a), float(b)) for i, p, q, a, b in zip(ids, sources, targets, v1, v2)]


def oracle_score(f, oracle, counterfactuals) -> float:
    """Fraction of counterfactuals on which ``f`` and ``oracle`` predict the same class."""
    x = _batch(counterfactuals)
    if len(x) == 0:
        raise ValueError("oracle score needs at least one counterfactual")
    return float(np.mean(predict_class(f, x) == predict_class(oracle, x)))


def mean_ci(values, level: float = 0.95):
    """Normal-approximation interval: ``(mean, z * s / sqrt(n))`` with sample std ``s``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("mean_ci needs at least two values")
    z = stats.norm.ppf(0.5 + level / 2.0)
    return float(v.mean()), float(z * v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class MetricReport:
    """Aggregates per method: IM1/IM2 means with CI half-widths, oracle runs, success rates."""

    level: float
    methods: dict  # method -> {"n", "success_rate", "im1_mean", "im1_ci", "im2_mean", "im2_ci", ...}
    per_class: list  # rows {"method", "class", "n", "im1_mean", "im2_mean"}
    oracle: dict  # method -> list of per-run scores

    def to_dict(self) -> dict:
        return {"level": self.level, "methods": self.methods, "per_class": self.per_class, "oracle": self.oracle}


def _ci_or_nan(values, level):
    if len(values) < 2:
        return (float(np.mean(values)) if len(values) else float("nan")), float("nan")
    return mean_ci(values, level)


def summarize(records: dict, oracle_scores: dict, success_rates: dict, level: float = 0.95) -> MetricReport:
    """Build a :class:`MetricReport` from per-method IM records and oracle runs.

    Methods are reported in sorted order and per-class rows are keyed by the
    counterfactual's source class, so the result does not depend on input order.
    """
    methods, per_class, oracle = {}, [], {}
    for name in sorted(records):
        recs = records[name]
        v1 = np.array([r.im1 for r in recs], dtype=np.float64)
        v2 = np.array([r.im2 for r in recs], dtype=np.float64)
        m1, h1 = _ci_or_nan(v1, level)
        m2, h2 = _ci_or_nan(v2, level)
        runs = [float(s) for s in oracle_scores.get(name, [])]
        om, oh = _ci_or_nan(runs, level) if runs else (float("nan"), float("nan"))
        methods[name] = {
            "n": int(len(recs)),
            "success_rate": float(success_rates.get(name, float("nan"))),
            "im1_mean": m1,
            "im1_ci": h1,
            "im2_mean": m2,
            "im2_ci": h2,
            "oracle_mean": om,
            "oracle_ci": oh,
        }
        oracle[name] = runs
        src = np.array([r.source for r in recs], dtype=np.int64)
        for k in sorted(set(src.tolist())):
            sel = src == k
            per_class.append(
                {"method": name, "class": int(k), "n": int(sel.sum()), "im1_mean": float(v1[sel].mean()), "im2_mean": float(v2[sel].mean())}
            )
    return MetricReport(level, methods, per_class, oracle)
