"""Pixel-space explanations and the attribute-sweep protocol.

``shapley_saliency`` approximates Shapley values with expected gradients,

    phi_j = E_{x_b ~ background, u ~ U(0,1)} [(x_j - x_b,j) * d f / d x_j (x_b + u (x - x_b))],

which is what SHAP's gradient explainer computes. ``pertinent_negative`` and
``pertinent_positive`` solve the contrastive-explanation elastic-net
problems with FISTA and a binary search over the attack weight ``c``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .cgm import CGMHandle
from .data import CONTINUOUS, Observation
from .errors import BackgroundError
from .utils import batched

DEFAULT_SWEEP = (-0.8, -0.5, 0.0, 0.5, 0.8)


@dataclass
class SaliencyMap:
    values: np.ndarray  # (K, *input_shape)
    expected: np.ndarray  # (K,) mean background score per class

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]


def _scores(f, x: torch.Tensor) -> torch.Tensor:
    out = f(x)
    return out if isinstance(out, torch.Tensor) else torch.as_tensor(out)


def shapley_saliency(f, x, background, n_samples: int = 200, seed: int = 0, batch_size: int = 100) -> SaliencyMap:
    """Expected-gradients attribution of every class score of ``f`` at ``x``.

    ``f`` maps a float tensor ``(n, *x.shape)`` to scores ``(n, K)`` and must
    be differentiable. ``background`` is an array ``(B, *x.shape)``.
    """
    if len(background) == 0:
        raise BackgroundError("background set is empty")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x_t = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    bg = torch.as_tensor(np.asarray(background), dtype=torch.float32)
    g = torch.Generator().manual_seed(seed)
    idx = torch.randint(len(bg), (n_samples,), generator=g)
    u = torch.rand((n_samples,) + (1,) * x_t.dim(), generator=g)

    with torch.no_grad():
        expected = torch.cat([_scores(f, bg[sl]) for sl in batched(len(bg), batch_size)]).mean(0)
    n_classes = expected.shape[0]
    total = torch.zeros((n_classes,) + tuple(x_t.shape), dtype=torch.float64)
    for sl in batched(n_samples, batch_size):
        base = bg[idx[sl]]
        diff = x_t[None] - base
        point = (base + u[sl] * diff).requires_grad_(True)
        out = _scores(f, point)
        for k in range(n_classes):
            (grad,) = torch.autograd.grad(out[:, k].sum(), point, retain_graph=k < n_classes - 1)
            total[k] += (grad * diff).sum(0).to(torch.float64)
    return SaliencyMap((total / n_samples).numpy(), expected.to(torch.float64).numpy())


# ---------------------------------------------------------------------------
# contrastive explanations


@dataclass
class ContrastiveConfig:
    kappa: float = 0.0
    beta: float = 0.1
    c_init: float = 10.0
    c_steps: int = 9
    max_iterations: int = 100
    lr: float = 1e-2
    feature_range: tuple = (0.0, 1.0)


@dataclass
class ContrastiveResult:
    """PN and/or PP for one input; absent parts are ``None``."""

    original_class: int
    scores_x: np.ndarray
    pn_delta: np.ndarray | None = None
    pn_class: int | None = None
    pn_scores: np.ndarray | None = None
    pn_success: bool | None = None
    pp: np.ndarray | None = None  # retained image, elementwise within [0, x]
    pp_class: int | None = None
    pp_scores: np.ndarray | None = None
    pp_success: bool | None = None
    iterations: dict = field(default_factory=dict)

    @property
    def pp_mask(self) -> np.ndarray | None:
        if self.pp is None:
            return None
        x = self.pp_source
        return np.divide(self.pp, x, out=np.zeros_like(self.pp), where=x > 0)

    pp_source: np.ndarray | None = field(default=None, repr=False)


def _margin(scores: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``f_y - max_{j != y} f_j`` per row."""
    own = scores.gather(1, y[:, None])[:, 0]
    other = scores.scatter(1, y[:, None], float("-inf")).max(1).values
    return own - other


def _soft_threshold(v: torch.Tensor, t: float) -> torch.Tensor:
    return torch.sign(v) * torch.clamp(v.abs() - t, min=0.0)


def _cem_batch(f, x: torch.Tensor, y: torch.Tensor, mode: str, cfg: ContrastiveConfig):
    """Run the batched CEM search; returns (best delta, success flags, iterations)."""
    n = len(x)
    flat = (n, -1)
    if mode == "pn":
        lo_bound, hi_bound = cfg.feature_range[0] - x, cfg.feature_range[1] - x
    else:
        lo_bound, hi_bound = torch.zeros_like(x), x.clone()

    def project(d):
        return torch.maximum(torch.minimum(d, hi_bound), lo_bound)

    def candidate(d):
        return x + d if mode == "pn" else d

    def attack(scores):
        m = _margin(scores, y)
        # PN must leave class y, PP must keep it
        return torch.clamp(m + cfg.kappa if mode == "pn" else -m + cfg.kappa, min=0.0)

    def feasible(scores):
        pred = torch.argmax(scores, dim=1)
        return pred != y if mode == "pn" else pred == y

    c = torch.full((n,), cfg.c_init, dtype=torch.float32)
    c_lo = torch.zeros(n)
    c_hi = torch.full((n,), float("inf"))
    best = torch.zeros_like(x)
    best_cost = torch.full((n,), float("inf"))
    found = torch.zeros(n, dtype=torch.bool)
    iters = 0
    with torch.no_grad():
        s0 = _scores(f, candidate(torch.zeros_like(x)))
        ok0 = feasible(s0)
        if ok0.any():
            best_cost = torch.where(ok0, torch.zeros(n), best_cost)
            found |= ok0
    for _ in range(cfg.c_steps):
        success_this = torch.zeros(n, dtype=torch.bool)
        delta = torch.zeros_like(x)
        slack = delta.clone()
        for k in range(cfg.max_iterations):
            iters += 1
            slack.requires_grad_(True)
            scores = _scores(f, candidate(slack))
            smooth = (c * attack(scores)).sum() + (slack.reshape(flat) ** 2).sum()
            (grad,) = torch.autograd.grad(smooth, slack)
            with torch.no_grad():
                new = project(_soft_threshold(slack - cfg.lr * grad, cfg.lr * cfg.beta))
                slack = project(new + k / (k + 3.0) * (new - delta))
                delta = new
                s = _scores(f, candidate(delta))
                ok = feasible(s)
                cost = cfg.beta * delta.reshape(flat).abs().sum(1) + (delta.reshape(flat) ** 2).sum(1)
                better = ok & (cost < best_cost)
                best[better] = delta[better]
                best_cost = torch.where(better, cost, best_cost)
                found |= ok
                success_this |= ok
        # binary search on c: shrink after a success, grow after a failure
        c_hi = torch.where(success_this, torch.minimum(c_hi, c), c_hi)
        c_lo = torch.where(success_this, c_lo, torch.maximum(c_lo, c))
        c = torch.where(torch.isfinite(c_hi), (c_lo + c_hi) / 2.0, c * 10.0)
    return best.detach(), found, iters


def _as_batch(x):
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    return x


def _contrastive(f, x, config, mode):
    config = config or ContrastiveConfig()
    xs = _as_batch(x)[None]
    with torch.no_grad():
        s_x = _scores(f, xs)
    y = torch.argmax(s_x, dim=1)
    best, found, iters = _cem_batch(f, xs, y, mode, config)
    cand = xs + best if mode == "pn" else best
    with torch.no_grad():
        s_c = _scores(f, cand)
    res = ContrastiveResult(int(y[0]), s_x[0].numpy().astype(np.float64))
    if mode == "pn":
        res.pn_delta = best[0].numpy()
        res.pn_scores = s_c[0].numpy().astype(np.float64)
        res.pn_class = int(torch.argmax(s_c[0]))
        res.pn_success = bool(found[0])
        res.iterations["pn"] = iters
    else:
        res.pp = best[0].numpy()
        res.pp_source = xs[0].numpy()
        res.pp_scores = s_c[0].numpy().astype(np.float64)
        res.pp_class = int(torch.argmax(s_c[0]))
        res.pp_success = bool(found[0])
        res.iterations["pp"] = iters
    return res


def pertinent_negative(f, x, config: ContrastiveConfig | None = None) -> ContrastiveResult:
    """Smallest elastic-net perturbation ``delta`` with ``C(x + delta) != C(x)``.

    Minimises ``c * max(0, f_y - max_{j!=y} f_j + kappa) + beta |delta|_1 + |delta|_2^2``
    with ``x + delta`` kept in the feature range. On budget exhaustion the
    result has ``pn_success=False`` and a zero perturbation.
    """
    return _contrastive(f, x, config, "pn")


def pertinent_positive(f, x, config: ContrastiveConfig | None = None) -> ContrastiveResult:
    """Sparsest retained image ``pp`` in ``[0, x]`` still classified as ``C(x)``."""
    return _contrastive(f, x, config, "pp")


def contrastive_explain(f, x, config: ContrastiveConfig | None = None) -> ContrastiveResult:
    pn = pertinent_negative(f, x, config)
    pp = pertinent_positive(f, x, config)
    pn.pp, pn.pp_source, pn.pp_scores, pn.pp_class, pn.pp_success = pp.pp, pp.pp_source, pp.pp_scores, pp.pp_class, pp.pp_success
    pn.iterations.update(pp.iterations)
    return pn


# ---------------------------------------------------------------------------
# attribute sweeps


@dataclass
class SweepConfig:
    attribute: str = "thickness"
    values: tuple = DEFAULT_SWEEP
    explainer: str = "shapley"  # or "contrastive"
    n_samples: int = 200
    seed: int = 0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.attribute not in CONTINUOUS:
            raise ValueError(f"sweep attribute must be one of {CONTINUOUS}")
        if len(self.values) == 0 or any(not -1.0 <= v <= 1.0 for v in self.values):
            raise ValueError("sweep values must be a nonempty subset of [-1, 1]")
        if self.explainer not in ("shapley", "contrastive"):
            raise ValueError("explainer must be 'shapley' or 'contrastive'")


@dataclass
class SweepEntry:
    value: float
    attributes: np.ndarray  # normalised continuous attributes after the intervention
    image: np.ndarray
    scores: np.ndarray
    explanation: object
    latent: np.ndarray


def sweep_explain(model: CGMHandle, scm, f, observation: Observation, config: SweepConfig, background=None) -> list[SweepEntry]:
    """Explain ``f`` on counterfactuals ``G(E(x,a), a^{i,v})`` for each sweep value ``v``.

    Every entry is rendered from the same latent code, so only the swept
    attribute (and, through the SCM, its descendants) changes.
    """
    a = observation.attributes
    cont = a.continuous()[None]
    with torch.no_grad():
        z = model.encode_batch(observation.image, cont, [a.label])
    n = len(config.values)
    j = CONTINUOUS.index(config.attribute)
    cf_cont = np.empty((n, cont.shape[1]))
    for k, v in enumerate(config.values):
        if scm is None:
            cf_cont[k] = cont[0]
            cf_cont[k, j] = v
        else:
            cf, _ = scm.counterfactual_array(cont, [a.label], {config.attribute: float(v)})
            cf_cont[k] = cf[0]
    with torch.no_grad():
        images = model.generate_batch(z.expand(n, -1), cf_cont, [a.label] * n)[:, 0]
        scores = _scores(f, images).numpy().astype(np.float64)
    if config.explainer == "shapley" and background is None:
        raise BackgroundError("Shapley sweeps need a background image set")
    entries = []
    for k, v in enumerate(config.values):
        img = images[k].numpy()
        if config.explainer == "shapley":
            expl = shapley_saliency(f, img, background, config.n_samples, seed=config.seed)
        else:
            expl = contrastive_explain(f, img, config.contrastive)
        entries.append(SweepEntry(float(v), cf_cont[k], img, scores[k], expl, z[0].numpy().copy()))
    return entries
