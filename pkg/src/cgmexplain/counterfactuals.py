"""Counterfactual explanations searched in label-attribute space or in pixel space.

* ``gradient_cf`` descends on softmax logits ``p`` of the label distribution;
  the generator sees the expected embedding ``p @ E`` and the loss is
  ``lam * (max_{j != y_t} f_j(x') - f_{y_t}(x')) + |x' - x|_1``.
* ``agnostic_cf`` walks ``alpha`` up a uniform grid on the segment between
  ``e(y)`` and ``e(y_t)`` and stops at the first class flip to ``y_t``.
* ``baseline_pixel_cf`` is an untargeted hinge + L1 search directly over pixels.

Failures are returned as explanations with ``success=False``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .cgm import CGMHandle, expected_embedding, interpolated_embedding
from .classifiers import predict_class
from .data import CONTINUOUS, Observation, stack
from .errors import SearchError
from .scm import check_spec
from .utils import as_image_batch, batched

GRADIENT = "gradient"
AGNOSTIC = "agnostic"
BASELINE = "baseline-pixel"


@dataclass
class GradientCFConfig:
    lam: float = 10.0
    steps: int = 300
    step_size: float = 0.05
    target: int | None = None
    search: tuple = ("label",)
    hinge: bool = False
    proximity: str = "mean"  # "mean" or "sum" over pixels
    margin: str = "log"  # margin on log-scores ("log") or on raw scores ("prob")
    init_logit: float = 2.0
    batch_size: int = 250

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.proximity not in ("mean", "sum"):
            raise ValueError("proximity must be 'mean' or 'sum'")
        if self.margin not in ("log", "prob"):
            raise ValueError("margin must be 'log' or 'prob'")
        check_spec({k: None for k in self.search})


@dataclass
class AgnosticCFConfig:
    grid: int = 100
    target: int | None = None

    def __post_init__(self):
        if self.grid < 2:
            raise ValueError("grid size must be >= 2")

    @property
    def alphas(self) -> np.ndarray:
        return np.arange(self.grid) / (self.grid - 1)


@dataclass
class BaselineCFConfig:
    lambdas: tuple = (1.0, 10.0, 100.0, 1000.0, 1e4, 1e5)
    steps: int = 100
    step_size: float = 0.05
    kappa: float = 0.0
    batch_size: int = 250

    def __post_init__(self):
        if not self.lambdas or any(v <= 0 for v in self.lambdas):
            raise ValueError("lambda schedule must be nonempty and positive")
        if self.steps < 1 or not self.step_size > 0:
            raise ValueError("steps and step size must be positive")


@dataclass
class CFExplanation:
    method: str
    image: np.ndarray
    original: np.ndarray
    index: int
    source: int  # y
    target: int | None  # y_t (None for the untargeted baseline)
    achieved: int
    success: bool
    artifact: dict
    evaluations: int
    trace: np.ndarray | None = field(default=None, repr=False)

    def as_record(self) -> dict:
        return {
            "method": self.method,
            "index": self.index,
            "source": self.source,
            "target": self.target,
            "achieved": self.achieved,
            "success": self.success,
            "evaluations": self.evaluations,
            **{f"artifact_{k}": v for k, v in self.artifact.items()},
        }


def default_target(y: int) -> int:
    return (int(y) + 1) % 10


def _classify(f, x) -> int:
    return int(predict_class(f, x))


def render(model: CGMHandle, observation: Observation, embedding, cont=None) -> np.ndarray:
    """``G(E(x, a), a')`` for one observation with the label replaced by an embedding vector."""
    a = observation.attributes
    c = a.continuous()[None] if cont is None else np.asarray(cont, dtype=np.float64)[None]
    with torch.no_grad():
        z = model.encode_batch(observation.image, a.continuous()[None], [a.label])
        return model.generate_batch(z, c, embedding=embedding)[0, 0].numpy()


def regenerate(model: CGMHandle, observation: Observation, expl: CFExplanation) -> np.ndarray:
    """Rebuild a counterfactual image from its recorded search artifact."""
    a = observation.attributes
    emb = model.label_embedding
    if "p" in expl.artifact:
        e = expected_embedding(emb, expl.artifact["p"])
    else:
        e = interpolated_embedding(emb, expl.source, expl.target, expl.artifact["alpha"])
    cont = expl.artifact.get("cont", a.continuous())
    return render(model, observation, e, cont)


# ---------------------------------------------------------------------------
# gradient-based search


def _margin(scores: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``max_{j != t} f_j - f_t`` per row (negative once ``t`` wins)."""
    own = scores.gather(1, target[:, None])[:, 0]
    other = scores.scatter(1, target[:, None], float("-inf")).max(1).values
    return other - own


def _gradient_batch(model: CGMHandle, f, images, cont, labels, targets, cfg: GradientCFConfig):
    n = len(images)
    x = as_image_batch(images)
    c0 = torch.as_tensor(cont, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    t = torch.as_tensor(targets, dtype=torch.long)
    with torch.no_grad():
        z = model.encode_batch(x, c0, y)
    table = model.embedding_table.detach()
    logits = torch.zeros((n, table.shape[0]))
    logits[torch.arange(n), y] = cfg.init_logit
    logits.requires_grad_(True)
    cols = [CONTINUOUS.index(k) for k in cfg.search if k in CONTINUOUS]
    params = [logits]
    delta = None
    if cols:
        delta = torch.zeros((n, len(cols)), requires_grad=True)
        params.append(delta)
    opt = torch.optim.Adam(params, lr=cfg.step_size)

    best_loss = torch.full((n,), float("inf"))
    best_logits = logits.detach().clone()
    best_cont = c0.clone()
    trace = np.empty((n, cfg.steps))
    for step in range(cfg.steps):
        c = c0
        if delta is not None:
            c = c0.clone()
            c[:, cols] = c0[:, cols] + delta
        p = torch.softmax(logits, dim=1)
        x_cf = model.generate_batch(z, c, embedding=p @ table)
        scores = f(x_cf)
        # probabilities saturate: a far-off target has ~zero gradient, log-scores keep it
        m = _margin(torch.log(scores.clamp_min(1e-30)) if cfg.margin == "log" else scores, t)
        if cfg.hinge:
            m = torch.clamp(m, min=0.0)
        prox = (x_cf - x).abs().flatten(1)
        prox = prox.mean(1) if cfg.proximity == "mean" else prox.sum(1)
        loss = cfg.lam * m + prox
        if not torch.isfinite(loss).all():
            raise SearchError(f"non-finite counterfactual loss at step {step}")
        with torch.no_grad():
            feasible = scores.argmax(1) == t
            better = feasible & (loss < best_loss)
            best_loss = torch.where(better, loss, best_loss)
            best_logits[better] = logits[better]
            best_cont[better] = c[better]
            trace[:, step] = best_loss.numpy()
        opt.zero_grad()
        loss.sum().backward()
        opt.step()
    found = torch.isfinite(best_loss)
    final_logits = torch.where(found[:, None], best_logits, logits.detach())
    final_cont = torch.where(found[:, None], best_cont, c.detach() if delta is not None else c0)
    p_final = torch.softmax(final_logits, dim=1).to(torch.float64).numpy()
    return p_final, final_cont.to(torch.float64).numpy(), best_loss.numpy().astype(np.float64), trace


def _finish_gradient(model, f, obs, p, cont, best_loss, trace, y_src, y_t, steps):
    # renormalise in float64 so the artifact passes the distribution check exactly
    p = p / p.sum()
    img = render(model, obs, expected_embedding(model.label_embedding, p), cont)
    achieved = _classify(f, img)
    artifact = {"p": p, "best_loss": float(best_loss)}
    if not np.array_equal(cont, obs.attributes.continuous()):
        artifact["cont"] = cont
    return CFExplanation(GRADIENT, img, obs.image, obs.index, y_src, y_t, achieved, achieved == y_t, artifact, steps, trace)


def gradient_cf(model: CGMHandle, scm, f, observation: Observation, cfg: GradientCFConfig | None = None) -> CFExplanation:
    return gradient_cf_batch(model, scm, f, [observation], cfg)[0]


def gradient_cf_batch(model: CGMHandle, scm, f, observations, cfg: GradientCFConfig | None = None, targets=None) -> list[CFExplanation]:
    """Gradient search over label logits; ``f`` must be differentiable.

    The source class is ``C(x)``; targets default to ``cfg.target`` or
    ``(C(x) + 1) mod 10``. Returns the best-loss iterate that reaches the
    target, or the last iterate flagged as a failure. The margin is taken on
    log-scores by default (``margin="prob"`` uses the raw scores). ``scm`` is
    only used to validate widened search subsets.
    """
    cfg = cfg or GradientCFConfig()
    if scm is not None and hasattr(scm, "graph"):
        unknown = [k for k in cfg.search if k != "label" and k not in scm.graph.nodes]
        if unknown:
            raise SearchError(f"search attributes not in the causal graph: {unknown}")
    images, cont, labels = stack(observations)
    src = predict_class(f, images) if len(images) else np.zeros(0, np.int64)
    src = np.atleast_1d(src)
    if targets is None:
        targets = np.full(len(src), cfg.target) if cfg.target is not None else (src + 1) % 10
    targets = np.asarray(targets, dtype=np.int64)
    out = []
    for sl in batched(len(images), cfg.batch_size):
        p, c, best, trace = _gradient_batch(model, f, images[sl], cont[sl], labels[sl], targets[sl], cfg)
        for k, i in enumerate(range(sl.start, sl.stop)):
            out.append(_finish_gradient(model, f, observations[i], p[k], c[k], best[k], trace[k], int(src[i]), int(targets[i]), cfg.steps))
    return out


# ---------------------------------------------------------------------------
# model-agnostic interpolation search


def agnostic_cf(model: CGMHandle, scm, f, observation: Observation, cfg: AgnosticCFConfig | None = None, target=None) -> CFExplanation:
    """Smallest grid ``alpha`` whose interpolated-embedding counterfactual is classified ``y_t``.

    Only ``predict_class`` is used, so ``f`` may be any black box returning
    scores. The grid is scanned in ascending order and stops at the first hit,
    which is the grid minimum by construction.
    """
    cfg = cfg or AgnosticCFConfig()
    y = _classify(f, observation.image)
    y_t = target if target is not None else (cfg.target if cfg.target is not None else default_target(y))
    emb = model.label_embedding
    a = observation.attributes
    with torch.no_grad():
        z = model.encode_batch(observation.image, a.continuous()[None], [a.label])
    img, achieved, evals = None, None, 0
    for alpha in cfg.alphas:
        evals += 1
        with torch.no_grad():
            img = model.generate_batch(z, a.continuous()[None], embedding=interpolated_embedding(emb, y, y_t, float(alpha)))[0, 0].numpy()
        achieved = _classify(f, img)
        if achieved == y_t:
            return CFExplanation(AGNOSTIC, img, observation.image, observation.index, y, y_t, achieved, True, {"alpha": float(alpha)}, evals)
    return CFExplanation(AGNOSTIC, img, observation.image, observation.index, y, y_t, achieved, False, {"alpha": 1.0}, evals)


def agnostic_cf_batch(model, scm, f, observations, cfg: AgnosticCFConfig | None = None, targets=None) -> list[CFExplanation]:
    targets = [None] * len(observations) if targets is None else list(targets)
    return [agnostic_cf(model, scm, f, o, cfg, t) for o, t in zip(observations, targets)]


# ---------------------------------------------------------------------------
# pixel-space baseline


def _baseline_batch(f, images, cfg: BaselineCFConfig):
    x = as_image_batch(images)
    n = len(x)
    with torch.no_grad():
        y = f(x).argmax(1)
    best = x.clone()
    best_l1 = torch.full((n,), float("inf"))
    flipped_at = torch.full((n,), -1.0)
    x_cf = x.clone()
    evals = 0
    for lam in cfg.lambdas:
        todo = ~torch.isfinite(best_l1)
        if not todo.any():
            break
        x_cf = x.clone().requires_grad_(True)
        opt = torch.optim.Adam([x_cf], lr=cfg.step_size)
        for _ in range(cfg.steps):
            evals += 1
            scores = f(x_cf)
            m = -_margin(scores, y)  # f_y - max_{j != y} f_j
            loss = lam * torch.clamp(m + cfg.kappa, min=0.0) + (x_cf - x).abs().flatten(1).sum(1)
            opt.zero_grad()
            loss.sum().backward()
            opt.step()
            with torch.no_grad():
                x_cf.clamp_(0.0, 1.0)
                s = f(x_cf)
                ok = (s.argmax(1) != y) & todo
                l1 = (x_cf - x).abs().flatten(1).sum(1)
                better = ok & (l1 < best_l1)
                best[better] = x_cf[better].detach()
                best_l1 = torch.where(better, l1, best_l1)
                flipped_at = torch.where(better, torch.full_like(flipped_at, lam), flipped_at)
    return best[:, 0].detach().numpy(), y.numpy(), best_l1.numpy().astype(np.float64), flipped_at.numpy().astype(np.float64), evals


def baseline_pixel_cf(f, x, cfg: BaselineCFConfig | None = None, index: int = -1) -> CFExplanation:
    return baseline_pixel_cf_batch(f, np.asarray(x)[None], cfg, [index])[0]


def baseline_pixel_cf_batch(f, images, cfg: BaselineCFConfig | None = None, indices=None) -> list[CFExplanation]:
    """Untargeted counterfactuals found by gradient descent on pixels.

    ``lam * max(0, f_y(x') - max_{j != y} f_j(x') + kappa) + |x' - x|_1``
    is minimised for each ``lam`` in the schedule until the class changes;
    the flipped iterate with the smallest L1 distance is kept.
    """
    cfg = cfg or BaselineCFConfig()
    images = np.asarray(images, dtype=np.float32).reshape(-1, 28, 28)
    indices = list(range(len(images))) if indices is None else list(indices)
    out = []
    for sl in batched(len(images), cfg.batch_size):
        best, y, l1, lam, evals = _baseline_batch(f, images[sl], cfg)
        achieved = np.atleast_1d(predict_class(f, best))
        for k, i in enumerate(range(sl.start, sl.stop)):
            ok = bool(np.isfinite(l1[k])) and int(achieved[k]) != int(y[k])
            artifact = {"l1": float(l1[k]) if np.isfinite(l1[k]) else None, "lam": float(lam[k])}
            out.append(CFExplanation(BASELINE, best[k], images[i], indices[i], int(y[k]), None, int(achieved[k]), ok, artifact, evals))
    return out
