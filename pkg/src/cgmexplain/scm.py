"""Structural causal model over the Morpho-MNIST attributes.

Each continuous attribute has a conditional location-scale flow

    value = loc(parents) + exp(log_scale(parents)) * noise,   noise ~ N(0, 1)

which inverts in closed form, so abduction, intervention and prediction are
exact. The digit label is an exogenous root: its "noise" is the label itself
under a uniform categorical prior and it is never recomputed.

All values are in normalised attribute units.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import pandas as pd
import torch
from torch import nn

from .data import CONTINUOUS, NUM_CLASSES, AttributeVector, Observation
from .errors import AbductionError, InterventionSpecError, TrainingError

logger = logging.getLogger(__name__)

IMAGE_NODE = "image"
MORPHO_NODES = ("thickness", "intensity", "slant", "label", IMAGE_NODE)
MORPHO_EDGES = (
    ("thickness", "intensity"),
    ("thickness", IMAGE_NODE),
    ("intensity", IMAGE_NODE),
    ("slant", IMAGE_NODE),
    ("label", IMAGE_NODE),
)
OUT_OF_SUPPORT = 6.0


class OutOfSupportWarning(UserWarning):
    """Abducted noise is far outside the standard-normal prior."""


@dataclass(frozen=True)
class CausalGraph:
    nodes: tuple = MORPHO_NODES
    edges: tuple = MORPHO_EDGES

    def __post_init__(self):
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge {a}->{b} references an unknown node")
            if a == IMAGE_NODE:
                raise ValueError("the image node cannot have outgoing edges")
        self.topological_order()

    def parents(self, node: str) -> tuple:
        return tuple(a for a, b in self.edges if b == node)

    def children(self, node: str) -> tuple:
        return tuple(b for a, b in self.edges if a == node)

    def topological_order(self) -> tuple:
        # Kahn's algorithm; ties resolved by declaration order for reproducibility
        indeg = {n: len(self.parents(n)) for n in self.nodes}
        ready = [n for n in self.nodes if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in self.children(n):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort(key=self.nodes.index)
        if len(order) != len(self.nodes):
            raise ValueError("causal graph contains a cycle")
        return tuple(order)

    def descendants(self, node: str) -> set:
        out, stack = set(), [node]
        while stack:
            for c in self.children(stack.pop()):
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out


class LocationScale(nn.Module):
    """Conditioner producing ``(loc, log_scale)`` from parent values."""

    def __init__(self, n_parents: int, hidden: int = 32):
        super().__init__()
        self.n_parents = n_parents
        if n_parents == 0:
            self.loc = nn.Parameter(torch.zeros((), dtype=torch.float64))
            self.log_scale = nn.Parameter(torch.zeros((), dtype=torch.float64))
        else:
            self.net = nn.Sequential(
                nn.Linear(n_parents, hidden),
                nn.Tanh(),
                nn.Linear(hidden, hidden),
                nn.Tanh(),
                nn.Linear(hidden, 2),
            ).to(torch.float64)

    def forward(self, parents: torch.Tensor):
        if self.n_parents == 0:
            n = parents.shape[0]
            return self.loc.expand(n), self.log_scale.expand(n)
        out = self.net(parents)
        return out[:, 0], out[:, 1]


class Mechanism(nn.Module):
    """Invertible conditional transform ``value = g(parents, noise)``.

    ``conditioner`` is any module mapping an ``(N, n_parents)`` float64 tensor
    to ``(loc, log_scale)``; the transform is strictly increasing in noise.
    """

    def __init__(self, target: str, parents: tuple, conditioner: nn.Module | None = None, hidden: int = 32):
        super().__init__()
        self.target = target
        self.parents = tuple(parents)
        self.conditioner = conditioner if conditioner is not None else LocationScale(len(self.parents), hidden)

    def forward(self, parent_values: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        loc, log_scale = self.conditioner(parent_values)
        return loc + torch.exp(log_scale) * noise

    def inverse(self, parent_values: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        loc, log_scale = self.conditioner(parent_values)
        return (values - loc) * torch.exp(-log_scale)

    def log_prob(self, parent_values: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        loc, log_scale = self.conditioner(parent_values)
        eps = (values - loc) * torch.exp(-log_scale)
        return -0.5 * eps**2 - 0.5 * math.log(2 * math.pi) - log_scale


class AttributeSCM(nn.Module):
    """Causal graph plus one mechanism per continuous attribute."""

    def __init__(self, graph: CausalGraph, mechanisms: Mapping[str, Mechanism], propagate: bool = True, hidden: int = 32):
        super().__init__()
        missing = set(CONTINUOUS) - set(mechanisms)
        if missing:
            raise ValueError(f"no mechanism for {sorted(missing)}")
        for name, mech in mechanisms.items():
            if tuple(mech.parents) != graph.parents(name):
                raise ValueError(f"mechanism for {name} has parents {mech.parents}, graph says {graph.parents(name)}")
        self.graph = graph
        self.mechanisms = nn.ModuleDict(dict(mechanisms))
        self.propagate = propagate
        self.hidden = hidden
        self.order = tuple(n for n in graph.topological_order() if n in CONTINUOUS)

    # --- array API (normalised continuous attributes, columns in CONTINUOUS order)

    def _parents_of(self, name: str, values: torch.Tensor) -> torch.Tensor:
        cols = [CONTINUOUS.index(p) for p in self.mechanisms[name].parents if p in CONTINUOUS]
        return values[:, cols]

    @torch.no_grad()
    def abduct_array(self, values: np.ndarray) -> np.ndarray:
        v = torch.as_tensor(np.atleast_2d(values), dtype=torch.float64)
        noise = torch.empty_like(v)
        for name in self.order:
            j = CONTINUOUS.index(name)
            noise[:, j] = self.mechanisms[name].inverse(self._parents_of(name, v), v[:, j])
        noise = noise.numpy()
        if not np.isfinite(noise).all():
            raise AbductionError("abduction produced non-finite noise")
        if np.abs(noise).max(initial=0.0) > OUT_OF_SUPPORT:
            warnings.warn(f"abducted noise exceeds |{OUT_OF_SUPPORT}|", OutOfSupportWarning, stacklevel=2)
        return noise

    @torch.no_grad()
    def forward_array(self, noise: np.ndarray, interventions: Mapping[str, object] | None = None) -> np.ndarray:
        """Push noise through the mechanisms in topological order.

        Intervened attributes take their target values verbatim; downstream
        attributes see the intervened values as parents.
        """
        interventions = dict(interventions or {})
        eps = torch.as_tensor(np.atleast_2d(noise), dtype=torch.float64)
        out = torch.empty_like(eps)
        for name in self.order:
            j = CONTINUOUS.index(name)
            if name in interventions:
                out[:, j] = torch.as_tensor(interventions[name], dtype=torch.float64).expand(len(out))
            else:
                out[:, j] = self.mechanisms[name](self._parents_of(name, out), eps[:, j])
        return out.numpy()

    def counterfactual_array(self, values: np.ndarray, labels, spec: Mapping[str, object]):
        """Abduction-action-prediction for a batch; returns ``(values', labels')``."""
        check_spec(spec)
        values = np.array(np.atleast_2d(values), dtype=np.float64)
        labels = np.array(labels, dtype=np.int64).reshape(-1).copy()
        if "label" in spec:
            labels[:] = np.asarray(spec["label"], dtype=np.int64)
        cont_spec = {k: v for k, v in spec.items() if k in CONTINUOUS}
        if not cont_spec:
            return values, labels
        if not self.propagate:
            out = values.copy()
            for k, v in cont_spec.items():
                out[:, CONTINUOUS.index(k)] = v
            return out, labels
        affected = set(cont_spec)
        for k in cont_spec:
            affected |= self.graph.descendants(k)
        out = self.forward_array(self.abduct_array(values), cont_spec)
        # attributes with no intervened ancestor are copied, not recomputed
        for j, name in enumerate(CONTINUOUS):
            if name not in affected:
                out[:, j] = values[:, j]
        return out, labels

    def log_likelihood(self, values: np.ndarray) -> float:
        v = torch.as_tensor(np.atleast_2d(values), dtype=torch.float64)
        with torch.no_grad():
            total = sum(
                self.mechanisms[n].log_prob(self._parents_of(n, v), v[:, CONTINUOUS.index(n)]) for n in self.order
            )
        return float(total.mean())

    def state(self) -> dict:
        return {
            "graph": {"nodes": list(self.graph.nodes), "edges": [list(e) for e in self.graph.edges]},
            "propagate": self.propagate,
            "hidden": self.hidden,
        }


def check_spec(spec: Mapping[str, object]) -> None:
    unknown = [k for k in spec if k not in CONTINUOUS and k != "label"]
    if unknown:
        raise InterventionSpecError(f"unknown attribute(s) in intervention: {unknown}")


def build_scm(graph: CausalGraph | None = None, hidden: int = 32, propagate: bool = True) -> AttributeSCM:
    graph = graph or CausalGraph()
    mechs = {name: Mechanism(name, graph.parents(name), hidden=hidden) for name in CONTINUOUS}
    return AttributeSCM(graph, mechs, propagate=propagate, hidden=hidden)


def _as_values(train) -> np.ndarray:
    if isinstance(train, np.ndarray):
        return np.asarray(train, dtype=np.float64)
    if isinstance(train, pd.DataFrame):
        return train[list(CONTINUOUS)].to_numpy(np.float64)
    return np.stack([o.attributes.continuous() if isinstance(o, Observation) else o.continuous() for o in train])


def fit_mechanisms(
    train,
    graph: CausalGraph | None = None,
    *,
    held_out=None,
    hidden: int = 32,
    lr: float = 1e-2,
    max_steps: int = 3000,
    patience: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
    propagate: bool = True,
) -> AttributeSCM:
    """Fit every mechanism by maximum conditional likelihood (full-batch Adam).

    Training stops once the negative log-likelihood has not improved by more
    than ``tol`` for ``patience`` steps. A loss that never improves on its
    initial value, goes non-finite, or a non-finite held-out likelihood raises
    :class:`TrainingError`.
    """
    torch.manual_seed(seed)
    scm = build_scm(graph, hidden=hidden, propagate=propagate)
    v = torch.as_tensor(_as_values(train), dtype=torch.float64)
    opt = torch.optim.Adam(scm.parameters(), lr=lr)
    history = []
    best, since_best = math.inf, 0
    for step in range(max_steps):
        opt.zero_grad()
        nll = -sum(
            scm.mechanisms[n].log_prob(scm._parents_of(n, v), v[:, CONTINUOUS.index(n)]).mean() for n in scm.order
        )
        if not torch.isfinite(nll):
            raise TrainingError("SCM likelihood became non-finite", {"step": step, "history": history[-10:]})
        nll.backward()
        opt.step()
        value = nll.item()
        history.append(value)
        if value < best - tol:
            best, since_best = value, 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    if not history or min(history) >= history[0]:
        raise TrainingError("SCM likelihood did not decrease", {"history": history[:10]})
    if held_out is not None:
        ll = scm.log_likelihood(_as_values(held_out))
        if not math.isfinite(ll):
            raise TrainingError("held-out log-likelihood is not finite", {"held_out_ll": ll})
    logger.info("fitted SCM in %d steps, nll %.4f", len(history), history[-1])
    scm.eval()
    return scm


# --- single-observation API


def abduct(scm: AttributeSCM, a: AttributeVector) -> dict:
    noise = scm.abduct_array(a.continuous()[None])[0]
    out = {name: float(noise[j]) for j, name in enumerate(CONTINUOUS)}
    out["label"] = int(a.label)
    return out


def predict_from_noise(scm: AttributeSCM, noise: Mapping[str, float]) -> AttributeVector:
    eps = np.array([[noise[n] for n in CONTINUOUS]], dtype=np.float64)
    return AttributeVector.from_array(scm.forward_array(eps)[0], int(noise["label"]))


def counterfactual_attributes(scm: AttributeSCM, a: AttributeVector, spec: Mapping[str, object]) -> AttributeVector:
    values, labels = scm.counterfactual_array(a.continuous()[None], [a.label], spec)
    return AttributeVector.from_array(values[0], int(labels[0]))


def sample_attributes(scm: AttributeSCM, n: int, seed: int) -> pd.DataFrame:
    """Ancestral sampling; labels drawn uniformly over the ten classes."""
    if n < 1:
        raise ValueError("sample_attributes needs n >= 1")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, len(CONTINUOUS)))
    labels = rng.integers(0, NUM_CLASSES, size=n)
    values = scm.forward_array(noise)
    table = pd.DataFrame(values, columns=list(CONTINUOUS))
    table["label"] = labels
    return table


def save_scm(scm: AttributeSCM, path) -> str:
    from .checkpoint import save_checkpoint

    return save_checkpoint(path, "scm", scm.state(), scm.state_dict())


def load_scm(path) -> AttributeSCM:
    from .checkpoint import load_checkpoint

    blob = load_checkpoint(path, "scm")
    meta = blob["meta"]
    graph = CausalGraph(tuple(meta["graph"]["nodes"]), tuple(tuple(e) for e in meta["graph"]["edges"]))
    scm = build_scm(graph, hidden=meta["hidden"], propagate=meta["propagate"])
    scm.load_state_dict(blob["state"])
    scm.eval()
    return scm
