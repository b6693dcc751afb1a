"""The explained classifier, its oracles, and the autoencoders used by IM1/IM2."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import NUM_CLASSES, stack
from .errors import TrainingError
from .nets import ConvAutoencoder, ConvClassifier
from .utils import as_image_batch, batched, seed_everything

logger = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    epochs: int = 8
    batch_size: int = 128
    lr: float = 1e-3
    channels: tuple = (16, 32, 32, 64)
    accuracy_gate: float = 0.95
    enforce_gate: bool = True

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "channels" in known:
            known["channels"] = tuple(known["channels"])
        return cls(**known)


@dataclass
class AutoencoderConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    code_dim: int = 16
    channels: tuple = (16, 32)
    seed: int = 0
    recon_gate: float = 0.08
    enforce_gate: bool = True

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "channels" in known:
            known["channels"] = tuple(known["channels"])
        return cls(**known)


class ClassifierHandle:
    """Probability-valued score function ``f`` over images.

    Calling the handle on a tensor is differentiable; use :meth:`scores` for
    numpy inference.
    """

    def __init__(self, module: ConvClassifier, seed: int, config: ClassifierConfig, meta=None):
        self.module = module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.seed = seed
        self.config = config
        self.architecture = "conv4-fc1:" + "-".join(str(c) for c in config.channels)
        self.meta = dict(meta or {})

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.module(as_image_batch(x)), dim=1)

    def logits(self, x) -> torch.Tensor:
        return self.module(as_image_batch(x))

    @torch.no_grad()
    def scores(self, x, batch_size: int = 1000) -> np.ndarray:
        x = as_image_batch(x)
        return np.concatenate([self(x[sl]).numpy() for sl in batched(len(x), batch_size)])


def argmax_scores(scores) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(np.asarray(scores), axis=-1)


def predict_class(f, x):
    """Most likely class under ``f``; ties resolve to the lowest class index.

    ``f`` is a :class:`ClassifierHandle` or any callable from an image batch
    to a score matrix. A single image returns an ``int``, a batch an array.
    """
    single = np.ndim(x) == 2 or (isinstance(x, torch.Tensor) and x.dim() == 2)
    if isinstance(f, ClassifierHandle):
        s = f.scores(x)
    else:
        with torch.no_grad():
            s = f(as_image_batch(x))
        s = s.numpy() if isinstance(s, torch.Tensor) else np.asarray(s)
    labels = argmax_scores(s)
    return int(labels[0]) if single else labels


def accuracy(f, images, labels) -> float:
    return float(np.mean(predict_class(f, as_image_batch(images)) == np.asarray(labels)))


def train_classifier(train, seed: int, config: ClassifierConfig | None = None, held_out=None) -> ClassifierHandle:
    """Train the conv classifier; enforce the held-out accuracy gate when ``held_out`` is given."""
    config = config or ClassifierConfig()
    g = seed_everything(seed)
    images, _, labels = stack(train)
    x_all = torch.from_numpy(images)[:, None]
    y_all = torch.from_numpy(labels)
    model = ConvClassifier(config.channels)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history = []
    n = len(x_all)
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for sl in batched(n, config.batch_size):
            idx = perm[sl]
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError("classifier loss became non-finite", {"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
    handle = ClassifierHandle(model, seed, config, {"history": history})
    if held_out is not None:
        h_images, _, h_labels = stack(held_out)
        acc = accuracy(handle, h_images, h_labels)
        handle.meta["gates"] = {"accuracy": acc, "threshold": config.accuracy_gate, "passed": acc >= config.accuracy_gate}
        logger.info("classifier seed %d held-out accuracy %.4f", seed, acc)
        if config.enforce_gate and acc < config.accuracy_gate:
            raise TrainingError(f"held-out accuracy {acc:.4f} below gate {config.accuracy_gate}", handle.meta)
    return handle


@dataclass
class OracleSet:
    handles: list

    @property
    def seeds(self):
        return [h.seed for h in self.handles]

    def __len__(self):
        return len(self.handles)

    def __iter__(self):
        return iter(self.handles)

    def __getitem__(self, k):
        return self.handles[k]


def train_oracles(train, n: int, base_seed: int, config: ClassifierConfig | None = None, held_out=None) -> OracleSet:
    """``n`` classifiers identical to the explained one except for their seeds ``base_seed + k``."""
    if n < 1:
        raise ValueError("need at least one oracle")
    return OracleSet([train_classifier(train, base_seed + k, config, held_out) for k in range(n)])


# ---------------------------------------------------------------------------
# autoencoders for IM1 / IM2


class AutoencoderHandle:
    def __init__(self, module: ConvAutoencoder, name: str, meta=None):
        self.module = module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.name = name
        self.meta = dict(meta or {})

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(as_image_batch(x))

    @torch.no_grad()
    def reconstruct(self, x, batch_size: int = 1000) -> np.ndarray:
        x = as_image_batch(x)
        return np.concatenate([self(x[sl])[:, 0].numpy() for sl in batched(len(x), batch_size)])


@dataclass
class ClassAutoencoders:
    per_class: list  # AE_p for p = 0..9
    global_ae: AutoencoderHandle

    def __getitem__(self, p: int) -> AutoencoderHandle:
        return self.per_class[p]


def _fit_autoencoder(images: np.ndarray, config: AutoencoderConfig, seed: int, name: str) -> AutoencoderHandle:
    g = seed_everything(seed)
    x_all = torch.from_numpy(images.astype(np.float32))[:, None]
    model = ConvAutoencoder(config.code_dim, config.channels)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history = []
    n = len(x_all)
    for _ in range(config.epochs):
        model.train()
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for sl in batched(n, config.batch_size):
            xb = x_all[perm[sl]]
            loss = F.mse_loss(model(xb), xb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(xb)
        history.append(total / n)
    return AutoencoderHandle(model, name, {"history": history})


def train_autoencoders(train, config: AutoencoderConfig | None = None, held_out=None) -> ClassAutoencoders:
    """Ten class-specific autoencoders ``AE_p`` plus one global ``AE``.

    ``AE_p`` sees only class-``p`` training images. With ``held_out``, each
    model's mean L1 reconstruction on its own distribution is gated.
    """
    config = config or AutoencoderConfig()
    images, _, labels = stack(train)
    per_class = []
    for p in range(NUM_CLASSES):
        ae = _fit_autoencoder(images[labels == p], config, config.seed + 1 + p, f"ae_{p}")
        per_class.append(ae)
    global_ae = _fit_autoencoder(images, config, config.seed, "ae_global")
    out = ClassAutoencoders(per_class, global_ae)
    if held_out is not None:
        h_images, _, h_labels = stack(held_out)
        failures = {}
        checks = [(ae, h_images[h_labels == p]) for p, ae in enumerate(per_class)] + [(global_ae, h_images)]
        for ae, imgs in checks:
            if len(imgs) == 0:
                continue
            err = float(np.abs(ae.reconstruct(imgs) - imgs).mean())
            ae.meta["gates"] = {"recon_l1": err, "threshold": config.recon_gate, "passed": err <= config.recon_gate}
            if err > config.recon_gate:
                failures[ae.name] = err
        if config.enforce_gate and failures:
            raise TrainingError(f"autoencoder reconstruction gate failed: {failures}", failures)
    return out


# ---------------------------------------------------------------------------
# persistence


def save_classifier(handle: ClassifierHandle, path) -> str:
    from .checkpoint import save_checkpoint

    cfg = asdict(handle.config)
    cfg["channels"] = list(cfg["channels"])
    meta = {"seed": handle.seed, "architecture": handle.architecture, "config": cfg, "info": handle.meta}
    return save_checkpoint(path, "classifier", meta, handle.module.state_dict())


def load_classifier(path) -> ClassifierHandle:
    from .checkpoint import load_checkpoint

    blob = load_checkpoint(path, "classifier")
    config = ClassifierConfig.from_dict(blob["meta"]["config"])
    module = ConvClassifier(config.channels)
    module.load_state_dict(blob["state"])
    return ClassifierHandle(module, blob["meta"]["seed"], config, blob["meta"].get("info"))


def save_autoencoder(ae: AutoencoderHandle, config: AutoencoderConfig, path) -> str:
    from .checkpoint import save_checkpoint

    cfg = asdict(config)
    cfg["channels"] = list(cfg["channels"])
    return save_checkpoint(path, "autoencoder", {"name": ae.name, "config": cfg, "info": ae.meta}, ae.module.state_dict())


def load_autoencoder(path) -> AutoencoderHandle:
    from .checkpoint import load_checkpoint

    blob = load_checkpoint(path, "autoencoder")
    config = AutoencoderConfig.from_dict(blob["meta"]["config"])
    module = ConvAutoencoder(config.code_dim, config.channels)
    module.load_state_dict(blob["state"])
    return AutoencoderHandle(module, blob["meta"]["name"], blob["meta"].get("info"))
