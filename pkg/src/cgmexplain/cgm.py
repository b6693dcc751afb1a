"""Causal generative image models: a conditional VAE and a conditional BiGAN.

Both expose the same handle. ``encode`` recovers the style latent of an
observed ``(image, attributes)`` pair and ``generate`` renders a latent
under (possibly counterfactual) attributes, so that

    counterfactual_image(x, a, a') = generate(encode(x, a), a').

Continuous attributes are fed to the generator directly; the digit label
goes through a learned 10-row embedding table. Because the generator accepts
any vector in place of a table row, label mixtures can be rendered with
:func:`expected_embedding` and :func:`interpolated_embedding`.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import NUM_CLASSES, AttributeVector, stack
from .errors import DistributionError, ShapeError, TrainingError
from .nets import DEFAULT_CHANNELS, ConvEncoder, ConvGenerator, JointDiscriminator, LatentLabelCritic
from .utils import as_image_batch, batched, one_hot, seed_everything

logger = logging.getLogger(__name__)

VARIATIONAL = "variational"
ADVERSARIAL = "adversarial"


class ModeCollapseWarning(UserWarning):
    pass


@dataclass
class CGMConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    d_z: int = 64
    d_e: int = 16
    seed: int = 0
    channels: tuple = DEFAULT_CHANNELS
    # variational model
    beta: float = 1.0
    # adversarial model
    lr_disc: float = 2e-4
    recon_weight: float = 50.0
    latent_weight: float = 1.0
    label_adv_weight: float = 1.0
    aux_weight: float = 1.0
    # quality gate on held-out identity-intervention reconstructions
    recon_gate: float = 0.05
    enforce_gate: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "CGMConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "channels" in known:
            known["channels"] = tuple(known["channels"])
        return cls(**known)


@dataclass(frozen=True)
class LabelEmbedding:
    weight: np.ndarray  # (10, d_e) float64

    def __call__(self, k: int) -> np.ndarray:
        return self.weight[int(k)].copy()

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


class CGMHandle:
    """A trained encoder/generator pair with its label embedding."""

    def __init__(self, kind: str, encoder: ConvEncoder, generator: ConvGenerator, config: CGMConfig, meta=None):
        self.kind = kind
        self.encoder = encoder.eval()
        self.generator = generator.eval()
        self.config = config
        self.d_z = config.d_z
        self.d_e = config.d_e
        self.meta = dict(meta or {})
        for p in list(encoder.parameters()) + list(generator.parameters()):
            p.requires_grad_(False)

    @property
    def label_embedding(self) -> LabelEmbedding:
        return LabelEmbedding(self.generator.embedding.weight.detach().to(torch.float64).numpy().copy())

    @property
    def embedding_table(self) -> torch.Tensor:
        return self.generator.embedding.weight

    def encode_batch(self, x, cont, labels) -> torch.Tensor:
        x = as_image_batch(x)
        cont = torch.as_tensor(cont, dtype=torch.float32).reshape(len(x), -1)
        out = self.encoder(x, cont, one_hot(labels).reshape(len(x), -1))
        # the variational head emits (mean, log-variance); inference uses the mean
        return out[:, : self.d_z]

    def generate_batch(self, z, cont, labels=None, embedding=None) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=torch.float32)
        if z.dim() == 1:
            z = z[None]
        if z.shape[1] != self.d_z:
            raise ShapeError(f"latent has dimension {z.shape[1]}, model expects {self.d_z}")
        cont = torch.as_tensor(cont, dtype=torch.float32).reshape(len(z), -1)
        if embedding is None:
            if labels is None:
                raise ValueError("pass either labels or an embedding")
            embedding = self.generator.embedding(torch.as_tensor(labels, dtype=torch.long).reshape(-1))
        else:
            embedding = torch.as_tensor(embedding, dtype=torch.float32)
            if embedding.dim() == 1:
                embedding = embedding[None]
            if embedding.shape[1] != self.d_e:
                raise ShapeError(f"embedding has dimension {embedding.shape[1]}, model expects {self.d_e}")
            embedding = embedding.expand(len(z), -1)
        return self.generator(z, cont, embedding)

    @torch.no_grad()
    def reconstruct(self, images, cont, labels, batch_size: int = 500) -> np.ndarray:
        out = []
        for sl in batched(len(images), batch_size):
            z = self.encode_batch(images[sl], cont[sl], labels[sl])
            out.append(self.generate_batch(z, cont[sl], labels[sl])[:, 0].numpy())
        return np.concatenate(out)

    def reconstruction_error(self, images, cont, labels) -> float:
        rec = self.reconstruct(images, cont, labels)
        return float(np.abs(rec - np.asarray(images).reshape(rec.shape)).mean())


# ---------------------------------------------------------------------------
# public single-instance API


def encode(model: CGMHandle, x, a: AttributeVector) -> np.ndarray:
    with torch.no_grad():
        return model.encode_batch(x, a.continuous()[None], [a.label])[0].numpy()


def generate(model: CGMHandle, z, a: AttributeVector, embedding=None) -> np.ndarray:
    """Render latent ``z`` under normalised attributes ``a``.

    ``embedding`` (length ``d_e``) replaces the table row ``e(a.label)``.
    """
    with torch.no_grad():
        img = model.generate_batch(z, a.continuous()[None], [a.label], embedding=embedding)
    return img[0, 0].numpy()


def counterfactual_image(model: CGMHandle, x, a: AttributeVector, a_cf: AttributeVector, embedding=None) -> np.ndarray:
    return generate(model, encode(model, x, a), a_cf, embedding=embedding)


def check_distribution(p, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != NUM_CLASSES:
        raise DistributionError(f"label distribution must have {NUM_CLASSES} entries")
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise DistributionError("label distribution must be nonnegative and sum to 1")
    return p


def expected_embedding(emb: LabelEmbedding, p) -> np.ndarray:
    """Sum over classes of ``p_k * e(k)``."""
    return check_distribution(p) @ emb.weight


def interpolated_embedding(emb: LabelEmbedding, y: int, y_t: int, alpha: float) -> np.ndarray:
    """``alpha * e(y_t) + (1 - alpha) * e(y)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * emb.weight[int(y_t)] + (1.0 - alpha) * emb.weight[int(y)]


# ---------------------------------------------------------------------------
# training


def _tensors(observations):
    images, cont, labels = stack(observations)
    return (
        torch.from_numpy(images)[:, None],
        torch.from_numpy(cont.astype(np.float32)),
        torch.from_numpy(labels),
    )


def _gate(handle: CGMHandle, held_out, config: CGMConfig):
    if held_out is None:
        return
    images, cont, labels = stack(held_out)
    err = handle.reconstruction_error(images, cont, labels)
    handle.meta["gates"] = {"recon_l1": err, "threshold": config.recon_gate, "passed": err <= config.recon_gate}
    logger.info("%s held-out reconstruction L1 %.4f", handle.kind, err)
    if config.enforce_gate and err > config.recon_gate:
        raise TrainingError(
            f"{handle.kind} reconstruction L1 {err:.4f} exceeds gate {config.recon_gate}", handle.meta
        )


def train_vae(train, config: CGMConfig | None = None, held_out=None) -> CGMHandle:
    """Fit a conditional VAE by maximising the evidence lower bound.

    ``train`` and ``held_out`` are observations with normalised attributes.
    """
    config = config or CGMConfig()
    g = seed_everything(config.seed)
    x_all, c_all, y_all = _tensors(train)
    enc = ConvEncoder(2 * config.d_z, config.channels)
    gen = ConvGenerator(config.d_z, config.d_e, config.channels)
    opt = torch.optim.Adam(list(enc.parameters()) + list(gen.parameters()), lr=config.lr)
    history = []
    n = len(x_all)
    for epoch in range(config.epochs):
        enc.train(), gen.train()
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for sl in batched(n, config.batch_size):
            idx = perm[sl]
            x, c, y = x_all[idx], c_all[idx], y_all[idx]
            h = enc(x, c, one_hot(y))
            mu, logvar = h[:, : config.d_z], h[:, config.d_z :].clamp(-10, 10)
            z = mu + torch.exp(0.5 * logvar) * torch.randn(mu.shape, generator=g)
            x_hat = gen(z, c, gen.embedding(y))
            rec = F.binary_cross_entropy(x_hat, x, reduction="sum") / len(x)
            kl = 0.5 * torch.sum(mu**2 + logvar.exp() - 1.0 - logvar) / len(x)
            loss = rec + config.beta * kl
            if not torch.isfinite(loss):
                raise TrainingError("VAE loss became non-finite", {"epoch": epoch, "history": history})
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
        history.append(total / n)
        logger.info("vae epoch %d loss %.3f", epoch, history[-1])
    if len(history) > 1 and history[-1] >= history[0]:
        raise TrainingError("VAE evidence bound did not improve", {"history": history})
    handle = CGMHandle(VARIATIONAL, enc, gen, config, {"history": history})
    _gate(handle, held_out, config)
    return handle


def train_bigan(train, config: CGMConfig | None = None, held_out=None) -> CGMHandle:
    """Fit a conditional BiGAN with a joint (image, latent, attributes) discriminator.

    Besides the adversarial game, the encoder/generator pair minimises an
    image reconstruction term ``|G(E(x,a),a) - x|`` and a latent cycle term
    ``|E(G(z,a),a) - z|^2``; without them BiGAN inversions are too loose for
    style-preserving counterfactuals. The reconstruction term alone lets the
    encoder smuggle digit identity into ``z`` so the generator ignores label
    interventions. Two terms counter that: a small critic predicts the label
    from ``E(x,a)`` and the encoder is pushed towards a uniform critic output,
    and an auxiliary label head on the discriminator's image branch (fit on
    real digits) must recognise ``y'`` in label-swapped reconstructions
    ``G(E(x,a), y')``, whose latents are also cycled back to ``E(x,a)``.
    """
    config = config or CGMConfig(lr=2e-4)
    g = seed_everything(config.seed)
    x_all, c_all, y_all = _tensors(train)
    enc = ConvEncoder(config.d_z, config.channels)
    gen = ConvGenerator(config.d_z, config.d_e, config.channels)
    disc = JointDiscriminator(config.d_z)
    critic = LatentLabelCritic(config.d_z)
    opt_eg = torch.optim.Adam(list(enc.parameters()) + list(gen.parameters()), lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(list(disc.parameters()) + list(critic.parameters()), lr=config.lr_disc, betas=(0.5, 0.999))
    history = []
    n = len(x_all)
    for epoch in range(config.epochs):
        enc.train(), gen.train(), disc.train()
        perm = torch.randperm(n, generator=g)
        sums = np.zeros(6)
        for sl in batched(n, config.batch_size):
            idx = perm[sl]
            x, c, y = x_all[idx], c_all[idx], y_all[idx]
            oh = one_hot(y)
            z_fake = torch.randn((len(x), config.d_z), generator=g)
            z_real = enc(x, c, oh)
            x_fake = gen(z_fake, c, gen.embedding(y))

            d_real = disc(x, z_real.detach(), c, oh)
            d_fake = disc(x_fake.detach(), z_fake, c, oh)
            loss_d = F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real)) + F.binary_cross_entropy_with_logits(
                d_fake, torch.zeros_like(d_fake)
            )
            loss_d = loss_d + F.cross_entropy(critic(z_real.detach()), y) + config.aux_weight * F.cross_entropy(disc.classify(x), y)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            d_real = disc(x, z_real, c, oh)
            d_fake = disc(x_fake, z_fake, c, oh)
            loss_adv = F.binary_cross_entropy_with_logits(d_real, torch.zeros_like(d_real)) + F.binary_cross_entropy_with_logits(
                d_fake, torch.ones_like(d_fake)
            )
            rec = (gen(z_real, c, gen.embedding(y)) - x).abs().mean()
            lat = ((enc(x_fake, c, oh) - z_fake) ** 2).mean()
            # cross-entropy of the critic against the uniform label distribution
            leak = -F.log_softmax(critic(z_real), dim=1).mean()
            y_swap = (y + torch.randint(1, NUM_CLASSES, y.shape, generator=g)) % NUM_CLASSES
            x_swap = gen(z_real, c, gen.embedding(y_swap))
            aux = F.cross_entropy(disc.classify(x_swap), y_swap) + F.cross_entropy(disc.classify(x_fake), y)
            lat = lat + ((enc(x_swap, c, one_hot(y_swap)) - z_real.detach()) ** 2).mean()
            loss_eg = (
                loss_adv
                + config.recon_weight * rec
                + config.latent_weight * lat
                + config.label_adv_weight * leak
                + config.aux_weight * aux
            )
            if not (torch.isfinite(loss_d) and torch.isfinite(loss_eg)):
                raise TrainingError("BiGAN loss became non-finite", {"epoch": epoch, "history": history})
            opt_eg.zero_grad()
            loss_eg.backward()
            opt_eg.step()
            sums += np.array([loss_d.item(), loss_adv.item(), rec.item(), lat.item(), leak.item(), aux.item()]) * len(x)
        history.append(dict(zip(("disc", "adv", "recon", "latent", "label_leak", "aux"), (sums / n).tolist())))
        logger.info("bigan epoch %d %s", epoch, history[-1])

    meta = {"history": history}
    disc.eval(), gen.eval(), enc.eval()
    probe = held_out if held_out is not None else train[: min(len(train), 500)]
    with torch.no_grad():
        x, c, y = _tensors(probe)
        oh = one_hot(y)
        z_fake = torch.randn((len(x), config.d_z), generator=g)
        x_fake = gen(z_fake, c, gen.embedding(y))
        real_ok = (disc(x, enc(x, c, oh), c, oh) > 0).float()
        fake_ok = (disc(x_fake, z_fake, c, oh) < 0).float()
        meta["disc_accuracy"] = float(torch.cat([real_ok, fake_ok]).mean())
        meta["critic_accuracy"] = float((critic(enc(x, c, oh)).argmax(1) == y).float().mean())
        variance = float(x_fake.var(dim=0).mean())
        meta["generated_pixel_variance"] = variance
    if variance < 1e-4:
        warnings.warn(f"possible mode collapse: generated pixel variance {variance:.2e}", ModeCollapseWarning)
    handle = CGMHandle(ADVERSARIAL, enc, gen, config, meta)
    _gate(handle, held_out, config)
    return handle


# ---------------------------------------------------------------------------
# persistence


def save_cgm(handle: CGMHandle, path) -> str:
    from .checkpoint import save_checkpoint

    cfg = asdict(handle.config)
    cfg["channels"] = list(cfg["channels"])
    meta = {"kind": handle.kind, "d_z": handle.d_z, "d_e": handle.d_e, "config": cfg, "info": handle.meta}
    state = {"encoder": handle.encoder.state_dict(), "generator": handle.generator.state_dict()}
    return save_checkpoint(path, "cgm", meta, state)


def load_cgm(path) -> CGMHandle:
    from .checkpoint import load_checkpoint

    blob = load_checkpoint(path, "cgm")
    meta = blob["meta"]
    config = CGMConfig.from_dict(meta["config"])
    out_dim = 2 * config.d_z if meta["kind"] == VARIATIONAL else config.d_z
    enc = ConvEncoder(out_dim, config.channels)
    gen = ConvGenerator(config.d_z, config.d_e, config.channels)
    enc.load_state_dict(blob["state"]["encoder"])
    gen.load_state_dict(blob["state"]["generator"])
    return CGMHandle(meta["kind"], enc, gen, config, meta.get("info"))
