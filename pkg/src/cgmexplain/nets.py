"""Network architectures for generative models, classifiers and metric autoencoders."""
from __future__ import annotations

import torch
from torch import nn

N_CONT = 3
N_CLASSES = 10

DEFAULT_CHANNELS = (32, 32, 64, 64, 128)


class ConvEncoder(nn.Module):
    """Five convolutions 28x28 -> 1x1, then a head conditioned on attributes and label."""

    def __init__(self, out_dim: int, channels=DEFAULT_CHANNELS, hidden: int = 256):
        super().__init__()
        c = tuple(channels)
        self.features = nn.Sequential(
            nn.Conv2d(1, c[0], 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c[0], c[1], 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c[1], c[2], 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c[2], c[3], 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c[3], c[4], 7, 1, 0),
            nn.LeakyReLU(0.2),
            nn.Flatten(),
        )
        self.head = nn.Sequential(
            nn.Linear(c[4] + N_CONT + N_CLASSES, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x, cont, label_onehot):
        return self.head(torch.cat([self.features(x), cont, label_onehot], dim=1))


class ConvGenerator(nn.Module):
    """Five transposed convolutions 1x1 -> 28x28 from ``[z, attributes, label embedding]``."""

    def __init__(self, d_z: int, d_e: int, channels=DEFAULT_CHANNELS):
        super().__init__()
        c = tuple(channels)
        self.d_z, self.d_e = d_z, d_e
        self.embedding = nn.Embedding(N_CLASSES, d_e)
        self.net = nn.Sequential(
            nn.ConvTranspose2d(d_z + N_CONT + d_e, c[4], 7, 1, 0),
            nn.ReLU(),
            nn.ConvTranspose2d(c[4], c[3], 3, 1, 1),
            nn.ReLU(),
            nn.ConvTranspose2d(c[3], c[2], 4, 2, 1),
            nn.ReLU(),
            nn.ConvTranspose2d(c[2], c[1], 3, 1, 1),
            nn.ReLU(),
            nn.ConvTranspose2d(c[1], 1, 4, 2, 1),
            nn.Sigmoid(),
        )

    def forward(self, z, cont, embedding):
        h = torch.cat([z, cont, embedding], dim=1)
        return self.net(h[:, :, None, None])


class JointDiscriminator(nn.Module):
    """Scores (image, latent, attributes, label) tuples as real encodings or fake generations.

    Every weight layer is spectrally normalised; without it the latent branch
    separates encoder outputs from prior samples almost immediately and the
    adversarial loss diverges.
    """

    def __init__(self, d_z: int, hidden: int = 512, dropout: float = 0.2):
        super().__init__()
        sn = nn.utils.parametrizations.spectral_norm
        self.image = nn.Sequential(
            sn(nn.Conv2d(1, 32, 4, 2, 1)),
            nn.LeakyReLU(0.2),
            sn(nn.Conv2d(32, 64, 4, 2, 1)),
            nn.LeakyReLU(0.2),
            nn.Flatten(),
        )
        self.latent = nn.Sequential(sn(nn.Linear(d_z, 256)), nn.LeakyReLU(0.2))
        self.joint = nn.Sequential(
            nn.Dropout(dropout),
            sn(nn.Linear(64 * 7 * 7 + 256 + N_CONT + N_CLASSES, hidden)),
            nn.LeakyReLU(0.2),
            nn.Dropout(dropout),
            sn(nn.Linear(hidden, 1)),
        )

        self.label_head = sn(nn.Linear(64 * 7 * 7, N_CLASSES))

    def forward(self, x, z, cont, label_onehot):
        h = torch.cat([self.image(x), self.latent(z), cont, label_onehot], dim=1)
        return self.joint(h).squeeze(1)

    def classify(self, x):
        """Auxiliary digit-label logits from the image branch alone."""
        return self.label_head(self.image(x))


class LatentLabelCritic(nn.Module):
    """Predicts the digit label from a style latent; the encoder is trained to defeat it."""

    def __init__(self, d_z: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_z, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, N_CLASSES))

    def forward(self, z):
        return self.net(z)


class ConvClassifier(nn.Module):
    """Four convolutions and a single fully-connected layer; returns logits."""

    def __init__(self, channels=(16, 32, 32, 64)):
        super().__init__()
        c = tuple(channels)
        self.features = nn.Sequential(
            nn.Conv2d(1, c[0], 3, 1, 1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c[0], c[1], 3, 1, 1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c[1], c[2], 3, 1, 1),
            nn.ReLU(),
            nn.Conv2d(c[2], c[3], 3, 1, 1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
        )
        self.fc = nn.Linear(c[3] * 3 * 3, N_CLASSES)

    def forward(self, x):
        return self.fc(self.features(x))


class ConvAutoencoder(nn.Module):
    """Encoder and decoder each with two convolutional stages and one dense layer."""

    def __init__(self, code_dim: int = 16, channels=(16, 32)):
        super().__init__()
        c0, c1 = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c0, 4, 2, 1),
            nn.ReLU(),
            nn.Conv2d(c0, c1, 4, 2, 1),
            nn.ReLU(),
            nn.Flatten(),
            nn.Linear(c1 * 7 * 7, code_dim),
        )
        self.decoder = nn.Sequential(
            nn.Linear(code_dim, c1 * 7 * 7),
            nn.ReLU(),
            nn.Unflatten(1, (c1, 7, 7)),
            nn.ConvTranspose2d(c1, c0, 4, 2, 1),
            nn.ReLU(),
            nn.ConvTranspose2d(c0, 1, 4, 2, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return self.decoder(self.encoder(x))
