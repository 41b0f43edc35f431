"""3D convolutional VAE for cine sequences and the population anatomical template.

Spatial resolution drops 8x (96 -> 12) through three stride-2 stages; the
50-frame time axis is never downsampled. Temporal (3,1,1) convolutions at
the bottleneck mix neighbouring frames.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, ShapeError
from .phantom import FRAME_SIZE, N_FRAMES, PhantomDataset

log = logging.getLogger(__name__)

LATENT_SIZE = FRAME_SIZE // 8


@dataclass
class VaeConfig:
    latent_channels: int = 4
    channels: tuple = (16, 32, 32)
    kl_weight: float = 1e-4
    lr: float = 2e-3
    weight_decay: float = 0.0
    batch_size: int = 4
    epochs: int = 30
    clip_frames: int = 0  # train on random clips of this many frames; 0 = whole sequence
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if not 0 <= self.clip_frames <= N_FRAMES:
            raise ValueError(f"clip_frames must be in [0, {N_FRAMES}], got {self.clip_frames}")


@dataclass
class LatentVolume:
    """Posterior over latents, each ``(B, C, 50, 12, 12)``."""

    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor


def _down(cin, cout):
    return nn.Conv3d(cin, cout, (1, 4, 4), stride=(1, 2, 2), padding=(0, 1, 1))


def _up(cin, cout):
    return nn.ConvTranspose3d(cin, cout, (1, 4, 4), stride=(1, 2, 2), padding=(0, 1, 1))


def _temporal(cin, cout):
    return nn.Conv3d(cin, cout, (3, 1, 1), padding=(1, 0, 0))


class CineVae(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        lc = cfg.latent_channels
        self.encoder = nn.Sequential(
            _down(1, c1), nn.SiLU(),
            _down(c1, c2), nn.SiLU(),
            _down(c2, c3), nn.SiLU(),
            _temporal(c3, c3), nn.SiLU(),
            nn.Conv3d(c3, 2 * lc, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv3d(lc, c3, (1, 3, 3), padding=(0, 1, 1)), nn.SiLU(),
            _temporal(c3, c3), nn.SiLU(),
            _up(c3, c2), nn.SiLU(),
            _up(c2, c1), nn.SiLU(),
            _up(c1, c1), nn.SiLU(),
            nn.Conv3d(c1, 1, (1, 3, 3), padding=(0, 1, 1)),
        )

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar.clamp(-30.0, 20.0)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))


def _check_cine(x: torch.Tensor) -> torch.Tensor:
    """Accepts whole sequences or training clips: ``(B, 1, T, 96, 96)``."""
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[3:]) != (FRAME_SIZE, FRAME_SIZE) \
            or not 1 <= x.shape[2] <= N_FRAMES:
        raise ShapeError(f"cine must be (B, 1, T<={N_FRAMES}, {FRAME_SIZE}, {FRAME_SIZE}), got {tuple(x.shape)}")
    return x


def random_clips(cines: torch.Tensor, length: int, generator: torch.Generator) -> torch.Tensor:
    """One random ``length``-frame window per sequence."""
    if length in (0, cines.shape[2]):
        return cines
    starts = torch.randint(0, cines.shape[2] - length + 1, (cines.shape[0],), generator=generator)
    return torch.stack([c[:, s:s + length] for c, s in zip(cines, starts.tolist())])


def encode(vae: CineVae, cine: torch.Tensor, generator: torch.Generator | None = None) -> LatentVolume:
    mu, logvar = vae.posterior(_check_cine(cine))
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return LatentVolume(mu, logvar, mu + torch.exp(0.5 * logvar) * eps)


def decode(vae: CineVae, z: torch.Tensor) -> torch.Tensor:
    expected = (vae.cfg.latent_channels, N_FRAMES, LATENT_SIZE, LATENT_SIZE)
    if z.ndim == 4:
        z = z[None]
    if tuple(z.shape[1:]) != expected:
        raise ShapeError(f"latent must be (B, {', '.join(map(str, expected))}), got {tuple(z.shape)}")
    return vae(z)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)), averaged over elements."""
    return 0.5 * (mu ** 2 + torch.expm1(logvar) - logvar).mean()  # expm1 avoids cancellation near 0


def vae_loss(vae: CineVae, cine: torch.Tensor, kl_weight: float,
             generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    """Pixel MSE plus ``kl_weight`` times the per-element KL.

    With ``kl_weight == 0`` the model runs as a plain autoencoder on the
    posterior mean and the KL term is left out of the total.
    """
    cine = _check_cine(cine)
    post = encode(vae, cine, generator)
    if kl_weight == 0:
        recon = vae(post.mu)
        rec = F.mse_loss(recon, cine)
        return {"rec": rec, "total": rec}
    recon = vae(post.z)
    rec = F.mse_loss(recon, cine)
    kl = kl_divergence(post.mu, post.logvar)
    return {"rec": rec, "kl": kl, "total": rec + kl_weight * kl}


def _cine_tensor(dataset: PhantomDataset, split: str, limit: int | None = None) -> torch.Tensor:
    cines = dataset.stack(split, "cine", limit)
    if cines.size == 0:
        raise DataError(f"split {split!r} is empty")
    return torch.from_numpy(cines)


def train_vae(dataset: PhantomDataset, cfg: VaeConfig, checkpoint: str | None = None,
              progress=None) -> tuple[CineVae, dict]:
    torch.manual_seed(cfg.seed)
    cines = _cine_tensor(dataset, "train")
    vae = CineVae(cfg)
    opt = torch.optim.AdamW(vae.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_gen = torch.Generator().manual_seed(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    n = cines.shape[0]
    history = {"total": [], "rec": [], "kl": []}
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=order_gen)
        sums = {"total": 0.0, "rec": 0.0, "kl": 0.0}
        vae.train()
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            batch = random_clips(cines[idx], cfg.clip_frames, order_gen)
            losses = vae_loss(vae, batch, cfg.kl_weight, noise_gen)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            for k, v in losses.items():
                sums[k] += float(v.detach()) * len(idx)
        for k in history:
            if k != "kl" or cfg.kl_weight != 0:
                history[k].append(sums[k] / n)
        log.info("vae epoch %d/%d rec %.5f", epoch + 1, cfg.epochs, history["rec"][-1])
        if progress:
            progress(epoch, history)
    vae.eval()
    if checkpoint:
        save_vae(checkpoint, vae, history)
    return vae, history


@torch.no_grad()
def posterior_means(vae: CineVae, cines: Iterable, batch: int = 8) -> torch.Tensor:
    """Posterior means for an iterable of ``(1, 50, 96, 96)`` arrays."""
    out, buf = [], []
    for c in cines:
        buf.append(torch.as_tensor(np.asarray(c)))
        if len(buf) == batch:
            out.append(vae.posterior(torch.stack(buf))[0])
            buf = []
    if buf:
        out.append(vae.posterior(torch.stack(buf))[0])
    if not out:
        raise DataError("no sequences to encode")
    return torch.cat(out)


def compute_template(vae: CineVae, cines: Iterable) -> torch.Tensor:
    """Element-wise mean of posterior means, ``(C, 50, 12, 12)``.

    Means are sorted along the subject axis before summation so the result
    is bit-identical under any ordering of the split.
    """
    mu = posterior_means(vae, cines).numpy().astype(np.float64)
    mu = np.sort(mu, axis=0)
    return torch.from_numpy(mu.sum(axis=0) / mu.shape[0]).float()


@torch.no_grad()
def reconstruction_mse(vae: CineVae, cines: Iterable, batch: int = 8) -> float:
    errs = []
    for c in cines:
        x = torch.as_tensor(np.asarray(c))[None]
        errs.append(float(F.mse_loss(vae(vae.posterior(x)[0]), x)))
    return float(np.mean(errs))


def save_vae(stem, vae: CineVae, history: dict | None = None, template: torch.Tensor | None = None):
    extra = {"template": template.numpy()} if template is not None else None
    return save_checkpoint(stem, vae, "vae", asdict(vae.cfg), history, extra)


def load_vae(stem) -> tuple[CineVae, dict]:
    state, meta, _ = load_checkpoint(stem, "vae")
    vae = CineVae(VaeConfig(**meta["config"]))
    vae.load_state_dict(state)
    vae.eval()
    return vae, meta
