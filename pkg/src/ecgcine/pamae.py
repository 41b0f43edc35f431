"""Phase-aware masked autoencoder for 12-lead ECG.

A ViT-style encoder over 8-sample patches is trained on two objectives at
once: masked-patch reconstruction through a light decoder, and per-token
cardiac-phase prediction from the *unmasked* encoder features.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import AlignmentError, DataError, ShapeError
from .nn import Block, lr_schedule, sincos_table
from .phantom import N_LEADS, N_SAMPLES, PhantomDataset
from .phase import PhaseSequence, angular_error, detect_r_peaks, phase_loss, token_phase_labels

log = logging.getLogger(__name__)


@dataclass
class PaMaeConfig:
    patch: int = 8
    width: int = 64
    depth: int = 4
    heads: int = 4
    dec_width: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    phase_hidden: int = 64
    mask_ratio: float = 0.5
    loss_on_all_patches: bool = False
    rec_weight: float = 1.0
    phase_weight: float = 1.0
    use_phase_head: bool = True
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    rope: bool = True
    schedule: str = "constant"
    warmup_steps: int = 0
    seed: int = 0

    @property
    def n_tokens(self) -> int:
        return N_SAMPLES // self.patch

    @property
    def n_masked(self) -> int:
        return math.ceil(self.mask_ratio * self.n_tokens)


def patchify(signal: torch.Tensor, patch: int = 8) -> torch.Tensor:
    """``(B, 12, 5000)`` -> ``(B, 625, 12*patch)``; a patch is all leads over ``patch`` samples."""
    if signal.ndim == 2:
        return patchify(signal[None], patch)[0]
    b, leads, n = signal.shape
    if leads != N_LEADS or n != N_SAMPLES:
        raise ShapeError(f"expected (B, {N_LEADS}, {N_SAMPLES}), got {tuple(signal.shape)}")
    return signal.reshape(b, leads, n // patch, patch).permute(0, 2, 1, 3).reshape(b, n // patch, leads * patch)


def unpatchify(tokens: torch.Tensor, patch: int = 8) -> torch.Tensor:
    if tokens.ndim == 2:
        return unpatchify(tokens[None], patch)[0]
    b, t, d = tokens.shape
    if d != N_LEADS * patch or t * patch != N_SAMPLES:
        raise ShapeError(f"token shape {tuple(tokens.shape)} does not match patch {patch}")
    return tokens.reshape(b, t, N_LEADS, patch).permute(0, 2, 1, 3).reshape(b, N_LEADS, t * patch)


def random_mask(batch: int, n_tokens: int, n_masked: int, generator: torch.Generator) -> torch.Tensor:
    """Indices of masked tokens, ``(B, n_masked)``, uniform without replacement."""
    noise = torch.rand(batch, n_tokens, generator=generator)
    return torch.argsort(noise, dim=1)[:, :n_masked]


class PaMae(nn.Module):
    def __init__(self, cfg: PaMaeConfig):
        super().__init__()
        self.cfg = cfg
        d_in = N_LEADS * cfg.patch
        self.embed = nn.Linear(d_in, cfg.width)
        self.register_buffer("pos", sincos_table(cfg.n_tokens, cfg.width), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)

        self.dec_embed = nn.Linear(cfg.width, cfg.dec_width)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dec_width))
        self.register_buffer("dec_pos", sincos_table(cfg.n_tokens, cfg.dec_width), persistent=False)
        self.dec_blocks = nn.ModuleList(Block(cfg.dec_width, cfg.dec_heads) for _ in range(cfg.dec_depth))
        self.dec_norm = nn.LayerNorm(cfg.dec_width)
        self.dec_out = nn.Linear(cfg.dec_width, d_in)

        self.phase_head = nn.Sequential(
            nn.Linear(cfg.width, cfg.phase_hidden), nn.GELU(), nn.Linear(cfg.phase_hidden, 2))
        nn.init.normal_(self.mask_token, std=0.02)

    def encode(self, signal: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        """Encoder features; with ``keep`` (B, n_keep) only those tokens are encoded."""
        x = self.embed(patchify(signal, self.cfg.patch)) + self.pos
        pos = torch.arange(x.shape[1]).expand(x.shape[0], -1)
        if keep is not None:
            x = torch.gather(x, 1, keep[..., None].expand(-1, -1, x.shape[-1]))
            pos = keep
        rope_pos = pos if self.cfg.rope else None
        for blk in self.blocks:
            x = blk(x, rope_pos)
        return self.norm(x)

    def phase_angle(self, features: torch.Tensor) -> torch.Tensor:
        out = self.phase_head(features)
        return torch.atan2(out[..., 0], out[..., 1])

    def phase_encoding(self, features: torch.Tensor) -> torch.Tensor:
        theta = self.phase_angle(features)
        return torch.stack([torch.sin(theta), torch.cos(theta)], dim=-1)

    def decode(self, latent: torch.Tensor, keep: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        b = latent.shape[0]
        n = self.cfg.n_tokens
        y = self.dec_embed(latent)
        full = self.mask_token.expand(b, n, -1).clone()
        full = full.scatter(1, keep[..., None].expand(-1, -1, y.shape[-1]), y)
        full = full + self.dec_pos
        rope_pos = torch.arange(n).expand(b, -1) if self.cfg.rope else None
        for blk in self.dec_blocks:
            full = blk(full, rope_pos)
        return self.dec_out(self.dec_norm(full))


def split_mask(masked: torch.Tensor, n_tokens: int) -> torch.Tensor:
    b = masked.shape[0]
    is_masked = torch.zeros(b, n_tokens, dtype=torch.bool)
    is_masked.scatter_(1, masked, True)
    return torch.nonzero(~is_masked)[:, 1].view(b, -1)


def forward_masked(model: PaMae, signal: torch.Tensor, mask_seed: int | torch.Generator):
    """Reconstruct a batch from its visible half; returns ``(reconstruction, masked_indices)``."""
    squeeze = signal.ndim == 2
    if squeeze:
        signal = signal[None]
    gen = mask_seed if isinstance(mask_seed, torch.Generator) else torch.Generator().manual_seed(int(mask_seed))
    cfg = model.cfg
    masked = random_mask(signal.shape[0], cfg.n_tokens, cfg.n_masked, gen)
    keep = split_mask(masked, cfg.n_tokens)
    tokens = model.decode(model.encode(signal, keep), keep, masked)
    recon = unpatchify(tokens, cfg.patch)
    return (recon[0], masked[0]) if squeeze else (recon, masked)


def reconstruction_loss(reconstruction: torch.Tensor, target: torch.Tensor, masked_indices: torch.Tensor,
                        patch: int = 8, all_patches: bool = False) -> torch.Tensor:
    """Per-patch MSE averaged over the masked patches (or every patch)."""
    if reconstruction.shape != target.shape:
        raise ShapeError(f"reconstruction {tuple(reconstruction.shape)} vs target {tuple(target.shape)}")
    if reconstruction.ndim == 2:
        reconstruction, target, masked_indices = reconstruction[None], target[None], masked_indices[None]
    per_patch = ((patchify(reconstruction, patch) - patchify(target, patch)) ** 2).mean(-1)
    if all_patches:
        return per_patch.mean()
    return torch.gather(per_patch, 1, masked_indices).mean()


def forward_phase(model: PaMae, signal: torch.Tensor) -> torch.Tensor:
    """Per-token phase encodings ``(..., 625, 2)`` from the unmasked encoder."""
    squeeze = signal.ndim == 2
    enc = model.phase_encoding(model.encode(signal[None] if squeeze else signal))
    return enc[0] if squeeze else enc


def pa_mae_loss(model: PaMae, signal: torch.Tensor, labels: torch.Tensor,
                mask_seed: int | torch.Generator = 0) -> dict[str, torch.Tensor]:
    """Joint objective ``rec_weight * L_rec + phase_weight * L_phase``.

    ``labels`` are token-resolution phase encodings ``(B, 625, 2)``. With the
    phase head disabled the total is exactly the reconstruction term.
    """
    cfg = model.cfg
    recon, masked = forward_masked(model, signal, mask_seed)
    l_rec = reconstruction_loss(recon, signal, masked, cfg.patch, cfg.loss_on_all_patches)
    out = {"rec": l_rec}
    if cfg.use_phase_head:
        pred = forward_phase(model, signal)
        l_phase = phase_loss(pred, labels).mean()
        out["phase"] = l_phase
        out["total"] = cfg.rec_weight * l_rec + cfg.phase_weight * l_phase
    else:
        out["total"] = l_rec
    return out


# --- data and training --------------------------------------------------------

def ecg_labels(signal: np.ndarray, patch: int = 8) -> np.ndarray:
    """Token-resolution [sin, cos] targets from lead-II R-peak detection."""
    peaks = detect_r_peaks(signal)
    return token_phase_labels(peaks, signal.shape[-1], patch).encoding


def load_ecg_split(dataset: PhantomDataset, split: str, patch: int = 8, limit: int | None = None):
    sigs, labels, ids = [], [], []
    for rec in dataset.records(split, limit):
        try:
            lab = ecg_labels(rec.ecg, patch)
        except AlignmentError as exc:
            log.warning("skipping %s: %s", rec.id, exc)
            continue
        sigs.append(rec.ecg)
        labels.append(lab)
        ids.append(rec.id)
    if not sigs:
        raise DataError(f"no usable ECG records in split {split!r}")
    return (torch.from_numpy(np.stack(sigs)).float(),
            torch.from_numpy(np.stack(labels)).float(), ids)


def train_pa_mae(dataset: PhantomDataset, cfg: PaMaeConfig, checkpoint: str | None = None,
                 progress=None) -> tuple[PaMae, dict]:
    torch.manual_seed(cfg.seed)
    signals, labels, _ = load_ecg_split(dataset, "train", cfg.patch)
    model = PaMae(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = signals.shape[0]
    sched = lr_schedule(opt, cfg.epochs * math.ceil(n / cfg.batch_size), cfg.schedule, cfg.warmup_steps)
    order_gen = torch.Generator().manual_seed(cfg.seed)
    mask_gen = torch.Generator().manual_seed(cfg.seed + 1)
    history = {"total": [], "rec": [], "phase": []}
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=order_gen)
        sums = {k: 0.0 for k in history}
        model.train()
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            losses = pa_mae_loss(model, signals[idx], labels[idx], mask_gen)
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            sched.step()
            for k, v in losses.items():
                sums[k] += float(v.detach()) * len(idx)
        for k in history:
            if k in sums and (k != "phase" or cfg.use_phase_head):
                history[k].append(sums[k] / n)
        log.info("pa-mae epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history["total"][-1])
        if progress:
            progress(epoch, history)
    model.eval()
    if checkpoint:
        save_pa_mae(checkpoint, model, history)
    return model, history


def save_pa_mae(stem, model: PaMae, history: dict | None = None):
    return save_checkpoint(stem, model, "pa_mae", asdict(model.cfg), history)


def load_pa_mae(stem) -> tuple[PaMae, dict]:
    state, meta, _ = load_checkpoint(stem, "pa_mae")
    model = PaMae(PaMaeConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta


@torch.no_grad()
def ecg_features(model: PaMae, signals: torch.Tensor, batch: int = 16):
    """Unmasked encoder features and predicted phases for a stack of ECGs."""
    feats, phases = [], []
    for i in range(0, signals.shape[0], batch):
        f = model.encode(signals[i:i + batch])
        feats.append(f)
        phases.append(model.phase_angle(f))
    return torch.cat(feats).numpy().astype(np.float64), np.mod(torch.cat(phases).numpy().astype(np.float64), 2 * np.pi)


def phase_error(model: PaMae, dataset: PhantomDataset, split: str = "test", limit: int | None = None) -> float:
    """Mean absolute angular error (rad) against generator ground-truth R peaks."""
    errs = []
    sigs = []
    gts = []
    for rec in dataset.records(split, limit):
        sigs.append(rec.ecg)
        gts.append(token_phase_labels(rec.r_peaks, rec.ecg.shape[-1], model.cfg.patch))
    _, pred = ecg_features(model, torch.from_numpy(np.stack(sigs)).float())
    for p, g in zip(pred, gts):
        errs.append(angular_error(PhaseSequence(p), g))
    return float(np.mean(errs))
