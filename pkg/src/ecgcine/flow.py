"""Template-anchored conditional flow matching in the cine VAE latent space.

Training pairs run from a noisy copy of the population template,
``z0 = template + alpha * eps``, to the encoded target ``z1`` along the
straight line ``z_t = (1 - t) z0 + t z1``; the network regresses the constant
drift ``z1 - z0``. Sampling integrates the learned field with forward Euler.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import AlignmentError, DataError, ParameterError, ShapeError
from .nn import Attention, Mlp, lr_schedule, param_digest, sincos_table, timestep_embedding
from .pamae import PaMae, ecg_features
from .phantom import N_FRAMES, PhantomDataset
from .phase import CardiacCycle, PhaseSequence, condition_from_ecg, resample_cycle
from .vae import LATENT_SIZE, CineVae, compute_template, decode, posterior_means

log = logging.getLogger(__name__)


@dataclass
class FlowConfig:
    latent_channels: int = 4
    cond_dim: int = 64
    width: int = 128
    depth: int = 4
    heads: int = 4
    patch: tuple = (1, 2, 2)
    mlp_ratio: float = 4.0
    alpha: float = 1.0
    steps: int = 50
    use_template: bool = True
    use_condition: bool = True
    phase_aware: bool = True
    pooled_condition: bool = True
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 10
    schedule: str = "constant"
    warmup_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        self.patch = tuple(self.patch)
        if self.alpha < 0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")


# --- interpolant ---------------------------------------------------------------

def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def make_z0(template: torch.Tensor, alpha: float = 1.0, seed: int | torch.Generator = 0) -> torch.Tensor:
    """Noise-injected template ``template + alpha * eps`` with ``eps ~ N(0, I)``."""
    if alpha < 0:
        raise ParameterError(f"alpha must be >= 0, got {alpha}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    eps = torch.randn(template.shape, generator=gen, dtype=template.dtype)
    return template + alpha * eps


def _bcast_t(t, ref: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=ref.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (ref.ndim - 1)))


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t) -> torch.Tensor:
    _same_shape(z0, z1)
    tt = _bcast_t(t, z0)
    return (1 - tt) * z0 + tt * z1


def true_velocity(z0: torch.Tensor, z1: torch.Tensor) -> torch.Tensor:
    _same_shape(z0, z1)
    return z1 - z0


def fm_loss(net: Callable, z0: torch.Tensor, z1: torch.Tensor, c: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Mean squared error between ``net(z_t, t, c)`` and ``z1 - z0`` over all elements."""
    zt = interpolate(z0, z1, t)
    pred = net(zt, t, c)
    _same_shape(pred, z1)
    return ((pred - true_velocity(z0, z1)) ** 2).mean()


# --- velocity network -----------------------------------------------------------

def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class FlowBlock(nn.Module):
    """Factorised space/time self-attention, cross-attention to the ECG
    condition, and an MLP; adaptive layer norm driven by the time embedding."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn_s = Attention(dim, heads)
        self.norm_t = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn_t = Attention(dim, heads)
        self.norm_c = nn.LayerNorm(dim)
        self.attn_c = Attention(dim, heads)
        self.norm_m = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = Mlp(dim, mlp_ratio)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 9 * dim))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x: torch.Tensor, emb: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, t, s, d = x.shape
        mod = self.ada(emb)[:, None, None, :].chunk(9, dim=-1)

        h = _modulate(self.norm_s(x), mod[0], mod[1]).reshape(b * t, s, d)
        x = x + mod[2] * self.attn_s(h).reshape(b, t, s, d)

        h = _modulate(self.norm_t(x), mod[3], mod[4]).transpose(1, 2).reshape(b * s, t, d)
        x = x + mod[5] * self.attn_t(h).reshape(b, s, t, d).transpose(1, 2)

        h = self.norm_c(x).reshape(b, t * s, d)
        x = x + self.attn_c(h, cond).reshape(b, t, s, d)

        return x + mod[8] * self.mlp(_modulate(self.norm_m(x), mod[6], mod[7]))


class VelocityNet(nn.Module):
    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        pt, ph, pw = cfg.patch
        self.grid = (N_FRAMES // pt, LATENT_SIZE // ph, LATENT_SIZE // pw)
        w = cfg.width
        self.embed = nn.Conv3d(cfg.latent_channels, w, cfg.patch, stride=cfg.patch)
        self.pos_space = nn.Parameter(torch.randn(self.grid[1] * self.grid[2], w) * 0.02)
        self.register_buffer("pos_time", sincos_table(N_FRAMES, w), persistent=False)
        self.t_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.c_in = nn.Sequential(nn.LayerNorm(cfg.cond_dim), nn.Linear(cfg.cond_dim, w))
        self.c_pool = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(FlowBlock(w, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(w, elementwise_affine=False)
        self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(w, 2 * w))
        self.out = nn.Linear(w, cfg.latent_channels * pt * ph * pw)
        for m in (self.ada_out[1], self.out):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, z: torch.Tensor, t, c: torch.Tensor) -> torch.Tensor:
        if z.ndim == 4:
            return self.forward(z[None], t, c if c.ndim == 3 else c[None])[0]
        b = z.shape[0]
        nt, nh, nw = self.grid
        pt, ph, pw = self.cfg.patch
        t = torch.as_tensor(t, dtype=z.dtype).reshape(-1).expand(b)
        if c.ndim == 2:
            c = c[None].expand(b, -1, -1)
        if not self.cfg.use_condition:
            c = torch.zeros_like(c)

        x = self.embed(z).flatten(3).transpose(1, 2).reshape(b, nt, nh * nw, -1)
        x = x + self.pos_space + self.pos_time[::pt][:, None, :]

        cond = self.c_in(c) + self.pos_time
        emb = self.t_mlp(timestep_embedding(t, self.cfg.width))
        if self.cfg.pooled_condition:
            emb = emb + self.c_pool(cond.mean(dim=1))

        for blk in self.blocks:
            x = blk(x, emb, cond)
        shift, scale = self.ada_out(emb)[:, None, None, :].chunk(2, dim=-1)
        x = self.out(_modulate(self.norm_out(x), shift, scale))
        c_lat = self.cfg.latent_channels
        x = x.reshape(b, nt, nh, nw, c_lat, pt, ph, pw)
        return x.permute(0, 4, 1, 5, 2, 6, 3, 7).reshape(b, c_lat, nt * pt, nh * ph, nw * pw)


# --- sampling -------------------------------------------------------------------

def euler_integrate(field: Callable, z0: torch.Tensor, c, steps: int) -> torch.Tensor:
    """``steps`` forward-Euler steps of ``dz/dt = field(z, t, c)`` from t=0 to t=1."""
    if steps < 1:
        raise ParameterError(f"need at least one Euler step, got {steps}")
    dt = 1.0 / steps
    z = z0
    for k in range(steps):
        t = torch.full((z.shape[0],) if z.ndim == 5 else (), k * dt, dtype=z.dtype)
        z = z + dt * field(z, t, c)
    return z


def start_latents(template: torch.Tensor, alpha: float, seeds, use_template: bool = True) -> torch.Tensor:
    base = template if use_template else torch.zeros_like(template)
    return torch.stack([make_z0(base, alpha, s) for s in seeds])


@torch.no_grad()
def sample(net: Callable, template: torch.Tensor, c: torch.Tensor, steps: int = 50,
           alpha: float = 1.0, seed: int = 0, use_template: bool = True) -> torch.Tensor:
    """Integrate from ``make_z0(template, alpha, seed)``; ``c`` is ``(50, D)`` or ``(B, 50, D)``.

    For a batch the i-th start latent uses seed ``seed + i``.
    """
    if c.ndim == 2:
        z0 = start_latents(template, alpha, [seed], use_template)
        return euler_integrate(net, z0, c[None], steps)[0]
    z0 = start_latents(template, alpha, [seed + i for i in range(c.shape[0])], use_template)
    return euler_integrate(net, z0, c, steps)


# --- conditioning -----------------------------------------------------------------

def ecg_conditions(pamae: PaMae, signals, phase_aware: bool = True, on_failure: str = "raise"):
    """Per-record 50-frame conditions from the frozen ECG encoder.

    Phase-aware conditions average ROI-aligned windows over every complete
    cycle found in the predicted phase; otherwise the whole record is
    resampled as a single window. When no complete cycle is found,
    ``on_failure`` chooses between raising, skipping the record and falling
    back to the whole-record window.

    Returns ``(conditions, kept_indices, fallback_indices)``.
    """
    if on_failure not in ("raise", "skip", "whole_record"):
        raise ParameterError(f"unknown on_failure mode {on_failure!r}")
    signals = torch.as_tensor(np.asarray(signals)).float()
    feats, phases = ecg_features(pamae, signals)
    conds, kept, fallback = [], [], []
    for i, (f, p) in enumerate(zip(feats, phases)):
        whole = CardiacCycle(0, f.shape[0])
        if not phase_aware:
            conds.append(resample_cycle(f, whole))
            kept.append(i)
            continue
        try:
            conds.append(condition_from_ecg(f, PhaseSequence(p)))
        except AlignmentError:
            if on_failure == "raise":
                raise
            if on_failure == "skip":
                log.warning("no complete cycle in record %d; skipped", i)
                continue
            log.warning("no complete cycle in record %d; using the whole record", i)
            conds.append(resample_cycle(f, whole))
            fallback.append(i)
        kept.append(i)
    if not conds:
        raise DataError("no record produced a condition")
    return torch.from_numpy(np.stack(conds)).float(), kept, fallback


@torch.no_grad()
def generate_from_conditions(net: VelocityNet, vae: CineVae, template: torch.Tensor, c: torch.Tensor,
                             steps: int | None = None, seed: int = 0) -> np.ndarray:
    cfg = net.cfg
    z = sample(net, template, c, steps or cfg.steps, cfg.alpha, seed, cfg.use_template)
    return decode(vae, z).numpy()


def generate_cine(net: VelocityNet, vae: CineVae, pamae: PaMae, ecg, template: torch.Tensor,
                  steps: int | None = None, seed: int = 0, on_failure: str = "raise") -> np.ndarray:
    """ECG ``(12, 5000)`` (or a batch) -> cine ``(1, 50, 96, 96)`` (or a batch).

    ``on_failure`` is "raise" or "whole_record"; records are never dropped.
    """
    if on_failure not in ("raise", "whole_record"):
        raise ParameterError(f"generation cannot use on_failure={on_failure!r}")
    ecg = np.asarray(getattr(ecg, "signal", ecg))
    single = ecg.ndim == 2
    c, _, _ = ecg_conditions(pamae, ecg[None] if single else ecg, net.cfg.phase_aware, on_failure)
    out = generate_from_conditions(net, vae, template, c, steps, seed)
    return out[0] if single else out


def generate_batched(net, vae, pamae, ecgs, template, steps=None, seed: int = 0, batch: int = 8,
                     on_failure: str = "raise") -> np.ndarray:
    """Batch-wise generation; batch ``k`` starts its noise seeds at ``seed + k * batch``."""
    out = []
    for i in range(0, len(ecgs), batch):
        out.append(generate_cine(net, vae, pamae, np.asarray(ecgs[i:i + batch]), template, steps, seed + i,
                                 on_failure))
    return np.concatenate(out)


# --- training ---------------------------------------------------------------------

@dataclass
class FlowData:
    z1: torch.Tensor
    cond: torch.Tensor
    ids: list


def prepare_flow_data(dataset: PhantomDataset, vae: CineVae, pamae: PaMae, split: str = "train",
                      phase_aware: bool = True) -> FlowData:
    ids = dataset.ids(split)
    if not ids:
        raise DataError(f"split {split!r} is empty")
    ecgs = dataset.stack(split, "ecg")
    cond, kept, _ = ecg_conditions(pamae, ecgs, phase_aware, on_failure="skip")
    z1 = posterior_means(vae, (dataset.load(ids[i]).cine for i in kept))
    return FlowData(z1, cond, [ids[i] for i in kept])


def train_amdf(dataset: PhantomDataset, vae: CineVae, pamae: PaMae, cfg: FlowConfig,
               template: torch.Tensor | None = None, data: FlowData | None = None,
               checkpoint: str | None = None, progress=None) -> tuple[VelocityNet, dict]:
    """Fit the velocity net with both upstream models frozen."""
    digests = (param_digest(vae), param_digest(pamae))
    for m in (vae, pamae):
        m.eval()
        m.requires_grad_(False)
    if template is None:
        template = compute_template(vae, (r.cine for r in dataset.records("train")))
    if data is None:
        data = prepare_flow_data(dataset, vae, pamae, "train", cfg.phase_aware)

    torch.manual_seed(cfg.seed)
    net = VelocityNet(cfg)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = data.z1.shape[0]
    sched = lr_schedule(opt, cfg.epochs * math.ceil(n / cfg.batch_size), cfg.schedule, cfg.warmup_steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    base = template if cfg.use_template else torch.zeros_like(template)
    history = {"loss": []}
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        net.train()
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            z1 = data.z1[idx]
            z0 = base + cfg.alpha * torch.randn(z1.shape, generator=gen)
            t = torch.rand(len(idx), generator=gen)
            loss = fm_loss(net, z0, z1, data.cond[idx], t)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
        history["loss"].append(total / n)
        log.info("amdf epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history["loss"][-1])
        if progress:
            progress(epoch, history)
    net.eval()
    if (param_digest(vae), param_digest(pamae)) != digests:
        raise RuntimeError("upstream weights changed during flow training")
    history["upstream_digests"] = list(digests)
    if checkpoint:
        save_amdf(checkpoint, net, history, template)
    return net, history


def save_amdf(stem, net: VelocityNet, history: dict | None = None, template: torch.Tensor | None = None):
    extra = {"template": template.numpy()} if template is not None else None
    return save_checkpoint(stem, net, "amdf", asdict(net.cfg), history, extra)


def load_amdf(stem) -> tuple[VelocityNet, dict, torch.Tensor | None]:
    state, meta, extra = load_checkpoint(stem, "amdf")
    net = VelocityNet(FlowConfig(**meta["config"]))
    net.load_state_dict(state)
    net.eval()
    template = torch.from_numpy(extra["template"]) if "template" in extra else None
    return net, meta, template
