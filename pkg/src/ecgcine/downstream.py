"""Downstream evaluation: video MAE pretraining on real + synthetic mixtures,
then five-fold fine-tuning for disease classification and phenotype regression.

Phantom parameters stand in for clinical labels: reduced contraction is the
"disease" class, and (heart rate, contraction amplitude, base radius) are the
regression phenotypes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.model_selection import KFold, StratifiedKFold

from .errors import DataError, ParameterError
from .metrics import metric_acc, metric_auc, metric_mae, metric_r2, mean_std
from .nn import Block, sincos_table
from .phantom import FRAME_SIZE, N_FRAMES, PhantomParams

log = logging.getLogger(__name__)

ALLOWED_RATIOS = (0.0, 1.0, 2.0, 3.0)
PHENOTYPES = ("heart_rate_bpm", "contraction_amplitude", "base_inner_radius")


@dataclass
class DownstreamConfig:
    ratios: tuple = ALLOWED_RATIOS
    n_real: int = 50
    patch: tuple = (10, 16, 16)
    width: int = 64
    depth: int = 2
    heads: int = 4
    dec_width: int = 32
    dec_depth: int = 1
    mask_ratio: float = 0.75
    norm_target: bool = False  # per-patch normalised reconstruction targets
    pretrain_epochs: int = 20
    pretrain_steps: int = 0  # > 0: fixed optimiser-step budget, the same for every mixture size
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 20
    finetune_lr: float = 1e-3
    encoder_lr_scale: float = 1.0  # encoder lr = finetune_lr * scale; the head uses finetune_lr
    weight_decay: float = 1e-4
    batch_size: int = 8
    folds: int = 5
    seeds: tuple = (0, 1, 2)
    disease_threshold: float = 0.3
    eval_split: str = "test"
    gen_steps: int = 50
    include_scratch: bool = True
    tasks: tuple = ("classification", "regression")

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.patch = tuple(self.patch)
        self.seeds = tuple(self.seeds)
        self.tasks = tuple(self.tasks)
        if self.pretrain_steps < 0:
            raise ParameterError(f"pretrain_steps must be >= 0, got {self.pretrain_steps}")
        if self.encoder_lr_scale < 0:
            raise ParameterError(f"encoder_lr_scale must be >= 0, got {self.encoder_lr_scale}")


# --- tasks ------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    kind: str
    label_fn: Callable[[PhantomParams], np.ndarray]
    names: tuple = ()


def classification_task(threshold: float = 0.3) -> TaskSpec:
    return TaskSpec("classification", lambda p: np.array(float(p.contraction_amplitude < threshold)), ("disease",))


def regression_task(names: Sequence[str] = PHENOTYPES) -> TaskSpec:
    names = tuple(names)
    return TaskSpec("regression", lambda p: np.array([getattr(p, n) for n in names], dtype=np.float64), names)


# --- mixtures ---------------------------------------------------------------------

@dataclass
class MixedDataset:
    real: np.ndarray
    synthetic: np.ndarray
    mix_ratio: float
    real_ids: list = field(default_factory=list)
    synthetic_sources: list = field(default_factory=list)

    def cines(self) -> np.ndarray:
        if len(self.synthetic) == 0:
            return self.real
        return np.concatenate([self.real, self.synthetic])

    def __len__(self):
        return len(self.real) + len(self.synthetic)


def build_mixture(real: np.ndarray, synthetic_pool: np.ndarray, ratio: float,
                  real_ids: Sequence[str] = (), pool_sources: Sequence[str] = (),
                  allowed: Sequence[float] = ALLOWED_RATIOS) -> MixedDataset:
    """Take ``ratio * len(real)`` synthetic cines from the front of the pool.

    Pools are generated once per run, so mixtures at increasing ratios are nested.
    """
    if float(ratio) not in tuple(float(a) for a in allowed):
        raise ParameterError(f"mixing ratio {ratio} not in {tuple(allowed)}")
    n_syn = int(round(ratio * len(real)))
    if n_syn > len(synthetic_pool):
        raise ParameterError(f"pool holds {len(synthetic_pool)} synthetic cines, ratio {ratio} needs {n_syn}")
    return MixedDataset(real, synthetic_pool[:n_syn], float(ratio), list(real_ids), list(pool_sources[:n_syn]))


def synthetic_sources(train_ids: Sequence[str], count: int, seed: int = 0) -> list[str]:
    """ECG ids for ``count`` generations, drawn from the training split only."""
    rng = np.random.default_rng(seed)
    ids = list(train_ids)
    if not ids and count:
        raise DataError("no training ECGs to generate from")
    reps = math.ceil(count / max(1, len(ids)))
    out = []
    for _ in range(reps):
        out.extend(rng.permutation(ids).tolist())
    return out[:count]


# --- video MAE --------------------------------------------------------------------

class VideoMae(nn.Module):
    def __init__(self, cfg: DownstreamConfig):
        super().__init__()
        self.cfg = cfg
        pt, ph, pw = cfg.patch
        self.grid = (N_FRAMES // pt, FRAME_SIZE // ph, FRAME_SIZE // pw)
        self.n_tokens = int(np.prod(self.grid))
        d_in = pt * ph * pw
        self.embed = nn.Linear(d_in, cfg.width)
        self.register_buffer("pos", sincos_table(self.n_tokens, cfg.width), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.dec_embed = nn.Linear(cfg.width, cfg.dec_width)
        self.mask_token = nn.Parameter(torch.randn(cfg.dec_width) * 0.02)
        self.register_buffer("dec_pos", sincos_table(self.n_tokens, cfg.dec_width), persistent=False)
        self.dec_blocks = nn.ModuleList(Block(cfg.dec_width, cfg.heads) for _ in range(cfg.dec_depth))
        self.dec_out = nn.Sequential(nn.LayerNorm(cfg.dec_width), nn.Linear(cfg.dec_width, d_in))

    def patchify(self, video: torch.Tensor) -> torch.Tensor:
        b = video.shape[0]
        pt, ph, pw = self.cfg.patch
        nt, nh, nw = self.grid
        x = video.reshape(b, nt, pt, nh, ph, nw, pw)
        return x.permute(0, 1, 3, 5, 2, 4, 6).reshape(b, self.n_tokens, -1)

    def encode(self, video: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        x = self.embed(self.patchify(video)) + self.pos
        if keep is not None:
            x = torch.gather(x, 1, keep[..., None].expand(-1, -1, x.shape[-1]))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def mae_loss(self, video: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        b = video.shape[0]
        n_keep = self.n_tokens - math.ceil(self.cfg.mask_ratio * self.n_tokens)
        order = torch.argsort(torch.rand(b, self.n_tokens, generator=generator), dim=1)
        keep, masked = order[:, :n_keep], order[:, n_keep:]
        lat = self.dec_embed(self.encode(video, keep))
        full = self.mask_token.expand(b, self.n_tokens, -1).clone()
        full = full.scatter(1, keep[..., None].expand(-1, -1, lat.shape[-1]), lat) + self.dec_pos
        for blk in self.dec_blocks:
            full = blk(full)
        pred = self.dec_out(full)
        target = self.patchify(video)
        if self.cfg.norm_target:
            mu = target.mean(-1, keepdim=True)
            var = target.var(-1, keepdim=True)
            target = (target - mu) / (var + 1e-6).sqrt()
        per_tok = ((pred - target) ** 2).mean(-1)
        return torch.gather(per_tok, 1, masked).mean()


def pretrain_video_mae(cines: np.ndarray, cfg: DownstreamConfig, seed: int = 0) -> tuple[VideoMae, dict]:
    if len(cines) == 0:
        raise DataError("empty pretraining mixture")
    torch.manual_seed(seed)
    model = VideoMae(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    data = torch.as_tensor(np.asarray(cines, dtype=np.float32))
    n = data.shape[0]
    history = {"loss": []}
    budget = cfg.pretrain_steps if cfg.pretrain_steps > 0 else cfg.pretrain_epochs * -(-n // cfg.batch_size)
    step = 0
    while step < budget:
        # one pass over a fresh permutation; the last pass may stop early
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            if step == budget:
                break
            idx = perm[i:i + cfg.batch_size]
            loss = model.mae_loss(data[idx], gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        history["loss"].append(total / seen)
    return model, history


class Finetuner(nn.Module):
    """Encoder plus a linear head on spatially pooled, temporally ordered tokens.

    Keeping the time axis lets the head see when contraction peaks, which is
    where heart rate lives in these videos.
    """

    def __init__(self, encoder: VideoMae, n_out: int):
        super().__init__()
        self.encoder = encoder
        nt = encoder.grid[0]
        self.norm = nn.LayerNorm(encoder.cfg.width)
        self.head = nn.Linear(nt * encoder.cfg.width, n_out)

    def forward(self, video):
        b = video.shape[0]
        nt, nh, nw = self.encoder.grid
        x = self.encoder.encode(video).reshape(b, nt, nh * nw, -1).mean(dim=2)
        return self.head(self.norm(x).flatten(1))


def _fit_predict(init_state: dict | None, cfg: DownstreamConfig, task: TaskSpec,
                 x_tr: torch.Tensor, y_tr: np.ndarray, x_te: torch.Tensor, seed: int) -> np.ndarray:
    torch.manual_seed(seed)
    enc = VideoMae(cfg)
    if init_state is not None:
        enc.load_state_dict(init_state)
    n_out = 1 if task.kind == "classification" else y_tr.shape[1]
    model = Finetuner(enc, n_out)
    if task.kind == "regression":
        mu, sd = y_tr.mean(0), y_tr.std(0) + 1e-8
        y_fit = (y_tr - mu) / sd
    else:
        y_fit = y_tr.reshape(-1, 1)
    y_t = torch.as_tensor(y_fit, dtype=torch.float32)
    head = [p for name, p in model.named_parameters() if not name.startswith("encoder.")]
    opt = torch.optim.AdamW([{"params": model.encoder.parameters(), "lr": cfg.finetune_lr * cfg.encoder_lr_scale},
                             {"params": head}], lr=cfg.finetune_lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    n = x_tr.shape[0]
    model.train()
    for _ in range(cfg.finetune_epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            out = model(x_tr[idx])
            if task.kind == "classification":
                loss = F.binary_cross_entropy_with_logits(out, y_t[idx])
            else:
                loss = F.mse_loss(out, y_t[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        out = torch.cat([model(x_te[i:i + 16]) for i in range(0, x_te.shape[0], 16)]).numpy()
    if task.kind == "classification":
        return 1 / (1 + np.exp(-out[:, 0]))
    return out * sd + mu


def finetune_and_eval(init_state: dict | None, cfg: DownstreamConfig, cines: np.ndarray,
                      params: Sequence[PhantomParams], task: TaskSpec, seed: int = 0,
                      shuffle_labels: bool = False) -> dict:
    """K-fold fine-tuning from ``init_state`` (None = random init); per-fold and summary metrics."""
    n = len(cines)
    if n < cfg.folds:
        raise DataError(f"{n} samples cannot fill {cfg.folds} folds")
    y = np.stack([task.label_fn(p) for p in params])
    if shuffle_labels:
        y = np.random.default_rng(seed + 10_000).permutation(y)
    x = torch.as_tensor(np.asarray(cines, dtype=np.float32))
    if task.kind == "classification":
        splitter = StratifiedKFold(cfg.folds, shuffle=True, random_state=seed).split(np.zeros(n), y.ravel())
    else:
        splitter = KFold(cfg.folds, shuffle=True, random_state=seed).split(np.zeros(n))

    folds = []
    for k, (tr, te) in enumerate(splitter):
        pred = _fit_predict(init_state, cfg, task, x[tr], y[tr], x[te], seed * 100 + k)
        if task.kind == "classification":
            yt = y[te].ravel()
            folds.append({"acc": metric_acc(pred >= 0.5, yt), "auc": metric_auc(pred, yt)})
        else:
            fold = {}
            for j, name in enumerate(task.names):
                fold[f"{name}/mae"] = metric_mae(pred[:, j], y[te][:, j])
                fold[f"{name}/r2"] = metric_r2(pred[:, j], y[te][:, j])
            fold["overall/r2"] = float(np.mean([fold[f"{nm}/r2"] for nm in task.names]))
            folds.append(fold)
    summary = {key: mean_std([f[key] for f in folds]) for key in folds[0]}
    return {"kind": task.kind, "folds": folds, "summary": summary}
