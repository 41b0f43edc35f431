"""Check functions shared by the unit tests and the acceptance runner.

Each check raises ``AssertionError`` on failure. Grouped by acceptance
criterion: exact invariants, loss/oracle equivalence, gradient checks.
"""

from __future__ import annotations


import numpy as np
import torch

import oracles
from ecgcine.flow import FlowConfig, VelocityNet, euler_integrate, fm_loss, interpolate, true_velocity
from ecgcine.metrics import UndefinedMetricError, metric_acc, metric_auc, metric_mae, metric_r2
from ecgcine.pamae import PaMae, PaMaeConfig, forward_masked, forward_phase, pa_mae_loss
from ecgcine.phantom import N_LEADS, N_SAMPLES
from ecgcine.phase import PhaseSequence, phase_labels, phase_loss
from ecgcine.vae import CineVae, VaeConfig, kl_divergence, vae_loss

EXACT = 1e-6
N_RANDOM = 20


def close(a, b, tol=EXACT):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    assert a.shape == b.shape, (a.shape, b.shape)
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    assert err <= tol, f"max abs difference {err:.3e} > {tol:.0e}"


# --- tiny float64 models ----------------------------------------------------------

def tiny_pamae(seed: int = 0, **kw) -> PaMae:
    torch.manual_seed(seed)
    cfg = PaMaeConfig(width=8, depth=1, heads=2, dec_width=8, dec_depth=1, dec_heads=2, phase_hidden=8, **kw)
    return PaMae(cfg).double()


def tiny_flow(seed: int = 0, **kw) -> VelocityNet:
    torch.manual_seed(seed)
    cfg = FlowConfig(width=8, depth=1, heads=2, cond_dim=8, patch=(1, 4, 4), **kw)
    net = VelocityNet(cfg).double()
    randomize_zero_params(net, seed)
    return net


def tiny_vae(seed: int = 0) -> CineVae:
    torch.manual_seed(seed)
    return CineVae(VaeConfig(latent_channels=2, channels=(2, 2, 2))).double()


def randomize_zero_params(module: torch.nn.Module, seed: int = 0, std: float = 0.1):
    """Give zero-initialised layers (adaLN-zero, output heads) random values so gradients flow."""
    gen = torch.Generator().manual_seed(seed + 123)
    with torch.no_grad():
        for p in module.parameters():
            if torch.count_nonzero(p) == 0:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def random_ecg(rng: np.random.Generator, batch: int = 1) -> torch.Tensor:
    return torch.from_numpy(rng.normal(size=(batch, N_LEADS, N_SAMPLES)))


def random_phase_encoding(rng: np.random.Generator, shape) -> torch.Tensor:
    return torch.from_numpy(PhaseSequence(rng.uniform(0, 2 * np.pi, size=shape)).encoding)


def flow_inputs(rng: np.random.Generator, batch: int = 1):
    shape = (batch, 4, 50, 12, 12)
    z0 = torch.from_numpy(rng.normal(size=shape))
    z1 = torch.from_numpy(rng.normal(size=shape))
    c = torch.from_numpy(rng.normal(size=(batch, 50, 8)))
    t = torch.from_numpy(rng.uniform(size=batch))
    return z0, z1, c, t


# --- criterion 1: exact invariants ------------------------------------------------------

def check_phase_encoding_unit_norm():
    rng = np.random.default_rng(0)
    enc = PhaseSequence(rng.uniform(0, 2 * np.pi, 1000)).encoding
    close(np.linalg.norm(enc, axis=-1), np.ones(1000))
    model = tiny_pamae()
    with torch.no_grad():
        pred = forward_phase(model, random_ecg(rng, 2)).numpy()
    close(np.linalg.norm(pred, axis=-1), np.ones(pred.shape[:-1]))


def check_phase_label_zeros_and_midpoints():
    peaks = [100, 600, 1000, 1700, 2300]
    ph = phase_labels(peaks, 2500).phase
    close(ph[peaks], np.zeros(len(peaks)))
    mids = [(a + b) // 2 for a, b in zip(peaks[:-1], peaks[1:])]
    close(ph[mids], np.full(len(mids), np.pi))


def check_interpolation_endpoints():
    rng = np.random.default_rng(1)
    z0 = torch.from_numpy(rng.normal(size=(3, 5)))
    z1 = torch.from_numpy(rng.normal(size=(3, 5)))
    close(interpolate(z0, z1, 0.0), z0)
    close(interpolate(z0, z1, 1.0), z1)
    close(interpolate(torch.tensor([0.0, 0.0]), torch.tensor([2.0, 4.0]), 0.5), [1.0, 2.0])


def check_true_velocity_linearity():
    rng = np.random.default_rng(2)
    z0, z1, w0, w1 = (torch.from_numpy(rng.normal(size=(4, 6))) for _ in range(4))
    a, b = 1.7, -0.3
    close(true_velocity(a * z0 + b * w0, a * z1 + b * w1), a * true_velocity(z0, z1) + b * true_velocity(w0, w1))
    close(true_velocity(z0, z0), torch.zeros_like(z0))
    close(true_velocity(torch.zeros_like(z1), z1), z1)


def check_euler_exact_on_constant_field():
    rng = np.random.default_rng(3)
    z0 = torch.from_numpy(rng.normal(size=(2, 4, 50, 12, 12)))
    z1 = torch.from_numpy(rng.normal(size=(2, 4, 50, 12, 12)))
    v = z1 - z0
    for steps in (1, 2, 7, 50):
        close(euler_integrate(lambda z, t, c: v, z0, None, steps), z1)


def check_kl_closed_form():
    z = torch.zeros(3, 4, 5, dtype=torch.float64)
    close(float(kl_divergence(z, z)), 0.0)
    close(float(kl_divergence(torch.ones_like(z), z)), 0.5)


def check_metric_degenerate_cases():
    labels = np.array([0, 1, 1, 0, 1, 0, 0])
    close(metric_auc(labels, labels), 1.0)
    close(metric_acc(labels, labels), 1.0)
    close(metric_auc(1 - labels, labels), 0.0)
    close(metric_auc(np.zeros(7), labels), 0.5)
    for bad in (np.ones(5), np.zeros(5)):
        try:
            metric_auc(np.arange(5.0), bad)
        except UndefinedMetricError:
            pass
        else:
            raise AssertionError("single-class AUC did not raise")
    y = np.array([1.0, 2.5, -0.5, 4.0])
    close(metric_r2(y, y), 1.0)
    close(metric_mae(y, y), 0.0)
    close(metric_r2(np.full(4, y.mean()), y), 0.0)
    try:
        metric_r2(y, np.full(4, 2.0))
    except UndefinedMetricError:
        pass
    else:
        raise AssertionError("constant-target R^2 did not raise")


INVARIANT_CHECKS = [
    check_phase_encoding_unit_norm,
    check_phase_label_zeros_and_midpoints,
    check_interpolation_endpoints,
    check_true_velocity_linearity,
    check_euler_exact_on_constant_field,
    check_kl_closed_form,
    check_metric_degenerate_cases,
]


# --- criterion 2: losses against scalar-loop oracles ----------------------------------------

def check_phase_loss_oracle():
    rng = np.random.default_rng(10)
    for i in range(N_RANDOM):
        b, t = int(rng.integers(1, 4)), int(rng.integers(1, 30))
        pred = rng.normal(size=(b, t, 2))
        gt = random_phase_encoding(rng, (b, t)).numpy()
        close(phase_loss(pred, gt), oracles.phase_loss(pred, gt))
        close(phase_loss(torch.from_numpy(pred), torch.from_numpy(gt)).numpy(), oracles.phase_loss(pred, gt))


def check_pa_mae_loss_oracle():
    rng = np.random.default_rng(11)
    model = tiny_pamae(1)
    for i in range(N_RANDOM):
        signal = random_ecg(rng, 1)
        labels = random_phase_encoding(rng, (1, model.cfg.n_tokens))
        model.cfg.rec_weight, model.cfg.phase_weight = float(rng.uniform(0.1, 2)), float(rng.uniform(0.1, 2))
        with torch.no_grad():
            got = pa_mae_loss(model, signal, labels, mask_seed=i)
            recon, masked = forward_masked(model, signal, i)
            pred = forward_phase(model, signal)
        want = oracles.pa_mae_loss(recon.numpy(), signal.numpy(), masked.numpy(), model.cfg.patch,
                                   pred.numpy(), labels.numpy(), model.cfg.rec_weight, model.cfg.phase_weight)
        close(float(got["total"]), want)
    model.cfg.use_phase_head = False
    with torch.no_grad():
        got = pa_mae_loss(model, signal, labels, mask_seed=0)
        recon, masked = forward_masked(model, signal, 0)
    close(float(got["total"]), oracles.masked_reconstruction_loss(recon.numpy(), signal.numpy(), masked.numpy(), 8))


def check_vae_loss_oracle():
    rng = np.random.default_rng(12)
    vae = tiny_vae(2)
    for i in range(N_RANDOM):
        x = torch.from_numpy(rng.uniform(size=(1, 1, 50, 96, 96)))
        kl_weight = float(rng.choice([0.0, 1e-4, 0.1, 1.0]))
        with torch.no_grad():
            got = vae_loss(vae, x, kl_weight, torch.Generator().manual_seed(i))
            mu, logvar = vae.posterior(x)
            if kl_weight == 0:
                want = oracles.mse(vae(mu).numpy(), x.numpy())
            else:
                eps = torch.randn(mu.shape, generator=torch.Generator().manual_seed(i), dtype=mu.dtype)
                recon = vae(mu + torch.exp(0.5 * logvar) * eps)
                want = oracles.vae_elbo_loss(recon.numpy(), x.numpy(), mu.numpy(), logvar.numpy(), kl_weight)
        close(float(got["total"]), want)


def check_fm_loss_oracle():
    rng = np.random.default_rng(13)
    net = tiny_flow(3)
    for i in range(N_RANDOM):
        z0, z1, c, t = flow_inputs(rng, int(rng.integers(1, 3)))
        with torch.no_grad():
            got = float(fm_loss(net, z0, z1, c, t))
            zt = torch.stack([torch.tensor(oracles.interpolate(a, b, float(tt))).reshape(a.shape)
                              for a, b, tt in zip(z0, z1, t)])
            pred = net(zt, t, c)
        close(got, oracles.fm_loss(pred.numpy(), z0.numpy(), z1.numpy()))
    z = torch.ones(1, 8, dtype=torch.float64)
    close(float(fm_loss(lambda zt, t, c: torch.zeros_like(zt), torch.zeros_like(z), z, None, torch.zeros(1))), 1.0)


ORACLE_CHECKS = [
    check_phase_loss_oracle,
    check_pa_mae_loss_oracle,
    check_vae_loss_oracle,
    check_fm_loss_oracle,
]


# --- criterion 3: finite-difference gradient checks ------------------------------------------

GRAD_EPS = 1e-4
GRAD_RTOL = 1e-3
GRAD_PARAMS = 24


def relative_error(a: float, n: float, floor: float = 1e-7) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_difference_errors(module: torch.nn.Module, loss_fn, n_params: int = GRAD_PARAMS, seed: int = 0):
    """Relative errors of analytic vs central-difference gradients on sampled scalar parameters."""
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            p, j = params[k], int(f - offsets[k])
            analytic = float(p.grad.reshape(-1)[j])
            view = p.data.reshape(-1)
            old = float(view[j])
            view[j] = old + GRAD_EPS
            up = float(loss_fn())
            view[j] = old - GRAD_EPS
            down = float(loss_fn())
            view[j] = old
            numeric = (up - down) / (2 * GRAD_EPS)
            errors.append(relative_error(analytic, numeric))
    return np.array(errors)


def check_pa_mae_gradients():
    rng = np.random.default_rng(20)
    model = tiny_pamae(4)
    randomize_zero_params(model, 4)
    signal = random_ecg(rng, 2)
    labels = random_phase_encoding(rng, (2, model.cfg.n_tokens))
    errs = finite_difference_errors(model, lambda: pa_mae_loss(model, signal, labels, mask_seed=7)["total"], seed=1)
    assert len(errs) >= 20
    assert errs.max() <= GRAD_RTOL, f"max relative error {errs.max():.2e}"
    return errs


def check_amdf_gradients():
    rng = np.random.default_rng(21)
    net = tiny_flow(5)
    z0, z1, c, t = flow_inputs(rng, 2)
    errs = finite_difference_errors(net, lambda: fm_loss(net, z0, z1, c, t), seed=2)
    assert len(errs) >= 20
    assert errs.max() <= GRAD_RTOL, f"max relative error {errs.max():.2e}"
    return errs


GRADIENT_CHECKS = [check_pa_mae_gradients, check_amdf_gradients]
