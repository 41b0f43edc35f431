"""Stage orchestration over a run directory.

Layout under ``<run>/``::

    config.json                  resolved config of the latest invocation
    data/                        phantom split archive
    pa_mae.{npz,json}            ECG encoder checkpoint
    vae.{npz,json}, template.npz cine VAE and anatomical template
    amdf.{npz,json}              velocity network
    generate/                    generated cines, oracle report, figures, previews
    eval/                        downstream mixing report
    ablate/                      ablation runs and comparison table
    manifests/<stage>.json       config snapshot + content digests per stage

Every stage checks its upstream artifacts first and raises
:class:`DependencyError` naming the missing path.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import checkpoint_exists, save_checkpoint
from .config import RunConfig, config_hash
from .downstream import (DownstreamConfig, build_mixture, classification_task, finetune_and_eval,
                         pretrain_video_mae, regression_task, synthetic_sources)
from .errors import DataError, DependencyError
from .flow import (FlowConfig, VelocityNet, ecg_conditions, generate_from_conditions, load_amdf,
                   prepare_flow_data, train_amdf)
from .metrics import mean_std, metric_mae, pearson_r
from .pamae import PaMae, load_pa_mae, phase_error, train_pa_mae
from .phantom import PhantomDataset, build_dataset, estimate_contraction, measure_radius_curve
from .vae import CineVae, compute_template, load_vae, reconstruction_mse, train_vae
from . import plots

log = logging.getLogger(__name__)

OUT_ENV = "ECGCINE_OUT"
STAGES = ("data", "train-pamae", "train-vae", "train-amdf", "generate", "eval", "ablate")


def output_root(explicit: str | os.PathLike | None = None) -> Path:
    """Explicit path, else ``$ECGCINE_OUT``, else ``./runs``."""
    return Path(explicit or os.environ.get(OUT_ENV) or "runs")


# --- run directory ---------------------------------------------------------------

class Run:
    def __init__(self, root: str | os.PathLike, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    data = property(lambda self: self.root / "data")
    pa_mae = property(lambda self: self.root / "pa_mae")
    vae = property(lambda self: self.root / "vae")
    template = property(lambda self: self.root / "template.npz")
    amdf = property(lambda self: self.root / "amdf")
    generate_dir = property(lambda self: self.root / "generate")
    eval_dir = property(lambda self: self.root / "eval")
    ablate_dir = property(lambda self: self.root / "ablate")
    manifests = property(lambda self: self.root / "manifests")

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    def prepare(self):
        self.root.mkdir(parents=True, exist_ok=True)
        _write_json(self.root / "config.json", self.cfg.to_dict())

    # dependency checks

    def require_data(self) -> PhantomDataset:
        if not (self.data / "metadata.json").exists():
            raise DependencyError(f"dataset not found at {self.data / 'metadata.json'}; run the 'data' stage first")
        return PhantomDataset(self.data)

    def require_checkpoint(self, stem: Path, stage: str):
        if not checkpoint_exists(stem):
            raise DependencyError(f"checkpoint not found: {stem.with_suffix('.npz')}; run the '{stage}' stage first")

    def require_template(self) -> torch.Tensor:
        if not self.template.exists():
            raise DependencyError(f"template not found: {self.template}; run the 'train-vae' stage first")
        with np.load(self.template) as z:
            return torch.from_numpy(z["template"].copy())

    def load_models(self) -> tuple[PaMae, CineVae, VelocityNet, torch.Tensor]:
        self.require_checkpoint(self.pa_mae, "train-pamae")
        self.require_checkpoint(self.vae, "train-vae")
        template = self.require_template()
        self.require_checkpoint(self.amdf, "train-amdf")
        pamae, _ = load_pa_mae(self.pa_mae)
        vae, _ = load_vae(self.vae)
        net, _, _ = load_amdf(self.amdf)
        return pamae, vae, net, template


# --- digests and manifests ---------------------------------------------------------

def artifact_digest(path: str | os.PathLike) -> str:
    """Content digest that ignores container metadata.

    ``.npz`` archives hash their sorted array names, dtypes, shapes and
    bytes (zip timestamps vary between runs); directories hash their files
    in sorted order; anything else hashes raw bytes.
    """
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode())
            h.update(artifact_digest(p).encode())
    elif path.suffix == ".npz":
        with np.load(path) as z:
            for k in sorted(z.files):
                a = np.ascontiguousarray(z[k])
                h.update(f"{k}|{a.dtype.str}|{a.shape}".encode())
                h.update(a.tobytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(run: Run, stage: str, section: dict, inputs: Sequence[Path], outputs: Sequence[Path],
                   metrics: dict | None = None) -> Path:
    """Config snapshot plus content digests; deterministic for identical runs."""
    manifest = {
        "stage": stage,
        "package_version": __version__,
        "profile": run.cfg.profile,
        "seed": run.cfg.seed,
        "config_hash": run.cfg.content_hash(),
        "stage_config": section,
        "stage_config_hash": config_hash(section),
        "inputs": {run.rel(p): artifact_digest(p) for p in inputs},
        "outputs": {run.rel(p): artifact_digest(p) for p in outputs},
    }
    if metrics is not None:
        manifest["metrics"] = metrics
    path = run.manifests / f"{stage}.json"
    _write_json(path, manifest)
    return path


def _finite(obj):
    """Replace NaN/inf by None so reports stay strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_finite(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")
    return path


def _write_csv(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def _npz(path: Path) -> Path:
    return path.with_suffix(".npz")


def _seeded(section, global_seed: int):
    """Stage seed = global seed + the section's own seed."""
    return dataclasses.replace(section, seed=global_seed + section.seed)


def generate_records(net: VelocityNet, vae: CineVae, pamae: PaMae, ecgs: np.ndarray, template: torch.Tensor,
                     steps: int | None = None, seed: int = 0, batch: int = 8) -> tuple[np.ndarray, list[int]]:
    """Batched generation that falls back to the whole-record window when the
    predicted phase holds no complete cycle. Returns ``(cines, fallback_indices)``.

    Seeding matches :func:`ecgcine.flow.generate_batched`.
    """
    out, fallback = [], []
    for i in range(0, len(ecgs), batch):
        c, _, fb = ecg_conditions(pamae, ecgs[i:i + batch], net.cfg.phase_aware, on_failure="whole_record")
        out.append(generate_from_conditions(net, vae, template, c, steps, seed + i))
        fallback.extend(i + j for j in fb)
    return np.concatenate(out), fallback


# --- stages --------------------------------------------------------------------------

def stage_data(run: Run) -> dict:
    cfg = run.cfg.phantom
    build_dataset(cfg.n_subjects, run.data, cfg.fractions, seed=run.cfg.seed)
    ds = PhantomDataset(run.data)
    summary = {split: len(ds.ids(split)) for split in ("train", "val", "test")}
    write_manifest(run, "data", asdict(cfg), [], [run.data], summary)
    return summary


def stage_train_pamae(run: Run) -> dict:
    ds = run.require_data()
    cfg = _seeded(run.cfg.pa_mae, run.cfg.seed)
    model, history = train_pa_mae(ds, cfg, checkpoint=run.pa_mae)
    metrics = {"final_loss": history["total"][-1], "initial_loss": history["total"][0]}
    if cfg.use_phase_head:
        metrics["test_phase_error_rad"] = phase_error(model, ds, "test")
    plots.plot_history(history, run.root / "figures" / "pa_mae_loss.png", "PA-MAE")
    write_manifest(run, "train-pamae", asdict(cfg), [run.data], [_npz(run.pa_mae)], metrics)
    return metrics


def stage_train_vae(run: Run) -> dict:
    ds = run.require_data()
    cfg = _seeded(run.cfg.vae, run.cfg.seed)
    vae, history = train_vae(ds, cfg, checkpoint=run.vae)
    template = compute_template(vae, (r.cine for r in ds.records("train")))
    np.savez(run.template, template=template.numpy())
    metrics = {"final_rec": history["rec"][-1], "initial_rec": history["rec"][0],
               "test_recon_mse": reconstruction_mse(vae, (r.cine for r in ds.records("test")))}
    plots.plot_history({"rec": history["rec"]}, run.root / "figures" / "vae_loss.png", "VAE reconstruction")
    write_manifest(run, "train-vae", asdict(cfg), [run.data], [_npz(run.vae), run.template], metrics)
    return metrics


def stage_train_amdf(run: Run) -> dict:
    ds = run.require_data()
    run.require_checkpoint(run.pa_mae, "train-pamae")
    run.require_checkpoint(run.vae, "train-vae")
    template = run.require_template()
    pamae, _ = load_pa_mae(run.pa_mae)
    vae, _ = load_vae(run.vae)
    cfg = _seeded(run.cfg.amdf, run.cfg.seed)
    _, history = train_amdf(ds, vae, pamae, cfg, template, checkpoint=run.amdf)
    metrics = {"final_loss": history["loss"][-1], "initial_loss": history["loss"][0]}
    plots.plot_history({"loss": history["loss"]}, run.root / "figures" / "amdf_loss.png", "flow matching")
    write_manifest(run, "train-amdf", asdict(cfg),
                   [run.data, _npz(run.pa_mae), _npz(run.vae), run.template], [_npz(run.amdf)], metrics)
    return metrics


def recovery_metrics(ids: Sequence[str], generated: np.ndarray, dataset: PhantomDataset) -> tuple[dict, list[dict]]:
    """Radial-profile oracle on generated cines against the conditioning parameters."""
    rows = []
    for rid, cine in zip(ids, generated):
        p = dataset.params(rid)
        r = measure_radius_curve(cine)
        rows.append({
            "id": rid,
            "heart_rate_bpm": p.heart_rate_bpm,
            "true_contraction": p.contraction_amplitude,
            "recovered_contraction": estimate_contraction(cine),
            "radius_gap_px": float(r[0] - r[len(r) // 2]),
        })
    true = np.array([r["true_contraction"] for r in rows])
    est = np.array([r["recovered_contraction"] for r in rows])
    gap = np.array([r["radius_gap_px"] for r in rows])
    ok = np.isfinite(gap)
    summary = {
        "n": len(rows),
        "pearson_r": pearson_r(est, true),
        "mae": metric_mae(est, true),
        "radius_gap_pearson_r": pearson_r(gap[ok], true[ok]) if ok.sum() >= 2 else None,
        "within_0.1_fraction": float(np.mean(np.abs(est - true) <= 0.1)),
    }
    return summary, rows


def stage_generate(run: Run) -> dict:
    ds = run.require_data()
    pamae, vae, net, template = run.load_models()
    gcfg = run.cfg.generate
    ids = ds.ids(gcfg.split)[:gcfg.n_records]
    if not ids:
        raise DataError(f"split {gcfg.split!r} is empty")
    ecgs = np.stack([ds.load(rid).ecg for rid in ids])
    cines, fallback = generate_records(net, vae, pamae, ecgs, template, seed=run.cfg.seed, batch=gcfg.batch)

    out = run.generate_dir
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out / "cines.npz", ids=np.array(ids), cines=cines.astype(np.float32))
    summary, rows = recovery_metrics(ids, cines, ds)
    summary["phase_fallbacks"] = len(fallback)
    for k in fallback:
        rows[k]["phase_fallback"] = True
    report = {"config_hash": run.cfg.content_hash(), "seed": run.cfg.seed, "split": gcfg.split,
              "steps": net.cfg.steps, "alpha": net.cfg.alpha, "summary": summary, "records": rows}
    _write_json(out / "report.json", report)
    _write_csv(out / "report.csv", rows)

    plots.plot_recovery([r["true_contraction"] for r in rows], [r["recovered_contraction"] for r in rows],
                        out / "recovery.png", summary["pearson_r"], summary["mae"])
    k = min(gcfg.n_previews, len(ids))
    real = [ds.load(rid).cine for rid in ids[:k]]
    if k:
        plots.plot_radius_curves([measure_radius_curve(c) for c in real],
                                 [measure_radius_curve(c) for c in cines[:k]], ids[:k], out / "radius_curves.png")
        pairs = [c for pair in zip(real, cines[:k]) for c in pair]
        labels = [f"{rid} {tag}" for rid in ids[:k] for tag in ("phantom", "generated")]
        plots.plot_frames(pairs, labels, out / "frames.png")
    for rid, cine in zip(ids[:k], cines[:k]):
        plots.save_gif(cine, out / "previews" / f"{rid}.gif")

    write_manifest(run, "generate", asdict(gcfg),
                   [run.data, _npz(run.pa_mae), _npz(run.vae), run.template, _npz(run.amdf)],
                   [out / "cines.npz", out / "report.json"], summary)
    return summary


# --- downstream evaluation -----------------------------------------------------------

def _ratio_key(ratio: float) -> str:
    return f"{int(round(100 * ratio))}%"


def synthetic_pool(run: Run, ds: PhantomDataset, models, dcfg: DownstreamConfig) -> tuple[np.ndarray, list[str]]:
    """Generate (or reuse) the nested synthetic pool from training ECGs."""
    count = int(round(max(dcfg.ratios) * dcfg.n_real))
    path = run.eval_dir / "pool.npz"
    sources = synthetic_sources(ds.ids("train"), count, seed=run.cfg.seed)
    if path.exists():
        with np.load(path) as z:
            if [str(s) for s in z["sources"]] == sources and int(z["steps"]) == dcfg.gen_steps:
                return z["cines"], sources
    pamae, vae, net, template = models
    if count == 0:
        cines = np.zeros((0, 1, 50, 96, 96), dtype=np.float32)
    else:
        ecgs = np.stack([ds.load(rid).ecg for rid in sources])
        cines, fallback = generate_records(net, vae, pamae, ecgs, template, steps=dcfg.gen_steps,
                                           seed=run.cfg.seed + 1, batch=run.cfg.generate.batch)
        cines = cines.astype(np.float32)
        if fallback:
            log.warning("synthetic pool: %d of %d records used the whole-record window", len(fallback), count)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, cines=cines, sources=np.array(sources), steps=dcfg.gen_steps)
    return cines, sources


def _tasks(dcfg: DownstreamConfig):
    out = []
    for name in dcfg.tasks:
        if name == "classification":
            out.append(classification_task(dcfg.disease_threshold))
        elif name == "regression":
            out.append(regression_task())
        else:
            raise DataError(f"unknown downstream task {name!r}")
    return out


def stage_eval(run: Run) -> dict:
    ds = run.require_data()
    models = run.load_models()
    dcfg = run.cfg.downstream
    real_ids = ds.ids("train")[:dcfg.n_real]
    if len(real_ids) < dcfg.n_real:
        raise DataError(f"training split holds {len(real_ids)} records, n_real={dcfg.n_real}")
    real = np.stack([ds.load(rid).cine for rid in real_ids])
    pool, sources = synthetic_pool(run, ds, models, dcfg)

    eval_ids = ds.ids(dcfg.eval_split)
    leaked = set(sources) & set(eval_ids)
    if leaked:
        raise DataError(f"synthetic sources overlap the evaluation split: {sorted(leaked)[:5]}")
    eval_cines = np.stack([ds.load(rid).cine for rid in eval_ids])
    eval_params = [ds.params(rid) for rid in eval_ids]
    tasks = _tasks(dcfg)
    seeds = [run.cfg.seed + s for s in dcfg.seeds]

    settings: list[tuple[str, float | None]] = [(_ratio_key(r), r) for r in dcfg.ratios]
    if dcfg.include_scratch:
        settings.insert(0, ("scratch", None))

    results: dict = {t.kind: {} for t in tasks}
    pretrain_loss: dict = {}
    for label, ratio in settings:
        for t in tasks:
            results[t.kind][label] = {"per_seed": []}
        for seed in seeds:
            state = None
            if ratio is not None:
                mix = build_mixture(real, pool, ratio, real_ids, sources, dcfg.ratios)
                encoder, history = pretrain_video_mae(mix.cines(), dcfg, seed)
                state = encoder.state_dict()
                save_checkpoint(run.eval_dir / "encoders" / f"mae_{label.rstrip('%')}_seed{seed}", encoder,
                                "video_mae", _jsonable(asdict(dcfg)), history)
                pretrain_loss.setdefault(label, []).append({"seed": seed, "first": history["loss"][0],
                                                            "last": history["loss"][-1]})
                log.info("eval %s seed %d: pretrained on %d cines", label, seed, len(mix))
            for t in tasks:
                res = finetune_and_eval(state, dcfg, eval_cines, eval_params, t, seed)
                res["seed"] = seed
                results[t.kind][label]["per_seed"].append(res)
        for t in tasks:
            per_seed = results[t.kind][label]["per_seed"]
            keys = per_seed[0]["summary"].keys()
            results[t.kind][label]["across_seeds"] = {
                k: mean_std([r["summary"][k]["mean"] for r in per_seed]) for k in keys}

    report = {
        "config_hash": run.cfg.content_hash(),
        "downstream_config": _jsonable(asdict(dcfg)),
        "seeds": seeds,
        "n_real": dcfg.n_real,
        "eval_split": dcfg.eval_split,
        "n_eval": len(eval_ids),
        "synthetic_sources": sources,
        "pretrain_loss": pretrain_loss,
        "results": results,
    }
    out = run.eval_dir
    _write_json(out / "report.json", report)
    rows = []
    for kind, by_setting in results.items():
        for label, block in by_setting.items():
            for r in block["per_seed"]:
                for k, fold in enumerate(r["folds"]):
                    for metric, value in fold.items():
                        rows.append({"task": kind, "setting": label, "seed": r["seed"], "fold": k,
                                     "metric": metric, "value": value})
    _write_csv(out / "report.csv", rows)
    _eval_figures(out, dcfg, results)
    summary = {kind: {label: {k: v["mean"] for k, v in block["across_seeds"].items()}
                      for label, block in by_setting.items()} for kind, by_setting in results.items()}
    write_manifest(run, "eval", _jsonable(asdict(dcfg)),
                   [run.data, _npz(run.pa_mae), _npz(run.vae), run.template, _npz(run.amdf)],
                   [out / "pool.npz", out / "report.json"], summary)
    return summary


def _eval_figures(out: Path, dcfg: DownstreamConfig, results: dict):
    labels = [_ratio_key(r) for r in dcfg.ratios]
    if "classification" in results:
        block = results["classification"]
        curves = {m: ([block[l]["across_seeds"][m]["mean"] for l in labels],
                      [block[l]["across_seeds"][m]["std"] for l in labels]) for m in ("acc", "auc")}
        plots.plot_mixing(dcfg.ratios, curves, out / "classification.png", "score")
    if "regression" in results:
        block = results["regression"]
        metrics = [k for k in block[labels[0]]["across_seeds"] if k.endswith("/r2")]
        curves = {m: ([block[l]["across_seeds"][m]["mean"] for l in labels],
                      [block[l]["across_seeds"][m]["std"] for l in labels]) for m in metrics}
        plots.plot_mixing(dcfg.ratios, curves, out / "regression.png", "R^2")


def _jsonable(d):
    return json.loads(json.dumps(d, default=list))


# --- ablations -------------------------------------------------------------------------

def _same_config(stem: Path, kind: str, cfg: dict) -> bool:
    if not checkpoint_exists(stem):
        return False
    meta = json.loads(stem.with_suffix(".json").read_text())
    return meta.get("kind") == kind and _jsonable(meta.get("config")) == _jsonable(cfg)


def _ablation_pamae(run: Run, ds: PhantomDataset, base: PaMae) -> PaMae:
    """PA-MAE retrained without the phase head (cached under ablate/)."""
    cfg = dataclasses.replace(base.cfg, use_phase_head=False)
    stem = run.ablate_dir / "pa_mae_no_phase_head"
    if _same_config(stem, "pa_mae", asdict(cfg)):
        return load_pa_mae(stem)[0]
    model, _ = train_pa_mae(ds, cfg, checkpoint=stem)
    return model


def _flow_variant(run: Run, name: str, cfg: FlowConfig, ds, vae, pamae, template, data) -> VelocityNet:
    """Train (or reuse) a flow net; the main checkpoint is reused when configs match."""
    stem = run.ablate_dir / name
    if _same_config(stem, "amdf", asdict(cfg)):
        return load_amdf(stem)[0]
    if _same_config(run.amdf, "amdf", asdict(cfg)):
        return load_amdf(run.amdf)[0]
    net, _ = train_amdf(ds, vae, pamae, cfg, template, data, checkpoint=stem)
    return net


def stage_ablate(run: Run) -> dict:
    ds = run.require_data()
    pamae, vae, _, template = run.load_models()
    acfg = run.cfg.ablate
    base = _seeded(run.cfg.amdf, run.cfg.seed)
    gcfg = run.cfg.generate
    ids = ds.ids(gcfg.split)[:gcfg.n_records]
    ecgs = np.stack([ds.load(rid).ecg for rid in ids])

    flow_data = {}

    def data_for(model: PaMae, phase_aware: bool, key: str):
        if key not in flow_data:
            flow_data[key] = prepare_flow_data(ds, vae, model, "train", phase_aware)
        return flow_data[key]

    def evaluate(name: str, cfg: FlowConfig, model: PaMae, data_key: str) -> dict:
        net = _flow_variant(run, name, cfg, ds, vae, model, template, data_for(model, cfg.phase_aware, data_key))
        cines, fallback = generate_records(net, vae, model, ecgs, template, seed=run.cfg.seed, batch=gcfg.batch)
        summary, _ = recovery_metrics(ids, cines, ds)
        summary["phase_fallbacks"] = len(fallback)
        return summary

    rows = []
    for variant in acfg.variants:
        model, key = pamae, "phase"
        if variant == "no_phase_head":
            model, key = _ablation_pamae(run, ds, pamae), "no_phase_head"
        for s in acfg.seeds:
            changes = {"seed": base.seed + s}
            if variant == "no_template":
                changes["use_template"] = False
            elif variant == "no_condition":
                changes["use_condition"] = False
            elif variant == "no_phase_head":
                changes["phase_aware"] = False
            cfg = dataclasses.replace(base, **changes)
            m = evaluate(f"{variant}_seed{cfg.seed}", cfg, model, key)
            rows.append({"sweep": "ablation", "variant": variant, "seed": cfg.seed, "alpha": cfg.alpha, **m})
            log.info("ablate %s seed %d: r %.3f mae %.3f", variant, cfg.seed, m["pearson_r"], m["mae"])

    for alpha in acfg.alphas:
        cfg = dataclasses.replace(base, alpha=alpha)
        m = evaluate(f"alpha{alpha:g}_seed{cfg.seed}", cfg, pamae, "phase")
        rows.append({"sweep": "alpha", "variant": f"alpha={alpha:g}", "seed": cfg.seed, "alpha": alpha, **m})
        log.info("ablate alpha %.2f: r %.3f mae %.3f", alpha, m["pearson_r"], m["mae"])

    table = {}
    for variant in acfg.variants:
        sel = [r for r in rows if r["sweep"] == "ablation" and r["variant"] == variant]
        table[variant] = {"pearson_r": mean_std([r["pearson_r"] for r in sel]),
                          "mae": mean_std([r["mae"] for r in sel]),
                          "seeds": [r["seed"] for r in sel]}
    alpha_rows = [r for r in rows if r["sweep"] == "alpha"]
    report = {"config_hash": run.cfg.content_hash(), "seeds": [base.seed + s for s in acfg.seeds],
              "n_records": len(ids), "table": table,
              "alpha_sweep": {f"{r['alpha']:g}": {"pearson_r": r["pearson_r"], "mae": r["mae"]} for r in alpha_rows},
              "rows": rows}
    out = run.ablate_dir
    _write_json(out / "report.json", report)
    _write_csv(out / "report.csv", rows)
    if table:
        names = list(table)
        plots.plot_ablation(names, [table[n]["pearson_r"]["mean"] for n in names],
                            [table[n]["pearson_r"]["std"] for n in names], out / "ablation.png")
    if alpha_rows:
        plots.plot_alpha_sweep([r["alpha"] for r in alpha_rows], [r["pearson_r"] for r in alpha_rows],
                               out / "alpha_sweep.png")
    write_manifest(run, "ablate", _jsonable({"ablate": asdict(acfg), "amdf": asdict(base)}),
                   [run.data, _npz(run.pa_mae), _npz(run.vae), run.template], [out / "report.json"],
                   {"table": {k: v["pearson_r"]["mean"] for k, v in table.items()}})
    return report


STAGE_FUNCS: dict[str, Callable[[Run], dict]] = {
    "data": stage_data,
    "train-pamae": stage_train_pamae,
    "train-vae": stage_train_vae,
    "train-amdf": stage_train_amdf,
    "generate": stage_generate,
    "eval": stage_eval,
    "ablate": stage_ablate,
}

PIPELINE = ("data", "train-pamae", "train-vae", "train-amdf", "generate", "eval")


def run_stage(stage: str, cfg: RunConfig, run_dir: str | os.PathLike) -> dict:
    run = Run(run_dir, cfg)
    run.prepare()
    torch.manual_seed(cfg.seed)
    log.info("stage %s in %s", stage, run.root)
    return STAGE_FUNCS[stage](run)


def run_pipeline(cfg: RunConfig, run_dir, stages: Sequence[str] = PIPELINE) -> dict:
    return {stage: run_stage(stage, cfg, run_dir) for stage in stages}
