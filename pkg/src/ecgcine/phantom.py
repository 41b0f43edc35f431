"""Coupled ECG / cine phantom generator and its on-disk dataset format.

Each subject is described by a handful of parameters. The ECG is a sum of
three Gaussian bumps per beat (P, QRS, T) mixed into 12 leads by a fixed
matrix; the cine is a bright annulus whose inner radius contracts over one
cardiac cycle. The same parameters drive both, so ECG morphology carries
information about the video:

* QRS amplitude grows with ``base_inner_radius``
* QRS width grows with ``wall_thickness``
* T-wave amplitude grows with ``contraction_amplitude``
* T-wave timing (and end-systole in the cine) follows the R-R interval
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError, ParameterError, ShapeError

FS = 500
N_LEADS = 12
N_SAMPLES = 5000
N_FRAMES = 50
FRAME_SIZE = 96

LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF",
              "V1", "V2", "V3", "V4", "V5", "V6")
LEAD_II = 1

# rows: leads, columns: (P, QRS, T) gains
LEAD_GAINS = np.array([
    [0.60, 0.70, 0.50],
    [1.00, 1.00, 1.00],
    [0.40, 0.30, 0.50],
    [-0.80, -0.85, -0.75],
    [0.10, 0.20, 0.05],
    [0.70, 0.65, 0.75],
    [0.30, -0.60, -0.20],
    [0.40, -0.30, 0.60],
    [0.40, 0.40, 0.80],
    [0.50, 1.10, 0.90],
    [0.50, 1.00, 0.70],
    [0.50, 0.80, 0.50],
])

RANGES = {
    "heart_rate_bpm": (45.0, 110.0),
    "contraction_amplitude": (0.1, 0.5),
    "base_inner_radius": (0.15, 0.3),
    "wall_thickness": (0.05, 0.15),
}
NOISE_RANGE = (0.0, 0.05)

EDGE_MARGIN_S = 0.1

BACKGROUND = 0.1
MYOCARDIUM = 0.9


@dataclass(frozen=True)
class PhantomParams:
    heart_rate_bpm: float = 60.0
    contraction_amplitude: float = 0.3
    base_inner_radius: float = 0.22
    wall_thickness: float = 0.1
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name, (lo, hi) in RANGES.items():
            value = getattr(self, name)
            if not (np.isfinite(value) and lo <= value <= hi):
                raise ParameterError(f"{name}={value} outside [{lo}, {hi}]")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise ParameterError(f"noise_sigma={self.noise_sigma} must be >= 0")

    @property
    def rr_seconds(self) -> float:
        return 60.0 / self.heart_rate_bpm

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        return cls(**d)


@dataclass
class EcgRecord:
    signal: np.ndarray
    r_peak_samples: list[int] = field(default_factory=list)
    sampling_rate_hz: int = FS

    def __post_init__(self):
        if self.signal.shape != (N_LEADS, N_SAMPLES):
            raise ShapeError(f"ECG must be {N_LEADS}x{N_SAMPLES}, got {self.signal.shape}")


def sample_params(rng: np.random.Generator) -> PhantomParams:
    """Draw subject parameters uniformly from the allowed ranges."""
    kw = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in RANGES.items()}
    return PhantomParams(**kw, noise_sigma=float(rng.uniform(*NOISE_RANGE)),
                         seed=int(rng.integers(0, 2**31 - 1)))


def t_wave_delay(rr: float) -> float:
    """Seconds from R peak to T-wave peak; shortens with heart rate."""
    return 0.3 * math.sqrt(rr)


def end_systole_fraction(heart_rate_bpm: float) -> float:
    """Fraction of the R-R interval at which the inner radius is smallest."""
    rr = 60.0 / heart_rate_bpm
    return (t_wave_delay(rr) + 0.05) / rr


def _wave_shapes(params: PhantomParams) -> list[tuple[float, float, float]]:
    # (offset from R in seconds, sigma in seconds, amplitude)
    rr = params.rr_seconds
    return [
        (-0.16, 0.025, 0.15),
        (0.0, 0.006 + 0.04 * params.wall_thickness, 0.6 + 2.0 * params.base_inner_radius),
        (t_wave_delay(rr), 0.04, 0.1 + 1.0 * params.contraction_amplitude),
    ]


def generate_ecg(params: PhantomParams) -> EcgRecord:
    rng = np.random.default_rng(params.seed)
    rr = params.rr_seconds * FS
    margin = EDGE_MARGIN_S * FS
    # rejection keeps every R peak at least ``margin`` samples inside the record
    while True:
        first = rng.uniform(0.0, rr)
        last = first + math.floor((N_SAMPLES - 1 - first) / rr) * rr
        if first >= margin and last <= N_SAMPLES - 1 - margin:
            break
    t = np.arange(N_SAMPLES, dtype=np.float64)

    # beats outside the record still contribute their P/T tails
    centers = [int(round(first + k * rr)) for k in range(-1, int(N_SAMPLES / rr) + 3)]
    waves = np.zeros((3, N_SAMPLES))
    for c in centers:
        for i, (off, sigma, amp) in enumerate(_wave_shapes(params)):
            mu = c + off * FS
            s = sigma * FS
            waves[i] += amp * np.exp(-0.5 * ((t - mu) / s) ** 2)

    signal = LEAD_GAINS @ waves
    if params.noise_sigma > 0:
        signal = signal + rng.normal(0.0, params.noise_sigma, size=signal.shape)
    peaks = [c for c in centers if 0 <= c < N_SAMPLES]
    return EcgRecord(signal.astype(np.float32), peaks)


def cine_phases(heart_rate_bpm: float, n_frames: int = N_FRAMES) -> np.ndarray:
    """Cardiac phase of each cine frame, frames evenly spaced in time over one R-R.

    Phase reaches pi at end-systole, whose time fraction depends on heart rate,
    so the motion profile of the video reveals the rate.
    """
    s = end_systole_fraction(heart_rate_bpm)
    u = np.arange(n_frames) / n_frames
    return np.where(u <= s, np.pi * u / s, np.pi + np.pi * (u - s) / (1 - s))


def inner_radius_px(params: PhantomParams, phase: np.ndarray) -> np.ndarray:
    frac = params.base_inner_radius * (1 - params.contraction_amplitude * (1 - np.cos(phase)) / 2)
    return frac * FRAME_SIZE


def generate_cine(params: PhantomParams, phases: Sequence[float] | None = None) -> np.ndarray:
    """Render the annulus video, shape ``(1, 50, 96, 96)``; frame 0 is the R peak."""
    if phases is None:
        phases = cine_phases(params.heart_rate_bpm)
    phases = np.asarray(phases, dtype=np.float64)
    if phases.shape != (N_FRAMES,):
        raise ShapeError(f"need {N_FRAMES} frame phases, got {phases.shape}")
    c = (FRAME_SIZE - 1) / 2
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE]
    r = np.hypot(yy - c, xx - c)[None]
    r_in = inner_radius_px(params, phases)[:, None, None]
    r_out = r_in + params.wall_thickness * FRAME_SIZE
    # one-pixel linear ramps put the 0.5 level exactly on each edge
    ring = np.clip(r - r_in + 0.5, 0, 1) * np.clip(r_out - r + 0.5, 0, 1)
    frames = BACKGROUND + (MYOCARDIUM - BACKGROUND) * ring
    return frames[None].astype(np.float32)


# --- radial-profile oracle ---------------------------------------------------

def radial_profile(frame: np.ndarray, n_rays: int = 64, step: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Angular mean of bilinear samples along rays from the image centre."""
    c = (FRAME_SIZE - 1) / 2
    radii = np.arange(0.0, c, step)
    ang = np.linspace(0, 2 * np.pi, n_rays, endpoint=False)
    ys = c + radii[None, :] * np.sin(ang)[:, None]
    xs = c + radii[None, :] * np.cos(ang)[:, None]
    samples = ndimage.map_coordinates(np.asarray(frame, dtype=np.float64), [ys, xs], order=1)
    return radii, samples.mean(axis=0)


def measure_inner_radius(frame: np.ndarray, level: float = 0.5) -> float:
    """Radius (pixels) of the first upward crossing of ``level``; NaN if none."""
    radii, prof = radial_profile(frame)
    above = np.nonzero(prof >= level)[0]
    if above.size == 0 or above[0] == 0:
        return float("nan")
    i = above[0]
    r0, r1, p0, p1 = radii[i - 1], radii[i], prof[i - 1], prof[i]
    return float(r0 + (level - p0) * (r1 - r0) / (p1 - p0))


def measure_radius_curve(cine: np.ndarray) -> np.ndarray:
    frames = np.asarray(cine).reshape(-1, FRAME_SIZE, FRAME_SIZE)
    return np.array([measure_inner_radius(f) for f in frames])


def estimate_contraction(cine: np.ndarray, k: int = 3) -> float:
    """Contraction amplitude recovered from a video: 1 - r_min / r_max.

    Extremes are the means of the ``k`` smallest and largest per-frame radii.
    Returns 0 when no edge is visible.
    """
    r = measure_radius_curve(cine)
    r = np.sort(r[np.isfinite(r)])
    if r.size < 2 * k or r[-k:].mean() <= 0:
        return 0.0
    return float(1.0 - r[:k].mean() / r[-k:].mean())


# --- dataset archive ----------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class PhantomRecord:
    id: str
    split: str
    params: PhantomParams
    ecg: np.ndarray
    cine: np.ndarray
    r_peaks: np.ndarray


def make_record(rid: str, split: str, params: PhantomParams) -> PhantomRecord:
    ecg = generate_ecg(params)
    return PhantomRecord(rid, split, params, ecg.signal, generate_cine(params),
                         np.asarray(ecg.r_peak_samples, dtype=np.int64))


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if n < 10:
        raise DataError(f"need at least 10 subjects to split, got {n}")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ParameterError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_train = int(math.floor(n * fractions[0] + 1e-9))
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def build_dataset(n: int, path: str | Path, fractions: Sequence[float] = (0.7, 0.1, 0.2),
                  seed: int = 0) -> "PhantomDataset":
    """Sample ``n`` subjects, render them and write the split archive under ``path``."""
    counts = split_counts(n, fractions)
    rng = np.random.default_rng(seed)
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for s in SPLITS:
            (root / s).mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc

    meta = {"n": n, "fractions": list(fractions), "seed": seed, "splits": {}, "params": {}}
    i = 0
    for split, count in zip(SPLITS, counts):
        ids = []
        for _ in range(count):
            rid = f"{i:05d}"
            i += 1
            params = sample_params(rng)
            rec = make_record(rid, split, params)
            np.savez_compressed(root / split / f"{rid}.npz", ecg=rec.ecg, cine=rec.cine, r_peaks=rec.r_peaks)
            ids.append(rid)
            meta["params"][rid] = params.to_dict()
        meta["splits"][split] = ids
    (root / "metadata.json").write_text(json.dumps(meta, indent=1))
    return PhantomDataset(root)


class PhantomDataset:
    """Read-side view of a dataset archive; records are loaded lazily."""

    def __init__(self, path: str | Path):
        self.root = Path(path)
        meta_path = self.root / "metadata.json"
        if not meta_path.exists():
            raise DataError(f"no dataset metadata at {meta_path}")
        self.meta = json.loads(meta_path.read_text())
        self.splits: dict[str, list[str]] = self.meta["splits"]
        self._split_of = {rid: s for s, ids in self.splits.items() for rid in ids}

    def ids(self, split: str) -> list[str]:
        return list(self.splits.get(split, []))

    def params(self, rid: str) -> PhantomParams:
        return PhantomParams.from_dict(self.meta["params"][rid])

    def load(self, rid: str) -> PhantomRecord:
        split = self._split_of[rid]
        with np.load(self.root / split / f"{rid}.npz") as z:
            return PhantomRecord(rid, split, self.params(rid), z["ecg"], z["cine"], z["r_peaks"])

    def records(self, split: str, limit: int | None = None) -> Iterator[PhantomRecord]:
        for rid in self.ids(split)[:limit]:
            yield self.load(rid)

    def stack(self, split: str, key: str, limit: int | None = None) -> np.ndarray:
        arrays = [getattr(r, key) for r in self.records(split, limit)]
        if not arrays:
            raise DataError(f"split {split!r} is empty")
        return np.stack(arrays)
