"""Cardiac-phase machinery: R-peak detection, phase labels, cycle extraction
and 1-D ROI-align resampling of feature sequences onto the cine frame grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .errors import AlignmentError, ShapeError
from .phantom import FS, LEAD_II, N_FRAMES, EcgRecord

TWO_PI = 2 * np.pi
_BELOW_TWO_PI = np.nextafter(TWO_PI, 0)


@dataclass
class PhaseSequence:
    """Per-step cardiac phase in [0, 2pi) with its [sin, cos] encoding."""

    phase: np.ndarray

    @property
    def encoding(self) -> np.ndarray:
        return np.stack([np.sin(self.phase), np.cos(self.phase)], axis=-1)

    @classmethod
    def from_encoding(cls, enc) -> "PhaseSequence":
        enc = np.asarray(enc, dtype=np.float64)
        return cls(np.mod(np.arctan2(enc[..., 0], enc[..., 1]), TWO_PI))

    def __len__(self):
        return len(self.phase)


@dataclass(frozen=True)
class CardiacCycle:
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


# --- R-peak detection ---------------------------------------------------------

BAND = (5.0, 20.0)
FIR_TAPS = 101
INTEGRATION_S = 0.150
REFRACTORY_S = 0.200
ROLLING_MAX_S = 2.5
REFINE_S = 0.080


def _lead(record) -> np.ndarray:
    sig = record.signal if isinstance(record, EcgRecord) else np.asarray(record)
    if sig.ndim != 2 or sig.shape[0] != 12:
        raise ShapeError(f"expected a 12-lead signal, got shape {sig.shape}")
    return np.asarray(sig[LEAD_II], dtype=np.float64)


def detect_r_peaks(record, fs: int = FS) -> list[int]:
    """Pan-Tompkins style detector on lead II.

    Band-pass, differentiate, square, integrate over 150 ms, keep maxima
    above half the rolling maximum with a 200 ms refractory period, then snap
    each detection to the lead-II maximum nearby.
    """
    x = _lead(record)
    x = x - np.median(x)
    taps = signal.firwin(FIR_TAPS, BAND, pass_zero=False, fs=fs)
    band = signal.filtfilt(taps, [1.0], x)
    energy = np.gradient(band) ** 2
    w = int(INTEGRATION_S * fs)
    integrated = np.convolve(energy, np.ones(w) / w, mode="same")

    peak_level = integrated.max()
    if not np.isfinite(peak_level) or peak_level <= 1e-12:
        raise AlignmentError("flat signal: no R peaks")
    threshold = 0.5 * ndimage.maximum_filter1d(integrated, size=int(ROLLING_MAX_S * fs))

    # zero padding lets maxima at the very edges register as peaks
    padded = np.concatenate([[0.0], integrated, [0.0]])
    cand, _ = signal.find_peaks(padded, distance=int(REFRACTORY_S * fs))
    cand = cand - 1
    cand = cand[integrated[cand] >= threshold[cand]]

    lowpass = signal.filtfilt(signal.firwin(31, 40.0, fs=fs), [1.0], x)
    half = int(REFINE_S * fs / 2)
    peaks = []
    for c in cand:
        lo, hi = max(0, c - half), min(len(x), c + half + 1)
        p = lo + int(np.argmax(lowpass[lo:hi]))
        if not peaks or p - peaks[-1] >= int(REFRACTORY_S * fs):
            peaks.append(p)
    # QRS complexes cut off by the record edge show up as low, edge-bound maxima
    if peaks:
        heights = lowpass[peaks]
        ref = np.median(heights)
        peaks = [p for p, h in zip(peaks, heights) if h >= 0.5 * ref and 0 < p < len(x) - 1]
    if len(peaks) < 2:
        raise AlignmentError(f"found {len(peaks)} R peak(s); need at least 2 for a complete cycle")
    return peaks


# --- labels and loss ----------------------------------------------------------

def phase_labels(r_peaks, length: int) -> PhaseSequence:
    """Phase rising linearly from 0 at each R peak to 2pi at the next.

    Samples outside the first/last peak are extrapolated at the adjacent
    R-R rate and clamped into [0, 2pi).
    """
    p = np.asarray(r_peaks, dtype=np.int64)
    if p.size < 2:
        raise AlignmentError("need at least 2 R peaks for phase labels")
    if np.any(np.diff(p) <= 0) or p[0] < 0 or p[-1] >= length:
        raise AlignmentError("R peaks must be strictly increasing and inside the record")
    i = np.arange(length)
    k = np.clip(np.searchsorted(p, i, side="right") - 1, 0, p.size - 2)
    rr = (p[k + 1] - p[k]).astype(np.float64)
    phase = TWO_PI * (i - p[k]) / rr

    head = i < p[0]
    phase[head] = TWO_PI * (1 - (p[0] - i[head]) / (p[1] - p[0]))
    tail = i >= p[-1]
    phase[tail] = TWO_PI * (i[tail] - p[-1]) / (p[-1] - p[-2])
    return PhaseSequence(np.clip(phase, 0.0, _BELOW_TWO_PI))


def token_phase_labels(r_peaks, n_samples: int, patch: int) -> PhaseSequence:
    """Sample-resolution labels read at each token's centre sample (patch*k + patch//2)."""
    full = phase_labels(r_peaks, n_samples)
    centers = np.arange(n_samples // patch) * patch + patch // 2
    return PhaseSequence(full.phase[centers])


def phase_loss(predicted, ground_truth):
    """Mean over steps of the squared distance between [sin, cos] encodings.

    Accepts PhaseSequence objects or encoding arrays/tensors of shape
    ``(..., T', 2)``; leading batch dimensions are kept.
    """
    a = predicted.encoding if isinstance(predicted, PhaseSequence) else predicted
    b = ground_truth.encoding if isinstance(ground_truth, PhaseSequence) else ground_truth
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"phase length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).sum(-1).mean(-1)


def angular_error(predicted, ground_truth) -> np.ndarray:
    a = predicted.phase if isinstance(predicted, PhaseSequence) else np.asarray(predicted)
    b = ground_truth.phase if isinstance(ground_truth, PhaseSequence) else np.asarray(ground_truth)
    d = np.mod(a - b + np.pi, TWO_PI) - np.pi
    return np.abs(d)


# --- cycles and resampling ----------------------------------------------------

def extract_cycles(phase, tol: float = 1e-9) -> list[CardiacCycle]:
    """One cycle per complete 2pi traversal whose both ends lie in the sequence.

    The phase is unwrapped and made non-decreasing, so jitter around a wrap
    cannot create spurious boundaries. A boundary is the first step at which
    the unwrapped phase reaches a new multiple of 2pi; step 0 counts only if
    it sits exactly on phase 0.
    """
    ph = phase.phase if isinstance(phase, PhaseSequence) else np.asarray(phase, dtype=np.float64)
    if ph.size == 0:
        raise AlignmentError("empty phase sequence")
    u = np.maximum.accumulate(np.unwrap(np.mod(ph, TWO_PI)))
    level = np.floor((u + tol) / TWO_PI)
    bounds = list(np.nonzero(np.diff(level) > 0)[0] + 1)
    if np.mod(ph[0], TWO_PI) <= tol or TWO_PI - np.mod(ph[0], TWO_PI) <= tol:
        bounds.insert(0, 0)
    cycles = [CardiacCycle(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    if not cycles:
        raise AlignmentError("no complete cardiac cycle in phase sequence")
    return cycles


def roi_align_matrix(length: int, cycle: CardiacCycle, out_frames: int = N_FRAMES,
                     samples_per_bin: int = 2) -> np.ndarray:
    """Linear map ``(out_frames, length)`` implementing 1-D ROI align over the cycle.

    Bin j covers ``[start + j*w, start + (j+1)*w)``; its value averages linear
    interpolations taken at the bin's interior points (1/4 and 3/4 of the bin
    for two samples).
    """
    if cycle.length < 2:
        raise AlignmentError(f"degenerate cycle of length {cycle.length}")
    if cycle.start < 0 or cycle.end > length:
        raise AlignmentError(f"cycle {cycle} outside feature length {length}")
    w = cycle.length / out_frames
    offs = (np.arange(samples_per_bin) + 0.5) / samples_per_bin
    pos = cycle.start + (np.arange(out_frames)[:, None] + offs[None, :]) * w
    pos = np.clip(pos, 0, length - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, length - 1)
    frac = pos - lo
    m = np.zeros((out_frames, length))
    rows = np.repeat(np.arange(out_frames), samples_per_bin)
    np.add.at(m, (rows, lo.ravel()), (1 - frac).ravel() / samples_per_bin)
    np.add.at(m, (rows, hi.ravel()), frac.ravel() / samples_per_bin)
    return m


def resample_cycle(features, cycle: CardiacCycle, out_frames: int = N_FRAMES) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeError(f"features must be (T', D), got {f.shape}")
    return roi_align_matrix(f.shape[0], cycle, out_frames) @ f


def condition_from_ecg(features, phase, out_frames: int = N_FRAMES) -> np.ndarray:
    """Average of the resampled feature windows over every complete cycle."""
    cycles = extract_cycles(phase)
    return np.mean([resample_cycle(features, c, out_frames) for c in cycles], axis=0)
