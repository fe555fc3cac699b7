"""Objective evaluation metrics: mel-cepstral distortion, SSIM, and the
GPE/VDE/FFE pitch-error family.

All functions compare frame-aligned inputs: equal shapes are a
precondition, never fixed up by warping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tokens import atomic_write_text

# conventional mel-cepstrum order for speech evaluation
DEFAULT_CEPSTRAL_COEFFS = 24

# 10*sqrt(2)/ln(10): converts the plain frame-averaged Euclidean form to dB
MCD_DB_FACTOR = 10.0 * math.sqrt(2.0) / math.log(10.0)

DEFAULT_GPE_THRESHOLD = 0.2
DEFAULT_SSIM_WINDOW = 7


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def mcd(ref, syn, scale_db: bool = False) -> float:
    """Frame-averaged Euclidean distance over cepstral coefficients.

    Computed in the plain unscaled form; ``scale_db`` applies the
    conventional 10*sqrt(2)/ln(10) factor for comparison with tools that
    report dB.
    """
    a = _as_matrix(ref, "ref")
    b = _as_matrix(syn, "syn")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: ref {a.shape} vs syn {b.shape}")
    per_frame = np.sqrt(((a - b) ** 2).sum(axis=1))
    value = float(per_frame.mean())
    return value * MCD_DB_FACTOR if scale_db else value


def ssim(ref, syn, window: int = DEFAULT_SSIM_WINDOW, constants=None) -> float:
    """Mean local structural similarity over unweighted sliding windows.

    ``constants`` defaults to C1=(0.01*L)^2, C2=(0.03*L)^2 with L the
    dynamic range (max - min) of the reference; a constant reference has
    zero range, so L falls back to 1 to keep the constants positive.
    """
    a = _as_matrix(ref, "ref")
    b = _as_matrix(syn, "syn")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: ref {a.shape} vs syn {b.shape}")
    window = int(window)
    if window < 1 or window > min(a.shape):
        raise ValueError(
            f"window must be in 1..{min(a.shape)} for shape {a.shape}, got {window}"
        )
    if constants is None:
        data_range = float(a.max() - a.min())
        if data_range == 0.0:
            data_range = 1.0
        c1 = (0.01 * data_range) ** 2
        c2 = (0.03 * data_range) ** 2
    else:
        c1, c2 = (float(c) for c in constants)
        if c1 < 0 or c2 < 0:
            raise ValueError("SSIM constants must be nonnegative")

    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa**2).mean(axis=(-2, -1)) - mu_a**2
    var_b = (wb**2).mean(axis=(-2, -1)) - mu_b**2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


@dataclass(frozen=True)
class PitchTrack:
    """Per-frame F0 values (Hz) with voicing decisions."""

    f0: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        f0 = np.asarray(self.f0, dtype=float)
        voiced = np.asarray(self.voiced, dtype=bool)
        if f0.ndim != 1 or voiced.shape != f0.shape or f0.size == 0:
            raise ValueError("f0 and voiced must be equal-length non-empty vectors")
        if not np.all(np.isfinite(f0)) or np.any(f0 < 0):
            raise ValueError("f0 must be finite and nonnegative")
        if np.any(voiced & (f0 <= 0)):
            raise ValueError("voiced frames must carry f0 > 0")
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "voiced", voiced)

    def __len__(self) -> int:
        return len(self.f0)


def pitch_errors(
    ref: PitchTrack, syn: PitchTrack, gpe_threshold: float = DEFAULT_GPE_THRESHOLD
) -> dict:
    """Gross pitch error, voicing decision error, and F0 frame error.

    GPE is the fraction of both-voiced frames whose relative F0 deviation
    exceeds the threshold; with no both-voiced frames it is undefined and
    reported as None.  FFE counts GPE-error frames plus voicing
    mismatches over all frames.
    """
    if not isinstance(ref, PitchTrack) or not isinstance(syn, PitchTrack):
        raise TypeError("ref and syn must be PitchTrack instances")
    if len(ref) != len(syn):
        raise ValueError(f"length mismatch: ref {len(ref)} vs syn {len(syn)}")
    if gpe_threshold <= 0:
        raise ValueError("gpe_threshold must be positive")
    n = len(ref)
    mismatches = int(np.count_nonzero(ref.voiced != syn.voiced))
    both = ref.voiced & syn.voiced
    n_both = int(np.count_nonzero(both))
    if n_both:
        deviation = np.abs(syn.f0[both] - ref.f0[both]) / ref.f0[both]
        gpe_errors = int(np.count_nonzero(deviation > gpe_threshold))
        gpe = gpe_errors / n_both
    else:
        gpe_errors = 0
        gpe = None
    return {
        "gpe": gpe,
        "vde": mismatches / n,
        "ffe": (gpe_errors + mismatches) / n,
    }


def load_pitch_track(path) -> PitchTrack:
    """Read a frame,f0,voiced CSV (header optional, frames in order)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"expected 3 columns (frame,f0,voiced): {line!r}")
            try:
                rows.append((int(float(parts[0])), float(parts[1]), int(float(parts[2]))))
            except ValueError:
                if rows:
                    raise ValueError(f"unparseable pitch row: {line!r}") from None
                continue  # header line
    if not rows:
        raise ValueError(f"no pitch frames in {path}")
    rows.sort(key=lambda r: r[0])
    return PitchTrack(
        f0=np.array([r[1] for r in rows]),
        voiced=np.array([bool(r[2]) for r in rows]),
    )


def save_pitch_track(path, track: PitchTrack) -> None:
    lines = ["frame,f0,voiced"]
    for i in range(len(track)):
        lines.append(f"{i},{float(track.f0[i])!r},{int(track.voiced[i])}")
    atomic_write_text(path, "\n".join(lines) + "\n")
