"""Relative-transfer-function features from microphone pairs.

Each node's two microphone signals are reduced to one real feature vector:
the Welch-averaged cross-to-auto power-spectral-density ratio on a selected
frequency band, stacked as [real parts; imaginary parts].  The ratio cancels
the source spectrum, so the feature carries spatial information only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateExcitationError, InsufficientDataError

DEFAULT_FRAME_LEN = 2048
DEFAULT_HOP = 1024
DEFAULT_BAND_HZ = (300.0, 3500.0)

# A band bin whose auto-PSD falls below this fraction of the band mean is
# considered unexcited by the source.
PSD_FLOOR_FRACTION = 1e-12

FEATURE_CSV_VERSION = 1


@dataclass(frozen=True)
class StftGrid:
    """Complex short-time spectra, frames indexed (frame, bin)."""

    frames: np.ndarray
    frame_len: int
    hop: int
    window: str = "hann"

    def __post_init__(self):
        if self.hop > self.frame_len:
            raise ValueError(f"hop {self.hop} exceeds frame length {self.frame_len}")
        if self.frames.shape[1] != self.frame_len // 2 + 1:
            raise ValueError(
                f"bin count {self.frames.shape[1]} inconsistent with frame length "
                f"{self.frame_len}"
            )


@dataclass(frozen=True)
class RtfFeature:
    """Per-node feature: [Re; Im] of the inter-mic transfer ratio on `band`."""

    node_id: int
    values: np.ndarray
    band: tuple[int, int]

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"node {self.node_id} feature contains non-finite values")


def _window(name: str, n: int) -> np.ndarray:
    if name == "hann":
        # Periodic Hann: overlap-add compatible with hop = frame_len // 2.
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    if name == "rect":
        return np.ones(n)
    raise ValueError(f"unsupported analysis window {name!r}")


def stft(
    signal: np.ndarray,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    window: str = "hann",
) -> StftGrid:
    sig = np.asarray(signal, dtype=float)
    if len(sig) < frame_len:
        raise InsufficientDataError(
            f"signal of {len(sig)} samples is shorter than one frame ({frame_len})"
        )
    w = _window(window, frame_len)
    n_frames = 1 + (len(sig) - frame_len) // hop
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    frames = np.fft.rfft(sig[idx] * w[None, :], axis=1)
    return StftGrid(frames=frames, frame_len=frame_len, hop=hop, window=window)


def band_bins(frame_len: int, sample_rate: float, lo_hz: float, hi_hz: float) -> tuple[int, int]:
    """Half-open bin range [k_min, k_max) covering [lo_hz, hi_hz]."""
    k_min = int(np.ceil(lo_hz * frame_len / sample_rate))
    k_max = int(np.floor(hi_hz * frame_len / sample_rate)) + 1
    n_bins = frame_len // 2 + 1
    if not (0 <= k_min < k_max <= n_bins):
        raise ValueError(f"band [{lo_hz}, {hi_hz}] Hz maps to empty bin range")
    return k_min, k_max


def estimate_rtf(
    mic_a: StftGrid, mic_b: StftGrid, band: tuple[int, int], node_id: int = -1
) -> RtfFeature:
    """Transfer ratio of mic_b relative to mic_a, Welch-averaged over frames.

    Per bin: mean(B * conj(A)) / mean(|A|^2).  Raises if any band bin's
    auto-PSD sits below the excitation floor.
    """
    if mic_a.frames.shape != mic_b.frames.shape:
        raise ValueError(
            f"grid shapes differ: {mic_a.frames.shape} vs {mic_b.frames.shape}"
        )
    k_min, k_max = band
    if not (0 <= k_min < k_max <= mic_a.frames.shape[1]):
        raise ValueError(f"band {band} outside bin count {mic_a.frames.shape[1]}")
    a = mic_a.frames[:, k_min:k_max]
    b = mic_b.frames[:, k_min:k_max]
    auto = np.mean(np.abs(a) ** 2, axis=0)
    floor = PSD_FLOOR_FRACTION * float(np.mean(auto))
    dead = np.flatnonzero(auto <= floor)
    if dead.size:
        raise DegenerateExcitationError(
            f"band bins {(dead + k_min).tolist()[:8]}... not excited by the source"
            if dead.size > 8
            else f"band bins {(dead + k_min).tolist()} not excited by the source"
        )
    ratio = np.mean(b * np.conj(a), axis=0) / auto
    return RtfFeature(
        node_id=node_id,
        values=np.concatenate([ratio.real, ratio.imag]),
        band=(k_min, k_max),
    )


def node_rtf(
    signals: np.ndarray,
    band: tuple[int, int],
    node_id: int,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
) -> RtfFeature:
    """Feature for one node from its (2, n) microphone signals; mic 0 is the reference."""
    return estimate_rtf(
        stft(signals[0], frame_len, hop),
        stft(signals[1], frame_len, hop),
        band,
        node_id=node_id,
    )


def write_feature_csv(path: str | Path, rows: list[dict]) -> None:
    """Persist features; one row per (source, node).

    Row dict keys: node_id, source_id, labelled (bool), position (3-seq or
    None), feature (RtfFeature).
    """
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# asnloc-features v{FEATURE_CSV_VERSION}\n")
        writer = csv.writer(fh)
        n_vals = len(rows[0]["feature"].values) if rows else 0
        writer.writerow(
            ["node_id", "source_id", "labelled", "x", "y", "z", "k_min", "k_max"]
            + [f"v_{i+1}" for i in range(n_vals)]
        )
        for row in rows:
            feat: RtfFeature = row["feature"]
            pos = row.get("position")
            xyz = [repr(float(v)) for v in pos] if pos is not None else ["", "", ""]
            writer.writerow(
                [row["node_id"], row["source_id"], int(bool(row["labelled"]))]
                + xyz
                + [feat.band[0], feat.band[1]]
                + [repr(float(v)) for v in feat.values]
            )


def read_feature_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        header = fh.readline().strip()
        if header != f"# asnloc-features v{FEATURE_CSV_VERSION}":
            raise ValueError(f"{path}: unrecognized feature file header {header!r}")
        reader = csv.reader(fh)
        cols = next(reader)
        n_vals = len(cols) - 8
        rows = []
        for rec in reader:
            pos = None
            if rec[3] != "":
                pos = (float(rec[3]), float(rec[4]), float(rec[5]))
            rows.append(
                {
                    "node_id": int(rec[0]),
                    "source_id": int(rec[1]),
                    "labelled": bool(int(rec[2])),
                    "position": pos,
                    "feature": RtfFeature(
                        node_id=int(rec[0]),
                        values=np.array([float(v) for v in rec[8 : 8 + n_vals]]),
                        band=(int(rec[6]), int(rec[7])),
                    ),
                }
            )
        return rows
