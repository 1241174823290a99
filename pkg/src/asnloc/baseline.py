"""Reference detector that thresholds raw discrepancy deviations.

Movement is flagged when some sub-network's discrepancy exceeds the mean of
the others by more than a calibrated margin.  No priors, no inference; this
is the comparison point for the probabilistic detector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lono import ErrorVector


@dataclass(frozen=True)
class NaiveConfig:
    threshold: float  # meters

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")


def naive_detect(
    e: ErrorVector, config: NaiveConfig
) -> tuple[bool, int | None, float]:
    """Deviation-from-the-rest detector.

    Returns (detected, suspected node id or None, score).  The score is the
    largest deviation d_m = e_m - mean(e_others); the suspect, mirroring the
    probabilistic detector's logic, is the node excluded by the sub-network
    with the *smallest* deviation.
    """
    errs = np.asarray(e.e, dtype=float)
    m = len(errs)
    if m < 2:
        raise ValueError(f"need at least 2 sub-networks, got {m}")
    d = errs - (errs.sum() - errs) / (m - 1)
    score = float(d.max())
    detected = score > config.threshold
    suspected = None
    if detected:
        best = d.min()
        suspected = min(nid for nid, dev in zip(e.node_ids, d) if dev == best)
    return detected, suspected, score
