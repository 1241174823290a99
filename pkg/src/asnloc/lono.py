"""Leave-one-node-out sub-network ensembles and estimate-discrepancy vectors.

For an M-node network, M localizers are trained, each on the subset that
excludes one node.  Comparing each sub-network's estimate before and after a
suspected movement gives a length-M discrepancy vector: the sub-network that
excludes a moved node never consumes its features and therefore stays quiet.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import StateError
from .ssgp import KernelParams, SsgpModel, TrainingSet, build_covariance, estimate_position

MIN_NODES = 3


@dataclass(frozen=True)
class ErrorVector:
    """Per-sub-network estimate discrepancies in meters, ordered by node_ids.

    Entry m belongs to the sub-network that excludes node node_ids[m].
    """

    e: np.ndarray
    node_ids: tuple[int, ...]

    def __post_init__(self):
        arr = np.asarray(self.e, dtype=float)
        if arr.shape != (len(self.node_ids),):
            raise ValueError(
                f"error vector length {arr.shape} does not match {len(self.node_ids)} nodes"
            )
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("error vector entries must be finite and non-negative")


@dataclass(frozen=True)
class LonoEnsemble:
    """One localizer per excluded node, plus optional pre-movement baselines."""

    models: dict[int, SsgpModel]  # excluded node id -> model
    node_ids: tuple[int, ...]
    baselines: dict[int, np.ndarray] | None = None


def build_ensemble(train: TrainingSet, params: KernelParams) -> LonoEnsemble:
    """Train the M sub-network models (no baselines recorded yet)."""
    node_ids = train.node_ids
    if len(node_ids) < MIN_NODES:
        raise ValueError(
            f"need at least {MIN_NODES} nodes for leave-one-out detection, got {len(node_ids)}"
        )
    models = {}
    for excluded in node_ids:
        subset = tuple(n for n in node_ids if n != excluded)
        try:
            models[excluded] = build_covariance(train, params, subset)
        except Exception as exc:
            raise type(exc)(f"sub-network excluding node {excluded}: {exc}") from exc
    return LonoEnsemble(models=models, node_ids=node_ids)


def record_baseline(ensemble: LonoEnsemble, test_features: dict) -> LonoEnsemble:
    """Estimate with every sub-network and store the results as baselines."""
    baselines = {
        excluded: estimate_position(model, test_features)
        for excluded, model in ensemble.models.items()
    }
    return replace(ensemble, baselines=baselines)


def compute_error_vector(ensemble: LonoEnsemble, post_features: dict) -> ErrorVector:
    """Distance between each sub-network's baseline and its fresh estimate."""
    if ensemble.baselines is None:
        raise StateError("baselines not recorded; call record_baseline first")
    e = np.array(
        [
            np.linalg.norm(
                estimate_position(ensemble.models[n], post_features) - ensemble.baselines[n]
            )
            for n in ensemble.node_ids
        ]
    )
    return ErrorVector(e=e, node_ids=ensemble.node_ids)
