"""Semi-supervised Gaussian-process localizer over per-node feature manifolds.

The covariance between two labelled training points is an affinity product
summed over all (labelled + unlabelled) training points and all node pairs:

    Sigma_L[i, j] = (1/|S|^2) sum_d sum_{q in S} sum_{w in S}
                    k_q(h_i^q, h_d^q) * k_w(h_j^w, h_d^w)

with a per-node Gaussian kernel k_m(a, b) = exp(-||a - b||^2 / eps_m).
Writing G[l, d] = (1/|S|) sum_q k_q(h_l^q, h_d^q) this is Sigma_L = G G^T,
which is how it is assembled here.  Position estimates are conditional means
under a zero-mean joint Gaussian prior; labels are centered before solving
and the mean added back, which also makes constant label coordinates (e.g.
a fixed source height) reproduce exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConditioningError, IncompleteObservationError, TuningError
from .features import RtfFeature

MODEL_FORMAT_VERSION = 1

_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

EPSILON_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)
SIGMA2_FRACTIONS = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class KernelParams:
    """Per-node kernel widths and label-noise variance."""

    epsilons: dict[int, float]
    sigma2: float

    def __post_init__(self):
        for node_id, eps in self.epsilons.items():
            if eps <= 0:
                raise ValueError(f"kernel width for node {node_id} must be > 0, got {eps}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")


@dataclass(frozen=True)
class TrainingSet:
    """Features for every (training point, node) plus labelled positions.

    features: node id -> (n_points, feature_len) array.
    labelled_idx: indices of the labelled points within 0..n_points-1.
    labelled_positions: (n_labelled, 3) coordinates matching labelled_idx.
    """

    features: dict[int, np.ndarray]
    labelled_idx: np.ndarray
    labelled_positions: np.ndarray

    def __post_init__(self):
        counts = {node: feats.shape[0] for node, feats in self.features.items()}
        if len(set(counts.values())) != 1:
            raise ValueError(f"per-node training point counts differ: {counts}")
        n = next(iter(counts.values()))
        idx = np.asarray(self.labelled_idx)
        if idx.size < 1:
            raise ValueError("at least one labelled training point is required")
        if len(np.unique(idx)) != idx.size:
            raise ValueError("labelled indices must be unique")
        if idx.min() < 0 or idx.max() >= n:
            raise ValueError("labelled index out of range")
        if self.labelled_positions.shape != (idx.size, 3):
            raise ValueError(
                f"labelled positions shape {self.labelled_positions.shape} "
                f"does not match {idx.size} labels"
            )

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.features))

    @property
    def n_points(self) -> int:
        return next(iter(self.features.values())).shape[0]

    @property
    def n_labelled(self) -> int:
        return len(np.asarray(self.labelled_idx))

    @property
    def n_unlabelled(self) -> int:
        return self.n_points - self.n_labelled


def _as_values(feature) -> np.ndarray:
    if isinstance(feature, RtfFeature):
        return feature.values
    return np.asarray(feature, dtype=float)


def kernel(h_i, h_j, epsilon: float) -> float:
    """Gaussian affinity exp(-||h_i - h_j||^2 / epsilon), in (0, 1]."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    a, b = _as_values(h_i), _as_values(h_j)
    if a.shape != b.shape:
        raise ValueError(f"feature lengths differ: {a.shape} vs {b.shape}")
    return float(np.exp(-float(np.sum((a - b) ** 2)) / epsilon))


def _kernel_matrix(rows: np.ndarray, cols: np.ndarray, epsilon: float) -> np.ndarray:
    """exp(-sqdist/epsilon) between row features (r, f) and column features (c, f)."""
    sq = (
        np.sum(rows**2, axis=1)[:, None]
        + np.sum(cols**2, axis=1)[None, :]
        - 2.0 * rows @ cols.T
    )
    return np.exp(-np.maximum(sq, 0.0) / epsilon)


@dataclass
class SsgpModel:
    """Trained localizer for one node subset; immutable once built."""

    node_subset: tuple[int, ...]
    params: KernelParams
    gram: np.ndarray               # G, (n_labelled, n_points)
    sigma_l: np.ndarray            # G G^T
    labelled_idx: np.ndarray
    labelled_positions: np.ndarray
    label_mean: np.ndarray
    training_features: dict[int, np.ndarray]
    _cho: tuple = None
    jitter: float = 0.0

    @property
    def n_labelled(self) -> int:
        return self.gram.shape[0]


def _factorize(sigma_l: np.ndarray, sigma2: float) -> tuple[tuple, float]:
    n = sigma_l.shape[0]
    a = sigma_l + sigma2 * np.eye(n)
    for jitter in _JITTERS:
        try:
            return cho_factor(a + jitter * np.eye(n), lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    smallest = float(np.linalg.eigvalsh(a)[0])
    raise ConditioningError(
        f"covariance factorization failed; smallest eigenvalue {smallest:.3e}"
    )


def _assemble_gram(train: TrainingSet, epsilons: dict, subset: tuple) -> np.ndarray:
    lab = np.asarray(train.labelled_idx)
    gram = np.zeros((lab.size, train.n_points))
    for node in subset:
        feats = train.features[node]
        gram += _kernel_matrix(feats[lab], feats, epsilons[node])
    return gram / len(subset)


def build_covariance(
    train: TrainingSet, params: KernelParams, node_subset=None
) -> SsgpModel:
    """Assemble and factorize the labelled-point covariance for a node subset."""
    subset = tuple(sorted(node_subset)) if node_subset is not None else train.node_ids
    if not subset:
        raise ValueError("node subset must be non-empty")
    missing = [n for n in subset if n not in train.features]
    if missing:
        raise ValueError(f"training set has no features for nodes {missing}")

    gram = _assemble_gram(train, params.epsilons, subset)
    sigma_l = gram @ gram.T
    cho, jitter = _factorize(sigma_l, params.sigma2)
    positions = np.asarray(train.labelled_positions, dtype=float)
    return SsgpModel(
        node_subset=subset,
        params=params,
        gram=gram,
        sigma_l=sigma_l,
        labelled_idx=np.asarray(train.labelled_idx, dtype=np.int64),
        labelled_positions=positions,
        label_mean=positions.mean(axis=0),
        training_features={n: train.features[n] for n in subset},
        _cho=cho,
        jitter=jitter,
    )


def _test_affinity(model: SsgpModel, test_features: dict) -> np.ndarray:
    """g_t[d] = (1/|S|) sum_w k_w(h_t^w, h_d^w) over the model's subset."""
    missing = [n for n in model.node_subset if n not in test_features]
    if missing:
        raise IncompleteObservationError(f"missing test features for nodes {missing}")
    n_points = model.gram.shape[1]
    g = np.zeros(n_points)
    for node in model.node_subset:
        vec = _as_values(test_features[node])[None, :]
        g += _kernel_matrix(vec, model.training_features[node], model.params.epsilons[node])[0]
    return g / len(model.node_subset)


def test_covariance(model: SsgpModel, test_features: dict) -> np.ndarray:
    """Covariance vector between the labelled points and one test observation."""
    return model.gram @ _test_affinity(model, test_features)


def estimate_position(model: SsgpModel, test_features: dict) -> np.ndarray:
    """Conditional-mean position estimate for one test observation."""
    sigma_lt = test_covariance(model, test_features)
    weights = cho_solve(model._cho, sigma_lt)
    centered = model.labelled_positions - model.label_mean[None, :]
    return model.label_mean + centered.T @ weights


def median_epsilons(train: TrainingSet, floor: float = 1e-12) -> dict[int, float]:
    """Per-node median of pairwise squared feature distances."""
    out = {}
    for node, feats in train.features.items():
        sq = (
            np.sum(feats**2, axis=1)[:, None]
            + np.sum(feats**2, axis=1)[None, :]
            - 2.0 * feats @ feats.T
        )
        iu = np.triu_indices(feats.shape[0], k=1)
        out[node] = max(float(np.median(np.maximum(sq[iu], 0.0))), floor)
    return out


def tune_hyperparameters(
    train: TrainingSet,
    validation: list[tuple[dict, np.ndarray]],
    node_subset=None,
    multipliers=EPSILON_MULTIPLIERS,
    sigma2_fractions=SIGMA2_FRACTIONS,
) -> KernelParams:
    """Grid search minimizing mean validation localization error.

    The grid is (multiplier x base median widths) crossed with label-noise
    fractions of the mean covariance diagonal.  Candidates are visited in
    ascending (epsilon, sigma2) order and only strict improvements are kept,
    so exact ties resolve to the lexicographically smallest grid point.
    """
    if not validation:
        raise ValueError("validation set must be non-empty")
    subset = tuple(sorted(node_subset)) if node_subset is not None else train.node_ids
    base = median_epsilons(train)

    best: KernelParams | None = None
    best_err = np.inf
    failures = []
    for mult in sorted(multipliers):
        epsilons = {n: mult * base[n] for n in train.node_ids}
        gram = _assemble_gram(train, epsilons, subset)
        mean_diag = float(np.mean(np.sum(gram**2, axis=1)))
        for frac in sorted(sigma2_fractions):
            sigma2 = frac * mean_diag
            try:
                model = build_covariance(
                    train, KernelParams(epsilons=epsilons, sigma2=sigma2), subset
                )
            except ConditioningError as exc:
                failures.append(f"mult={mult}, frac={frac}: {exc}")
                continue
            errs = [
                float(np.linalg.norm(estimate_position(model, feats) - np.asarray(pos)))
                for feats, pos in validation
            ]
            err = float(np.mean(errs))
            if err < best_err:
                best_err = err
                best = model.params
    if best is None:
        raise TuningError("every grid point failed factorization: " + "; ".join(failures))
    return best


def save_training(
    train: TrainingSet, params: KernelParams, path: str | Path
) -> None:
    """Persist a training set with tuned parameters; models are rebuilt on load."""
    node_ids = np.array(train.node_ids, dtype=np.int64)
    arrays = {
        "format_version": np.array(MODEL_FORMAT_VERSION),
        "node_ids": node_ids,
        "epsilon_values": np.array([params.epsilons[int(n)] for n in node_ids]),
        "sigma2": np.array(params.sigma2),
        "labelled_idx": np.asarray(train.labelled_idx, dtype=np.int64),
        "labelled_positions": np.asarray(train.labelled_positions, dtype=float),
    }
    for n in node_ids:
        arrays[f"features_{n}"] = train.features[int(n)]
    np.savez_compressed(path, **arrays)


def load_training(path: str | Path) -> tuple[TrainingSet, KernelParams]:
    data = np.load(path)
    version = int(data["format_version"])
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format_version {version}")
    node_ids = [int(n) for n in data["node_ids"]]
    params = KernelParams(
        epsilons={n: float(e) for n, e in zip(node_ids, data["epsilon_values"])},
        sigma2=float(data["sigma2"]),
    )
    train = TrainingSet(
        features={n: data[f"features_{n}"] for n in node_ids},
        labelled_idx=data["labelled_idx"],
        labelled_positions=data["labelled_positions"],
    )
    return train, params


def save_model(model: SsgpModel, path: str | Path) -> None:
    """Persist one subset model; its factorization is recomputed on load."""
    node_ids = sorted(model.training_features)
    arrays = {
        "format_version": np.array(MODEL_FORMAT_VERSION),
        "node_subset": np.array(model.node_subset, dtype=np.int64),
        "node_ids": np.array(node_ids, dtype=np.int64),
        "epsilon_values": np.array([model.params.epsilons[n] for n in node_ids]),
        "sigma2": np.array(model.params.sigma2),
        "labelled_idx": np.asarray(model.labelled_idx, dtype=np.int64),
        "labelled_positions": model.labelled_positions,
    }
    for n in node_ids:
        arrays[f"features_{n}"] = model.training_features[n]
    np.savez_compressed(path, **arrays)


def load_model(path: str | Path) -> SsgpModel:
    data = np.load(path)
    version = int(data["format_version"])
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported model format_version {version}")
    node_ids = [int(n) for n in data["node_ids"]]
    params = KernelParams(
        epsilons={n: float(e) for n, e in zip(node_ids, data["epsilon_values"])},
        sigma2=float(data["sigma2"]),
    )
    train = TrainingSet(
        features={n: data[f"features_{n}"] for n in node_ids},
        labelled_idx=data["labelled_idx"],
        labelled_positions=data["labelled_positions"],
    )
    return build_covariance(train, params, tuple(int(n) for n in data["node_subset"]))
