"""Displacement detector: latent-class priors, belief propagation, fitting.

Each sub-network's estimate discrepancy is explained by one of three latent
classes - aligned (half-normal error), misaligned (truncated exponential) or
unreliable (uniform).  The classes of all sub-networks form a fully connected
pairwise field with a shared 3x3 transition table; sum-product message
passing yields per-sub-network posteriors, and the mean misaligned posterior
is the decision statistic for "some node moved".
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CapacityError,
    ConfigError,
    DegenerateMessageError,
    FittingError,
    InsufficientDataError,
)
from .lono import ErrorVector

ALIGNED, MISALIGNED, UNRELIABLE = 0, 1, 2
CLASS_NAMES = ("aligned", "misaligned", "unreliable")

BP_TOL = 1e-8
BP_MAX_ITERS = 100

DETECTOR_CONFIG_VERSION = 1

_SIGMA2_FLOOR = 1e-6   # m^2, degenerate aligned samples
_LAMBDA_CAP = 1e6      # 1/m, degenerate misaligned samples
_EMAX_FLOOR = 1e-3     # m


@dataclass(frozen=True)
class PriorParams:
    """Error-distribution parameters for the three latent classes."""

    sigma2_align: float
    lam: float
    e_max: float

    def __post_init__(self):
        if self.sigma2_align <= 0:
            raise ValueError(f"sigma2_align must be > 0, got {self.sigma2_align}")
        if self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.e_max <= 0:
            raise ValueError(f"e_max must be > 0, got {self.e_max}")


@dataclass(frozen=True)
class TransitionMatrix:
    """Non-negative 3x3 pairwise potential between latent classes."""

    psi: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.psi, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"transition matrix must be 3x3, got {m.shape}")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("transition matrix entries must be finite and >= 0")
        if np.any(m.sum(axis=1) == 0) or np.any(m.sum(axis=0) == 0):
            raise ValueError("transition matrix has an all-zero row or column")


@dataclass(frozen=True)
class LatentPosterior:
    """Per-sub-network class probabilities, rows summing to 1."""

    probs: np.ndarray  # (M, 3)
    converged: bool = True
    iterations: int = 0


@dataclass(frozen=True)
class DetectionResult:
    posteriors: LatentPosterior
    p_failure: float
    movement_detected: bool
    suspected_node: int | None
    iterations: int
    clamped: bool = False


def prior_density(e: float, latent_class: int, params: PriorParams) -> float:
    """Density of one class's error distribution at discrepancy e >= 0."""
    if e < 0:
        raise ValueError(f"discrepancy must be >= 0, got {e}")
    if latent_class == ALIGNED:
        s2 = params.sigma2_align
        return 2.0 / math.sqrt(2.0 * math.pi * s2) * math.exp(-(e**2) / (2.0 * s2))
    if latent_class == MISALIGNED:
        if e > params.e_max:
            return 0.0
        lam = params.lam
        return lam * math.exp(-lam * e) / (1.0 - math.exp(-lam * params.e_max))
    if latent_class == UNRELIABLE:
        return 0.0 if e > params.e_max else 1.0 / params.e_max
    raise ValueError(f"unknown latent class {latent_class}")


def likelihood_vector(e_m: float, params: PriorParams) -> np.ndarray:
    """The three class densities at one discrepancy, in class order."""
    return np.array([prior_density(e_m, c, params) for c in (ALIGNED, MISALIGNED, UNRELIABLE)])


def message(psi, l_sender: np.ndarray, incoming: np.ndarray | None = None) -> np.ndarray:
    """One sum-product message, normalized to sum one.

    `psi` has the sender's state on rows and the recipient's on columns:
    mu(z_r) = sum_s psi[s, r] * l_sender[s] * incoming[s].
    """
    m = psi.psi if isinstance(psi, TransitionMatrix) else np.asarray(psi, dtype=float)
    b = np.asarray(l_sender, dtype=float)
    if incoming is not None:
        b = b * np.asarray(incoming, dtype=float)
    if np.any(b < 0) or not np.any(b):
        raise DegenerateMessageError("sender belief is zero or negative everywhere")
    mu = m.T @ b
    total = float(mu.sum())
    if not (total > 0 and np.isfinite(total)):
        raise DegenerateMessageError("message collapsed to all zeros")
    return mu / total


def _edge_matrix(psi: np.ndarray, sender: int, recipient: int) -> np.ndarray:
    # The joint places psi(z_i, z_j) on each pair with i < j; a message sent
    # from the higher index therefore sees the transposed table.
    return psi if sender < recipient else psi.T


def _likelihood_matrix(e: np.ndarray, params: PriorParams) -> np.ndarray:
    l = np.stack([likelihood_vector(v, params) for v in e])
    # Normalizing each row changes nothing downstream (posteriors are scale
    # invariant) but keeps message products well inside float range.
    totals = l.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise DegenerateMessageError("a discrepancy has zero likelihood in every class")
    return l / totals


def run_belief_propagation(
    e,
    params: PriorParams,
    psi: TransitionMatrix,
    max_iters: int = BP_MAX_ITERS,
    tol: float = BP_TOL,
) -> LatentPosterior:
    """Synchronous sum-product on the fully connected latent field.

    All messages update from the previous iteration's values and are
    normalized each pass; iteration stops when no posterior entry moves by
    more than `tol`.  Non-convergence returns the last posteriors with the
    flag cleared rather than failing.
    """
    errs = np.asarray(e.e if isinstance(e, ErrorVector) else e, dtype=float)
    m = len(errs)
    if m < 2:
        raise ValueError(f"need at least 2 sub-networks, got {m}")
    pmat = np.asarray(psi.psi, dtype=float)
    l = _likelihood_matrix(errs, params)

    msgs = np.full((m, m, 3), 1.0 / 3.0)  # msgs[s, r] = message s -> r
    posteriors = _posteriors_from(l, msgs)
    for iteration in range(1, max_iters + 1):
        new_msgs = np.empty_like(msgs)
        for s in range(m):
            for r in range(m):
                if s == r:
                    continue
                incoming = np.prod(
                    [msgs[k, s] for k in range(m) if k != s and k != r], axis=0
                ) if m > 2 else None
                new_msgs[s, r] = message(_edge_matrix(pmat, s, r), l[s], incoming)
        msgs = new_msgs
        new_post = _posteriors_from(l, msgs)
        delta = float(np.max(np.abs(new_post - posteriors)))
        posteriors = new_post
        if delta < tol:
            return LatentPosterior(probs=posteriors, converged=True, iterations=iteration)
    return LatentPosterior(probs=posteriors, converged=False, iterations=max_iters)


def _posteriors_from(l: np.ndarray, msgs: np.ndarray) -> np.ndarray:
    m = l.shape[0]
    post = np.empty_like(l)
    for r in range(m):
        prod = l[r].copy()
        for s in range(m):
            if s != r:
                prod *= msgs[s, r]
        total = prod.sum()
        if not (total > 0 and np.isfinite(total)):
            raise DegenerateMessageError(f"posterior for sub-network {r} is degenerate")
        post[r] = prod / total
    return post


def exact_posterior(e, params: PriorParams, psi: TransitionMatrix) -> LatentPosterior:
    """Exact marginals by enumerating all 3^M joint states (oracle path)."""
    errs = np.asarray(e.e if isinstance(e, ErrorVector) else e, dtype=float)
    m = len(errs)
    if m > 10:
        raise CapacityError(f"exact enumeration supports at most 10 sub-networks, got {m}")
    pmat = np.asarray(psi.psi, dtype=float)
    l = _likelihood_matrix(errs, params)

    states = np.array(list(itertools.product(range(3), repeat=m)), dtype=int)
    weights = np.ones(len(states))
    for i in range(m):
        weights *= l[i, states[:, i]]
    for i in range(m):
        for j in range(i + 1, m):
            weights *= pmat[states[:, i], states[:, j]]
    total = weights.sum()
    if not (total > 0 and np.isfinite(total)):
        raise DegenerateMessageError("joint distribution has zero total mass")
    probs = np.empty((m, 3))
    for i in range(m):
        for c in range(3):
            probs[i, c] = weights[states[:, i] == c].sum()
    probs /= probs.sum(axis=1, keepdims=True)
    return LatentPosterior(probs=probs, converged=True, iterations=0)


def failure_probability(posteriors: LatentPosterior) -> float:
    """Mean misaligned posterior across sub-networks."""
    return float(np.mean(posteriors.probs[:, MISALIGNED]))


def detect(
    e: ErrorVector,
    params: PriorParams,
    psi: TransitionMatrix,
    threshold: float,
    max_iters: int = BP_MAX_ITERS,
    tol: float = BP_TOL,
) -> DetectionResult:
    """Threshold the network-level misalignment probability.

    Discrepancies beyond e_max are clamped onto the supported range (and
    flagged) so the bounded-class densities cannot annihilate the posterior.
    When movement is declared, the suspected node is the one excluded by the
    sub-network with the highest aligned posterior: the cleanest-looking
    sub-network is the one that never saw the moved node.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    errs = np.asarray(e.e, dtype=float)
    clamped = bool(np.any(errs > params.e_max))
    errs = np.minimum(errs, params.e_max)
    posteriors = run_belief_propagation(errs, params, psi, max_iters=max_iters, tol=tol)
    p_fail = failure_probability(posteriors)
    detected = p_fail >= threshold
    suspected = None
    if detected:
        aligned = posteriors.probs[:, ALIGNED]
        best = aligned.max()
        suspected = min(nid for nid, a in zip(e.node_ids, aligned) if a == best)
    return DetectionResult(
        posteriors=posteriors,
        p_failure=p_fail,
        movement_detected=detected,
        suspected_node=suspected,
        iterations=posteriors.iterations,
        clamped=clamped,
    )


def fit_priors(aligned_errors, misaligned_errors) -> PriorParams:
    """Maximum-likelihood prior parameters from labelled discrepancy samples.

    The exponential rate is fitted without the truncation correction; with
    e_max set past the largest observation the correction is negligible.
    """
    a = np.asarray(aligned_errors, dtype=float)
    m = np.asarray(misaligned_errors, dtype=float)
    if a.size == 0:
        raise InsufficientDataError("no aligned samples")
    if m.size == 0:
        raise InsufficientDataError("no misaligned samples")
    if np.any(a < 0) or np.any(m < 0):
        raise ValueError("error samples must be non-negative")
    sigma2 = max(float(np.mean(a**2)), _SIGMA2_FLOOR)
    mean_mis = float(np.mean(m))
    lam = _LAMBDA_CAP if mean_mis <= 1.0 / _LAMBDA_CAP else 1.0 / mean_mis
    e_max = max(1.1 * float(max(a.max(), m.max())), _EMAX_FLOOR)
    return PriorParams(sigma2_align=sigma2, lam=lam, e_max=e_max)


def fit_transition_ipfp(
    joint_counts,
    row_marginals,
    col_marginals,
    tol: float = 1e-10,
    max_iters: int = 1000,
) -> TransitionMatrix:
    """Scale a seed table to the target marginals by alternating row/column fits.

    Returns the unique matrix matching both marginals that is closest (in KL
    divergence) to the seed.  A seed already matching the targets is returned
    unchanged.
    """
    counts = np.array(joint_counts, dtype=float)
    rows = np.asarray(row_marginals, dtype=float)
    cols = np.asarray(col_marginals, dtype=float)
    if counts.shape != (3, 3):
        raise ValueError(f"joint counts must be 3x3, got {counts.shape}")
    for name, marg in (("row", rows), ("col", cols)):
        if np.any(marg <= 0):
            raise ValueError(f"{name} marginals must be strictly positive")
        if abs(marg.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} marginals must sum to 1, got {marg.sum()!r}")
    if np.any(counts < 0):
        raise ValueError("joint counts must be non-negative")
    if np.any(counts.sum(axis=1) == 0) or np.any(counts.sum(axis=0) == 0):
        raise ValueError("joint counts have an all-zero row or column")

    table = counts
    for _ in range(max_iters):
        row_res = float(np.max(np.abs(table.sum(axis=1) - rows)))
        col_res = float(np.max(np.abs(table.sum(axis=0) - cols)))
        if row_res <= tol and col_res <= tol:
            return TransitionMatrix(psi=table)
        table = table * (rows / table.sum(axis=1))[:, None]
        table = table * (cols / table.sum(axis=0))[None, :]
    row_res = float(np.max(np.abs(table.sum(axis=1) - rows)))
    col_res = float(np.max(np.abs(table.sum(axis=0) - cols)))
    raise FittingError(
        f"marginal fitting did not converge in {max_iters} iterations "
        f"(row residual {row_res:.3e}, col residual {col_res:.3e})"
    )


@dataclass(frozen=True)
class DetectorConfig:
    """Calibrated detector: priors, transition table, and decision thresholds."""

    priors: PriorParams
    psi: TransitionMatrix
    threshold: float = 0.5
    bp_tol: float = BP_TOL
    bp_max_iters: int = BP_MAX_ITERS
    naive_threshold: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")


def save_detector_config(cfg: DetectorConfig, path: str | Path) -> None:
    data = {
        "format_version": DETECTOR_CONFIG_VERSION,
        "sigma2_align": cfg.priors.sigma2_align,
        "lambda": cfg.priors.lam,
        "e_max": cfg.priors.e_max,
        "psi": np.asarray(cfg.psi.psi).tolist(),
        "threshold": cfg.threshold,
        "bp_tol": cfg.bp_tol,
        "bp_max_iters": cfg.bp_max_iters,
        "naive_threshold": cfg.naive_threshold,
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_detector_config(path: str | Path) -> DetectorConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        version = data["format_version"]
        if version != DETECTOR_CONFIG_VERSION:
            raise ConfigError(f"unsupported detector config version {version}")
        return DetectorConfig(
            priors=PriorParams(
                sigma2_align=float(data["sigma2_align"]),
                lam=float(data["lambda"]),
                e_max=float(data["e_max"]),
            ),
            psi=TransitionMatrix(psi=np.array(data["psi"], dtype=float)),
            threshold=float(data["threshold"]),
            bp_tol=float(data["bp_tol"]),
            bp_max_iters=int(data["bp_max_iters"]),
            naive_threshold=(
                None if data.get("naive_threshold") is None else float(data["naive_threshold"])
            ),
        )
    except KeyError as exc:
        raise ConfigError(f"detector config missing field {exc}") from exc
