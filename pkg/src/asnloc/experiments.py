"""Monte Carlo harness: training simulation, trials, sweeps, calibration, ROC.

A trial observes one static source twice through the network - once at the
trained geometry (recording per-sub-network baselines) and once after an
optional displacement of a single node - and runs both detectors on the
resulting discrepancy vector.  Everything is a pure function of the scenario
and a derived seed, so records are reproducible and order-independent.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .acoustics import (
    ArrayNode,
    RoomScenario,
    SourceEvent,
    render_node_signals,
    sample_displacement,
    speech_like,
    white_noise,
)
from .baseline import NaiveConfig, naive_detect
from .errors import CalibrationError, PlacementError, UndefinedAucError
from .features import DEFAULT_BAND_HZ, DEFAULT_FRAME_LEN, DEFAULT_HOP, band_bins, node_rtf
from .lono import LonoEnsemble, build_ensemble, compute_error_vector, record_baseline
from .mrf import (
    DetectorConfig,
    PriorParams,
    TransitionMatrix,
    detect,
    fit_priors,
    fit_transition_ipfp,
)
from .seeding import derive_seed, rng_for
from .ssgp import (
    KernelParams,
    SsgpModel,
    TrainingSet,
    build_covariance,
    estimate_position,
    tune_hyperparameters,
)

logger = logging.getLogger(__name__)

RECORD_CSV_VERSION = 1

# Shift grid preset: 0.05 m, then 0.25 m to 3.05 m in 0.2 m steps.
SHIFT_GRID_FULL = (0.05,) + tuple(round(0.25 + 0.2 * i, 2) for i in range(15))
T60_SET_FULL = (0.2, 0.4, 0.6)

# Shift sizes drawn for labelled calibration trials.
CALIBRATION_SHIFT_RANGE = (0.25, 3.05)
UNRELIABLE_QUANTILE = 0.95

MAX_TRIAL_RESAMPLES = 8


@dataclass(frozen=True)
class Preset:
    name: str
    n_unlabelled: int
    n_labelled: int
    n_validation: int
    train_signal_s: float
    test_signal_s: float


PRESETS = {
    "desk": Preset("desk", n_unlabelled=100, n_labelled=5, n_validation=6,
                   train_signal_s=0.8, test_signal_s=0.8),
    "paper": Preset("paper", n_unlabelled=300, n_labelled=5, n_validation=10,
                    train_signal_s=0.8, test_signal_s=0.8),
    # Tiny end-to-end preset for smoke tests and schema checks.
    "micro": Preset("micro", n_unlabelled=8, n_labelled=4, n_validation=2,
                    train_signal_s=0.2, test_signal_s=0.2),
}


@dataclass
class TrainedNetwork:
    """Scenario plus everything learned from it."""

    scenario: RoomScenario
    preset: Preset
    training: TrainingSet
    params: KernelParams
    full_model: SsgpModel
    ensemble: LonoEnsemble
    band: tuple[int, int]
    frame_len: int = DEFAULT_FRAME_LEN
    hop: int = DEFAULT_HOP


@dataclass(frozen=True)
class TrialRecord:
    trial_id: int
    t60: float
    shift_size: float
    rotation: float
    moved_node: int | None
    node_ids: tuple[int, ...]
    error_vector: tuple[float, ...]
    mrf_p_failure: float
    naive_score: float
    true_moved: bool
    localization_error: float
    identified_node_mrf: int | None
    identified_node_naive: int | None
    seed: int
    resamples: int = 0


def labelled_source_positions(scenario: RoomScenario, n: int) -> np.ndarray:
    """Deterministic spread of anchor positions: RoI center plus compass points."""
    c = np.asarray(scenario.roi_center, dtype=float)
    r = 0.75 * scenario.roi_radius
    pattern = [c]
    for k in range(max(n - 1, 0)):
        angle = 2.0 * math.pi * k / max(n - 1, 1)
        pattern.append(c + np.array([r * math.cos(angle), r * math.sin(angle), 0.0]))
    return np.array(pattern[:n])


def observe_source(
    scenario: RoomScenario,
    nodes,
    position,
    seed: int,
    signal_s: float,
    signal_kind: str = "speech",
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    band: tuple[int, int] | None = None,
) -> dict:
    """Render one source through every node and extract per-node features."""
    if band is None:
        band = band_bins(frame_len, scenario.room.sample_rate, *DEFAULT_BAND_HZ)
    n_samples = int(round(signal_s * scenario.room.sample_rate))
    sig_rng = rng_for(seed, "signal")
    if signal_kind == "speech":
        sig = speech_like(n_samples, scenario.room.sample_rate, sig_rng)
    elif signal_kind == "white":
        sig = white_noise(n_samples, sig_rng)
    else:
        raise ValueError(f"unknown signal kind {signal_kind!r}")
    event = SourceEvent(position=tuple(position), signal=sig, snr_db=scenario.snr_db)
    feats = {}
    for node in nodes:
        out = render_node_signals(scenario.room, node, event, noise_seed=seed)
        feats[node.id] = node_rtf(out, band, node_id=node.id, frame_len=frame_len, hop=hop)
    return feats


def simulate_training_set(
    scenario: RoomScenario, preset: Preset, seed: int,
    frame_len: int = DEFAULT_FRAME_LEN, hop: int = DEFAULT_HOP,
) -> tuple[TrainingSet, list, tuple[int, int]]:
    """Render labelled, unlabelled, and validation sources at the trained geometry."""
    band = band_bins(frame_len, scenario.room.sample_rate, *DEFAULT_BAND_HZ)
    labelled = labelled_source_positions(scenario, preset.n_labelled)
    roi_rng = rng_for(seed, "train-positions", scenario.room.t60)
    unlabelled = [scenario.sample_roi_position(roi_rng) for _ in range(preset.n_unlabelled)]

    per_node = {node.id: [] for node in scenario.nodes}
    for idx, pos in enumerate(list(labelled) + unlabelled):
        feats = observe_source(
            scenario, scenario.nodes, pos,
            seed=derive_seed(seed, "train-src", scenario.room.t60, idx),
            signal_s=preset.train_signal_s, signal_kind="white",
            frame_len=frame_len, hop=hop, band=band,
        )
        for node_id, feat in feats.items():
            per_node[node_id].append(feat.values)
    training = TrainingSet(
        features={n: np.array(v) for n, v in per_node.items()},
        labelled_idx=np.arange(preset.n_labelled),
        labelled_positions=labelled,
    )

    val_rng = rng_for(seed, "validation-positions", scenario.room.t60)
    validation = []
    for v in range(preset.n_validation):
        pos = scenario.sample_roi_position(val_rng)
        feats = observe_source(
            scenario, scenario.nodes, pos,
            seed=derive_seed(seed, "validation-src", scenario.room.t60, v),
            signal_s=preset.train_signal_s, signal_kind="white",
            frame_len=frame_len, hop=hop, band=band,
        )
        validation.append((feats, pos))
    return training, validation, band


def train_network(
    scenario: RoomScenario, preset: Preset | str, seed: int,
    frame_len: int = DEFAULT_FRAME_LEN, hop: int = DEFAULT_HOP,
) -> TrainedNetwork:
    """Simulate training data, tune kernel widths, and build all localizers."""
    if isinstance(preset, str):
        preset = PRESETS[preset]
    training, validation, band = simulate_training_set(scenario, preset, seed, frame_len, hop)
    params = tune_hyperparameters(training, validation)
    logger.info(
        "trained t60=%.2fs: n_labelled=%d n_unlabelled=%d sigma2=%.3e",
        scenario.room.t60, training.n_labelled, training.n_unlabelled, params.sigma2,
    )
    return TrainedNetwork(
        scenario=scenario,
        preset=preset,
        training=training,
        params=params,
        full_model=build_covariance(training, params),
        ensemble=build_ensemble(training, params),
        band=band,
        frame_len=frame_len,
        hop=hop,
    )


def _observe(net: TrainedNetwork, nodes, position, seed: int) -> dict:
    return observe_source(
        net.scenario, nodes, position, seed,
        signal_s=net.preset.test_signal_s, signal_kind="speech",
        frame_len=net.frame_len, hop=net.hop, band=net.band,
    )


def run_trial(
    net: TrainedNetwork,
    detector_cfg: DetectorConfig,
    shift_size: float,
    seed: int,
    force_positive: bool | None = None,
) -> TrialRecord:
    """One detection trial; pure function of (trained network, config, seed).

    A positive trial displaces one uniformly chosen node by `shift_size` at a
    random heading with a random rotation; a negative trial re-observes the
    same geometry with fresh signal and noise.  Placement dead ends resample
    the whole trial from a derived seed.
    """
    for attempt in range(MAX_TRIAL_RESAMPLES):
        trial_seed = derive_seed(seed, "resample", attempt) if attempt else seed
        try:
            return _run_trial_once(net, detector_cfg, shift_size, trial_seed, force_positive, attempt)
        except PlacementError:
            logger.warning("trial seed %d: placement dead end, resampling", trial_seed)
    raise PlacementError(
        f"trial could not place a {shift_size:g} m displacement after "
        f"{MAX_TRIAL_RESAMPLES} resamples"
    )


def _run_trial_once(
    net: TrainedNetwork,
    detector_cfg: DetectorConfig,
    shift_size: float,
    seed: int,
    force_positive: bool | None,
    resamples: int,
) -> TrialRecord:
    scenario = net.scenario
    rng = rng_for(seed, "trial")
    positive = bool(rng.uniform() < 0.5) if force_positive is None else force_positive
    source_pos = scenario.sample_roi_position(rng)

    pre_feats = _observe(net, scenario.nodes, source_pos, derive_seed(seed, "pre"))
    ensemble = record_baseline(net.ensemble, pre_feats)

    moved_node = None
    rotation = 0.0
    nodes = scenario.nodes
    if positive and shift_size > 0:
        moved_node = int(rng.choice(scenario.node_ids))
        node = scenario.node(moved_node)
        displaced, _, rotation = sample_displacement(scenario.room, node, shift_size, rng)
        nodes = tuple(displaced if n.id == moved_node else n for n in scenario.nodes)
    elif positive:
        moved_node = int(rng.choice(scenario.node_ids))  # zero-size "shift"

    post_feats = _observe(net, nodes, source_pos, derive_seed(seed, "post"))
    ev = compute_error_vector(ensemble, post_feats)

    mrf_result = detect(
        ev, detector_cfg.priors, detector_cfg.psi, detector_cfg.threshold,
        max_iters=detector_cfg.bp_max_iters, tol=detector_cfg.bp_tol,
    )
    naive_threshold = 1.0 if detector_cfg.naive_threshold is None else detector_cfg.naive_threshold
    naive_detected, naive_suspect, naive_score = naive_detect(
        ev, NaiveConfig(naive_threshold)
    )
    loc_err = float(
        np.linalg.norm(estimate_position(net.full_model, post_feats) - source_pos)
    )
    return TrialRecord(
        trial_id=0,
        t60=scenario.room.t60,
        shift_size=shift_size,
        rotation=rotation if moved_node is not None else 0.0,
        moved_node=moved_node,
        node_ids=scenario.node_ids,
        error_vector=tuple(float(x) for x in ev.e),
        mrf_p_failure=mrf_result.p_failure,
        naive_score=naive_score,
        true_moved=positive,
        localization_error=loc_err,
        identified_node_mrf=mrf_result.suspected_node,
        identified_node_naive=naive_suspect,
        seed=seed,
        resamples=resamples,
    )


# Worker-side state for process pools: populated once per worker by fork.
_POOL_CONTEXT: dict = {}


def _pool_init(net: TrainedNetwork, cfg: DetectorConfig) -> None:
    _POOL_CONTEXT["net"] = net
    _POOL_CONTEXT["cfg"] = cfg


def _pool_trial(task: tuple) -> TrialRecord:
    trial_id, shift, seed, force_positive = task
    rec = run_trial(
        _POOL_CONTEXT["net"], _POOL_CONTEXT["cfg"], shift, seed, force_positive
    )
    return replace(rec, trial_id=trial_id)


def run_cell(
    net: TrainedNetwork,
    detector_cfg: DetectorConfig,
    shift_size: float,
    n_trials: int,
    base_seed: int,
    mode: str = "balanced",
    jobs: int = 1,
) -> list[TrialRecord]:
    """Trials for one (t60, shift) cell.

    mode: "balanced" alternates positive/negative deterministically (counts
    differ by at most one), "positive"/"negative" force one class.
    """
    force = {"balanced": None, "positive": True, "negative": False}[mode]
    tasks = []
    for trial_id in range(n_trials):
        force_positive = (trial_id % 2 == 0) if mode == "balanced" else force
        seed = derive_seed(base_seed, "trial", net.scenario.room.t60, shift_size, trial_id)
        tasks.append((trial_id, shift_size, seed, force_positive))

    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_pool_init, initargs=(net, detector_cfg)
        ) as pool:
            records = list(pool.map(_pool_trial, tasks, chunksize=4))
    else:
        records = [
            replace(run_trial(net, detector_cfg, shift, seed, fp), trial_id=tid)
            for tid, shift, seed, fp in tasks
        ]
    return records


def calibrate(
    net: TrainedNetwork,
    n_trials: int,
    seed: int,
    threshold: float = 0.5,
    reference: str = "baseline",
) -> DetectorConfig:
    """Fit detector priors, the transition table, and the naive threshold.

    Labelled calibration trials alternate displaced and static.  In displaced
    trials the sub-network excluding the moved node contributes an aligned
    sample and the others misaligned samples; static-trial discrepancies
    beyond their own upper quantile are labelled unreliable.  `reference`
    selects whether discrepancies compare against pre-movement estimates
    ("baseline") or the true source position ("truth").
    """
    if reference not in ("baseline", "truth"):
        raise ValueError(f"unknown reference {reference!r}")
    scenario = net.scenario
    aligned, misaligned = [], []
    static_samples = []  # (value,) pool for the unreliable quantile rule
    trial_classes = []   # per trial: list of (subnetwork index, class) for psi counts
    naive_gaps = []

    for trial_id in range(n_trials):
        trial_seed = derive_seed(seed, "calibration", scenario.room.t60, trial_id)
        rng = rng_for(trial_seed, "cal-trial")
        positive = trial_id % 2 == 0
        source_pos = scenario.sample_roi_position(rng)
        pre_feats = _observe(net, scenario.nodes, source_pos, derive_seed(trial_seed, "pre"))
        ensemble = record_baseline(net.ensemble, pre_feats)

        nodes = scenario.nodes
        moved_node = None
        if positive:
            shift = float(rng.uniform(*CALIBRATION_SHIFT_RANGE))
            moved_node = int(rng.choice(scenario.node_ids))
            try:
                displaced, _, _ = sample_displacement(
                    scenario.room, scenario.node(moved_node), shift, rng
                )
            except PlacementError:
                continue
            nodes = tuple(displaced if n.id == moved_node else n for n in scenario.nodes)
        post_feats = _observe(net, nodes, source_pos, derive_seed(trial_seed, "post"))

        if reference == "baseline":
            ev = compute_error_vector(ensemble, post_feats)
            errs = np.asarray(ev.e)
        else:
            errs = np.array(
                [
                    np.linalg.norm(
                        estimate_position(ensemble.models[n], post_feats) - source_pos
                    )
                    for n in ensemble.node_ids
                ]
            )

        if positive:
            classes = []
            for i, node_id in enumerate(ensemble.node_ids):
                if node_id == moved_node:
                    aligned.append(errs[i])
                    classes.append((i, "aligned"))
                else:
                    misaligned.append(errs[i])
                    classes.append((i, "misaligned"))
            trial_classes.append(classes)
            excl = list(ensemble.node_ids).index(moved_node)
            others = np.delete(errs, excl)
            naive_gaps.append(float(others.mean() - errs[excl]))
        else:
            static_samples.append(errs)

    if not misaligned:
        raise CalibrationError("no misaligned samples (no displaced calibration trials)")
    if not static_samples and not aligned:
        raise CalibrationError("no aligned samples (no usable calibration trials)")

    # Static trials: bulk aligned, upper tail unreliable.
    if static_samples:
        flat = np.concatenate(static_samples)
        cut = float(np.quantile(flat, UNRELIABLE_QUANTILE))
        for errs in static_samples:
            classes = []
            for i, v in enumerate(errs):
                if v > cut:
                    classes.append((i, "unreliable"))
                else:
                    aligned.append(v)
                    classes.append((i, "aligned"))
            trial_classes.append(classes)

    priors = fit_priors(np.asarray(aligned), np.asarray(misaligned))

    class_index = {"aligned": 0, "misaligned": 1, "unreliable": 2}
    counts = np.zeros((3, 3))
    freq = np.zeros(3)
    for classes in trial_classes:
        for _, cls in classes:
            freq[class_index[cls]] += 1
        for a in range(len(classes)):
            for b in range(a + 1, len(classes)):
                ca, cb = class_index[classes[a][1]], class_index[classes[b][1]]
                counts[ca, cb] += 1
                counts[cb, ca] += 1
    missing = [name for name, i in class_index.items() if freq[i] == 0]
    if missing:
        raise CalibrationError(f"calibration produced no samples of class: {missing}")
    freq = freq / freq.sum()
    counts = np.maximum(counts, 1e-3)  # smooth empty co-occurrence cells
    psi = fit_transition_ipfp(counts, freq, freq)
    psi = TransitionMatrix(psi=0.5 * (psi.psi + psi.psi.T))

    naive_threshold = max(float(np.mean(naive_gaps)), 1e-6) if naive_gaps else 1.0
    return DetectorConfig(
        priors=priors,
        psi=psi,
        threshold=threshold,
        naive_threshold=naive_threshold,
    )


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def rank_auc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counted half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAucError("need both positive and negative records")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def compute_roc(records, score_fn, thresholds=None) -> RocCurve:
    """Empirical ROC over trial records; score_fn maps a record to its score.

    Default thresholds are all distinct scores (plus a +inf sentinel), which
    makes the trapezoidal area equal the rank statistic for distinct scores.
    """
    scores = np.array([score_fn(r) for r in records], dtype=float)
    labels = np.array([r.true_moved for r in records], dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"need both classes for a ROC curve (got {n_pos} positive, {n_neg} negative)"
        )
    if thresholds is None:
        thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    else:
        thresholds = np.sort(np.asarray(thresholds, dtype=float))[::-1]
        thresholds = np.concatenate([[np.inf], thresholds])
    fpr, tpr = [], []
    for th in thresholds:
        decided = scores >= th
        tpr.append((decided & labels).sum() / n_pos)
        fpr.append((decided & ~labels).sum() / n_neg)
    fpr, tpr = np.array(fpr), np.array(tpr)
    auc = float(np.trapezoid(tpr, fpr)) if fpr[-1] > 0 else 0.0
    # Extend to (1, 1) if the lowest threshold did not capture everything.
    if fpr[-1] < 1.0 or tpr[-1] < 1.0:
        auc += float(np.trapezoid([tpr[-1], 1.0], [fpr[-1], 1.0]))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def mrf_score(record: TrialRecord) -> float:
    return record.mrf_p_failure


def naive_score(record: TrialRecord) -> float:
    return record.naive_score


_CSV_COLUMNS = [
    "trial_id", "t60", "shift_size", "rotation", "moved_node", "node_ids",
    "error_vector", "mrf_p_failure", "naive_score", "true_moved",
    "localization_error", "identified_node_mrf", "identified_node_naive",
    "seed", "resamples",
]


def write_records_csv(path: str | Path, records, seed: int) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# asnloc-trials v{RECORD_CSV_VERSION} seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.trial_id,
                    repr(r.t60),
                    repr(r.shift_size),
                    repr(r.rotation),
                    "" if r.moved_node is None else r.moved_node,
                    ";".join(str(n) for n in r.node_ids),
                    ";".join(repr(v) for v in r.error_vector),
                    repr(r.mrf_p_failure),
                    repr(r.naive_score),
                    int(r.true_moved),
                    repr(r.localization_error),
                    "" if r.identified_node_mrf is None else r.identified_node_mrf,
                    "" if r.identified_node_naive is None else r.identified_node_naive,
                    r.seed,
                    r.resamples,
                ]
            )


def read_records_csv(path: str | Path) -> list[TrialRecord]:
    with Path(path).open() as fh:
        header = fh.readline()
        if not header.startswith(f"# asnloc-trials v{RECORD_CSV_VERSION}"):
            raise ValueError(f"{path}: unrecognized record file header {header!r}")
        reader = csv.reader(fh)
        cols = next(reader)
        if cols != _CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected column layout")
        out = []
        for rec in reader:
            out.append(
                TrialRecord(
                    trial_id=int(rec[0]),
                    t60=float(rec[1]),
                    shift_size=float(rec[2]),
                    rotation=float(rec[3]),
                    moved_node=None if rec[4] == "" else int(rec[4]),
                    node_ids=tuple(int(x) for x in rec[5].split(";")),
                    error_vector=tuple(float(x) for x in rec[6].split(";")),
                    mrf_p_failure=float(rec[7]),
                    naive_score=float(rec[8]),
                    true_moved=bool(int(rec[9])),
                    localization_error=float(rec[10]),
                    identified_node_mrf=None if rec[11] == "" else int(rec[11]),
                    identified_node_naive=None if rec[12] == "" else int(rec[12]),
                    seed=int(rec[13]),
                    resamples=int(rec[14]),
                )
            )
        return out


def write_curve(path: str | Path, xs, ys, errs) -> None:
    """Two-column-plus-spread plot data, tab separated."""
    with Path(path).open("w") as fh:
        fh.write("# x\ty\tstderr\n")
        for x, y, e in zip(xs, ys, errs):
            fh.write(f"{x!r}\t{y!r}\t{e!r}\n")


def summarize_records(records: list[TrialRecord]) -> dict:
    """Per-(t60, shift) means plus per-t60 AUCs for both detectors."""
    by_cell: dict = {}
    for r in records:
        by_cell.setdefault((r.t60, r.shift_size), []).append(r)
    cells = []
    for (t60, shift), recs in sorted(by_cell.items()):
        pos = [r for r in recs if r.true_moved]
        neg = [r for r in recs if not r.true_moved]
        cells.append(
            {
                "t60": t60,
                "shift_size": shift,
                "n_trials": len(recs),
                "n_positive": len(pos),
                "mean_p_failure_positive": (
                    float(np.mean([r.mrf_p_failure for r in pos])) if pos else None
                ),
                "mean_localization_error_positive": (
                    float(np.mean([r.localization_error for r in pos])) if pos else None
                ),
                "mean_localization_error_negative": (
                    float(np.mean([r.localization_error for r in neg])) if neg else None
                ),
            }
        )
    aucs = {}
    for t60 in sorted({r.t60 for r in records}):
        sub = [r for r in records if r.t60 == t60]
        try:
            aucs[repr(t60)] = {
                "mrf": compute_roc(sub, mrf_score).auc,
                "naive": compute_roc(sub, naive_score).auc,
            }
        except UndefinedAucError:
            aucs[repr(t60)] = None
    return {"cells": cells, "auc": aucs}


def run_sweep(
    scenario: RoomScenario,
    shift_grid,
    t60_set,
    trials_per_cell: int,
    base_seed: int,
    preset: Preset | str = "desk",
    calibration_trials: int = 40,
    threshold: float = 0.5,
    mode: str = "balanced",
    jobs: int = 1,
    on_records=None,
    trained: dict | None = None,
) -> list[TrialRecord]:
    """Full factorial sweep; trains and calibrates per decay time.

    `trained` may supply ready (TrainedNetwork, DetectorConfig) pairs keyed by
    t60 to skip training.  `on_records` is called with each finished cell's
    records, in deterministic cell order, for streaming persistence.
    """
    if isinstance(preset, str):
        preset = PRESETS[preset]
    records: list[TrialRecord] = []
    for t60 in t60_set:
        if trained and t60 in trained:
            net, cfg = trained[t60]
        else:
            net = train_network(
                scenario.with_t60(t60), preset, derive_seed(base_seed, "train", t60)
            )
            cfg = calibrate(
                net, calibration_trials, derive_seed(base_seed, "calibrate", t60),
                threshold=threshold,
            )
        for shift in shift_grid:
            cell = run_cell(
                net, cfg, shift, trials_per_cell, base_seed, mode=mode, jobs=jobs
            )
            records.extend(cell)
            if on_records is not None:
                on_records(cell)
            logger.info("cell t60=%.2f shift=%.2f: %d records", t60, shift, len(cell))
    return records
