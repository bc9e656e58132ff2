"""Runtime anomaly prediction over frozen world-model embeddings.

Control labels come from the per-step human-control flag: human steps keep
their label, the window before each takeover is marked failure, everything
else is rollout. A per-task failure classifier and a per-task OOD index
(shared linear projection, k-means centroids, percentile distance threshold)
score sampled latent futures; decision boundaries adapt to the measured
human-intervention ratio through an exponential-decay percentile curve.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datastore import TrajectoryRecord, split_of
from .learncore import (
    Adam,
    Dense,
    Module,
    Tensor,
    Transformer,
    load_arrays,
    log_softmax,
    no_grad,
    save_arrays,
)
from .seeding import seeded_rng
from .worldmodel import WorldModel, encode_records

LABEL_ROLLOUT, LABEL_FAILURE, LABEL_HUMAN = 0, 1, 2
LABEL_NAMES = ("rollout", "failure", "human")


class MonitorError(Exception):
    pass


def label_trajectory(control_flags, window: int) -> np.ndarray:
    """Per-step control labels: human where c=1, failure in the `window` steps
    before each 0->1 takeover (never overwriting human), rollout elsewhere."""
    c = np.asarray(control_flags).astype(np.int64)
    if c.ndim != 1:
        raise MonitorError("control flags must be 1-D")
    labels = np.where(c == 1, LABEL_HUMAN, LABEL_ROLLOUT)
    onsets = np.flatnonzero((c[1:] == 1) & (c[:-1] == 0)) + 1
    for t in onsets:
        seg = labels[max(0, t - window):t]
        seg[seg != LABEL_HUMAN] = LABEL_FAILURE
    return labels


# -- adaptive decision boundary ---------------------------------------------------


@dataclass(frozen=True)
class AdaptiveThresholdParams:
    a: float = 95.2
    b: float = -17.7
    c: float = -3.2
    clamp_lo: float = 50.0
    clamp_hi: float = 99.9


def calibrate_theta(p_h: float, params: AdaptiveThresholdParams = AdaptiveThresholdParams()) -> float:
    """Percentile theta from the human-intervention ratio: a + b * exp(c * p_h), clamped."""
    if not 0.0 <= p_h <= 1.0:
        raise MonitorError(f"intervention ratio {p_h} outside [0, 1]")
    theta = params.a + params.b * np.exp(params.c * p_h)
    return float(np.clip(theta, params.clamp_lo, params.clamp_hi))


@dataclass
class CurveFit:
    a: float
    b: float
    c: float
    residual_rms: float
    status: str = "ok"    # ok | degenerate


def fit_threshold_curve(points: list[tuple[float, float]], seed: int = 0,
                        iterations: int = 60, starts: int = 6) -> CurveFit:
    """Least-squares fit of theta = a + b * exp(c * p) to calibration pairs.

    Gauss-Newton with a seeded multi-start over the rate constant; for a fixed
    rate the amplitude pair is solved linearly.
    """
    if len(points) < 3:
        raise MonitorError("need at least 3 calibration points")
    p = np.array([x for x, _ in points], dtype=np.float64)
    y = np.array([t for _, t in points], dtype=np.float64)
    if len(np.unique(p)) != len(p):
        raise MonitorError("calibration ratios must be distinct")
    if np.allclose(y, y[0]):
        return CurveFit(a=float(y[0]), b=0.0, c=0.0, residual_rms=0.0, status="degenerate")

    rng = seeded_rng("curve-fit", seed)
    c_grid = np.concatenate([np.array([-6.0, -4.0, -3.0, -2.0, -1.0, -0.5]),
                             rng.uniform(-8.0, -0.1, size=max(0, starts - 6))])

    def solve_ab(c_val):
        basis = np.stack([np.ones_like(p), np.exp(c_val * p)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
        r = basis @ coef - y
        return coef[0], coef[1], float(r @ r)

    best = None
    for c0 in c_grid:
        a0, b0, sse = solve_ab(c0)
        theta = np.array([a0, b0, c0])
        for _ in range(iterations):
            e = np.exp(theta[2] * p)
            r = theta[0] + theta[1] * e - y
            J = np.stack([np.ones_like(p), e, theta[1] * p * e], axis=1)
            try:
                step, *_ = np.linalg.lstsq(J, -r, rcond=None)
            except np.linalg.LinAlgError:
                break
            theta = theta + step
            if np.max(np.abs(step)) < 1e-12:
                break
        e = np.exp(theta[2] * p)
        sse = float(np.sum((theta[0] + theta[1] * e - y) ** 2))
        if best is None or sse < best[0]:
            best = (sse, theta)
    sse, theta = best
    return CurveFit(a=float(theta[0]), b=float(theta[1]), c=float(theta[2]),
                    residual_rms=float(np.sqrt(sse / len(p))))


def nearest_rank_percentile(values: np.ndarray, percentile: float) -> float:
    """Deterministic nearest-rank percentile (no interpolation)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise MonitorError("empty distance archive")
    rank = int(np.ceil(percentile / 100.0 * len(v)))
    rank = min(max(rank, 1), len(v))
    return float(v[rank - 1])


# -- k-means + projection -----------------------------------------------------------


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           iterations: int = 50) -> np.ndarray:
    """Seeded k-means++ with a fixed Lloyd iteration cap; returns (k, d) centroids."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < k:
        raise MonitorError(f"{n} samples < {k} centroids")
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(n))]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = pts[int(rng.integers(n))]
        else:
            centroids[i] = pts[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((pts - centroids[i]) ** 2, axis=1))
    for _ in range(iterations):
        dists = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dists, axis=1)
        moved = False
        for i in range(k):
            members = pts[assign == i]
            if len(members):
                new = members.mean(axis=0)
                if not np.array_equal(new, centroids[i]):
                    centroids[i] = new
                    moved = True
        if not moved:
            break
    return centroids


@dataclass
class Projection:
    mean: np.ndarray          # (D,)
    components: np.ndarray    # (l, D)

    def apply(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) - self.mean) @ self.components.T


def fit_projection(pooled: np.ndarray, l: int) -> Projection:
    """Top-l principal directions of the pooled embeddings, sign-fixed."""
    z = np.asarray(pooled, dtype=np.float64)
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / max(len(z) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, np.argsort(vals)[::-1][:l]].T
    for i in range(len(comps)):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return Projection(mean=mean, components=comps)


@dataclass
class TaskOODEntry:
    centroids: np.ndarray          # (c, l)
    archive: np.ndarray            # validation nearest-centroid distances
    theta: float
    alpha: float


@dataclass
class OODIndex:
    projection: Projection
    tasks: dict = field(default_factory=dict)     # task_id -> TaskOODEntry

    def nearest_distance(self, task_id: int, z: np.ndarray) -> np.ndarray:
        """(M, D) embeddings -> (M,) distance to the task's nearest centroid."""
        entry = self.tasks.get(task_id)
        if entry is None:
            raise MonitorError(f"no OOD index for task {task_id}")
        proj = self.projection.apply(z)
        d2 = np.sum((proj[:, None, :] - entry.centroids[None, :, :]) ** 2, axis=2)
        return np.sqrt(d2.min(axis=1))

    def set_theta(self, task_id: int, theta: float):
        entry = self.tasks[task_id]
        entry.theta = theta
        entry.alpha = nearest_rank_percentile(entry.archive, theta)


def build_ood_index(task_embeddings: dict, l: int, c: int, thetas: dict, seed: int,
                    val_fraction: float = 0.2) -> OODIndex:
    """Shared projection on pooled data; per-task seeded centroids and thresholds.

    task_embeddings: task_id -> (M, D). Per task, a seeded tail split provides
    the validation distances whose theta-percentile sets alpha.
    """
    for tid, z in task_embeddings.items():
        if len(z) < c:
            raise MonitorError(f"task {tid}: {len(z)} samples < {c} centroids")
    pooled = np.concatenate(list(task_embeddings.values()), axis=0)
    proj = fit_projection(pooled, l)
    index = OODIndex(projection=proj)
    for tid in sorted(task_embeddings):
        z = task_embeddings[tid]
        rng = seeded_rng("ood-kmeans", seed, tid)
        perm = rng.permutation(len(z))
        n_val = max(1, int(len(z) * val_fraction))
        val_idx, fit_idx = perm[:n_val], perm[n_val:]
        if len(fit_idx) < c:
            fit_idx = perm
        pts = proj.apply(z[fit_idx])
        centroids = kmeans(pts, c, rng)
        val_pts = proj.apply(z[val_idx])
        d2 = np.sum((val_pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        archive = np.sqrt(d2.min(axis=1))
        theta = float(thetas[tid])
        entry = TaskOODEntry(centroids=centroids, archive=archive, theta=theta,
                             alpha=nearest_rank_percentile(archive, theta))
        index.tasks[tid] = entry
    return index


# -- failure classifier ---------------------------------------------------------------


@dataclass
class ClassifierConfig:
    context: int = 10
    width: int = 48
    depth: int = 1
    heads: int = 4
    latent_dim: int = 32


class FailureClassifier(Module):
    """3-class sequence classifier over frozen-embedding windows."""

    def __init__(self, cfg: ClassifierConfig, seed: int):
        rng = seeded_rng("failure-classifier", seed)
        self.cfg = cfg
        self.trunk = Transformer(cfg.latent_dim, cfg.width, cfg.depth, cfg.heads,
                                 max_len=cfg.context, rng=rng, causal=False)
        self.head = Dense(cfg.width, 3, rng)

    def logits(self, windows: Tensor) -> Tensor:
        return self.head(self.trunk(windows)[:, -1, :])

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        """(B, context, D) -> (B, 3) class probabilities."""
        with no_grad():
            lp = log_softmax(self.logits(Tensor(windows.astype(np.float32))), axis=-1)
        return np.exp(lp.data)


def _window_stack(latents: list[np.ndarray], context: int):
    """All windows ending at each step (left-padded by repeating the first latent)."""
    windows, flat_traj, flat_step = [], [], []
    for i, z in enumerate(latents):
        idx = np.clip(np.arange(len(z))[:, None] + np.arange(-context + 1, 1)[None, :], 0, None)
        windows.append(z[idx])
        flat_traj.extend([i] * len(z))
        flat_step.extend(range(len(z)))
    return np.concatenate(windows, axis=0), np.array(flat_traj), np.array(flat_step)


def train_failure_classifier(latents: list[np.ndarray], labels: list[np.ndarray],
                             seed: int, cfg: ClassifierConfig | None = None,
                             steps: int = 300, batch_size: int = 96,
                             lr: float = 1e-3, init_from: FailureClassifier | None = None,
                             log_fn=None) -> FailureClassifier:
    """Cross-entropy training with class-balanced batch sampling."""
    if not latents:
        raise MonitorError("empty classifier dataset")
    cfg = cfg or ClassifierConfig(latent_dim=latents[0].shape[1])
    clf = FailureClassifier(cfg, seed)
    if init_from is not None:
        for (name, p), (_, q) in zip(clf.named_parameters(), init_from.named_parameters()):
            p.data = q.data.copy()
    windows, _, _ = _window_stack(latents, cfg.context)
    y = np.concatenate(labels)
    if len(y) != len(windows):
        raise MonitorError("label/window count mismatch")
    present = sorted(set(y.tolist()))
    probs = np.zeros(len(y))
    for cls in present:
        mask = y == cls
        probs[mask] = 1.0 / (len(present) * mask.sum())
    rng = seeded_rng("classifier-train", seed)
    opt = Adam(clf.parameters(), lr=lr)
    onehot = np.eye(3, dtype=np.float32)
    running = []
    for step in range(steps):
        pick = rng.choice(len(y), size=batch_size, replace=True, p=probs)
        logits = clf.logits(Tensor(windows[pick].astype(np.float32)))
        ce = -(log_softmax(logits, axis=-1) * Tensor(onehot[y[pick]])).sum(axis=-1).mean()
        clf.zero_grad()
        ce.backward()
        opt.step()
        running.append(ce.item())
        if log_fn and (step + 1) % 100 == 0:
            log_fn(f"classifier step {step + 1}/{steps}: ce={np.mean(running[-100:]):.4f}")
    return clf


# -- runtime verdicts ---------------------------------------------------------------


@dataclass(frozen=True)
class TriggerRule:
    threshold_count: int = 2
    evaluation_indices: tuple = (7, 8, 9)
    vote_fraction: float = 0.5


@dataclass
class AnomalyVerdict:
    failure_score: float
    ood_distance: float
    failure_flag: bool
    ood_flag: bool

    @property
    def combined_flag(self) -> bool:
        return self.failure_flag or self.ood_flag


def failure_score(classifier: FailureClassifier, futures: np.ndarray,
                  history: np.ndarray, rule: TriggerRule = TriggerRule()) -> tuple[float, bool]:
    """Score N x L predicted futures; see `batch_failure_scores` for the rule."""
    scores, flags = batch_failure_scores(classifier, futures[None], history[None], rule)
    return float(scores[0]), bool(flags[0])


def batch_failure_scores(classifier: FailureClassifier, futures: np.ndarray,
                         histories: np.ndarray, rule: TriggerRule = TriggerRule()):
    """(R, N, L, D) futures + (R, T, D) histories -> per-robot (score, flag).

    Each future votes failure when at least threshold_count of the steps at the
    evaluation indices classify as failure; the flag trips when more than
    vote_fraction of futures vote. The score is the mean failure-class
    probability over every future step.
    """
    R, N, L, D = futures.shape
    ctx = classifier.cfg.context
    if L < max(rule.evaluation_indices) + 1:
        raise MonitorError(f"rollout length {L} too short for indices {rule.evaluation_indices}")
    hist = histories[:, -ctx:]
    if hist.shape[1] < ctx:
        pad = np.repeat(hist[:, :1], ctx - hist.shape[1], axis=1)
        hist = np.concatenate([pad, hist], axis=1)
    seq = np.concatenate([np.repeat(hist[:, None], N, axis=1), futures], axis=2)   # (R, N, ctx+L, D)
    sw = np.lib.stride_tricks.sliding_window_view(seq, ctx, axis=2)                # (R, N, L+1, D, ctx)
    windows = sw[:, :, 1:].transpose(0, 1, 2, 4, 3).reshape(R * N * L, ctx, D)
    proba = classifier.predict_proba(np.ascontiguousarray(windows)).reshape(R, N, L, 3)
    scores = proba[..., LABEL_FAILURE].mean(axis=(1, 2))
    pred = np.argmax(proba, axis=-1)                                               # (R, N, L)
    at_idx = pred[:, :, list(rule.evaluation_indices)] == LABEL_FAILURE
    votes = at_idx.sum(axis=-1) >= rule.threshold_count                            # (R, N)
    flags = votes.mean(axis=-1) > rule.vote_fraction
    return scores, flags


def ood_verdict(index: OODIndex, futures: np.ndarray, task_id: int) -> tuple[float, bool]:
    """Mean nearest-centroid distance over all N x L future latents; strict > alpha flags."""
    N, L, D = futures.shape
    d = index.nearest_distance(task_id, futures.reshape(N * L, D))
    mean_d = float(d.mean())
    return mean_d, mean_d > index.tasks[task_id].alpha


@dataclass
class MonitorConfig:
    rollout_length: int = 10      # L at monitoring time
    num_futures: int = 10         # N sampled futures per decision
    pre_window: int = 10          # W: failure-label window before takeovers
    pca_dims: int = 8             # l
    centroids: int = 10           # c per task
    hysteresis: int = 2           # consecutive flagged decision ticks before alert
    decision_stride: int = 3      # env ticks between decisions
    trigger: TriggerRule = field(default_factory=TriggerRule)


class AnomalyMonitor:
    """Failure classifier + OOD index over a frozen world model."""

    def __init__(self, world_model: WorldModel, cfg: MonitorConfig,
                 classifiers: dict, ood: OODIndex, p_h: dict):
        self.world_model = world_model
        self.cfg = cfg
        self.classifiers = classifiers        # task_id -> FailureClassifier | None
        self.ood = ood
        self.p_h = dict(p_h)                  # task_id -> last measured intervention ratio

    def evaluate_batch(self, histories: np.ndarray, task_ids: np.ndarray,
                       rng: np.random.Generator) -> list[AnomalyVerdict]:
        """(R, n<=T, D) latent histories -> one verdict per robot."""
        R = len(histories)
        N, L = self.cfg.num_futures, self.cfg.rollout_length
        hist = self.world_model._pad_history(np.asarray(histories, dtype=np.float32))
        tiled = np.repeat(hist, N, axis=0)
        futures = self.world_model.rollout_futures_batch(tiled, L, rng).reshape(R, N, L, -1)

        verdicts: list[AnomalyVerdict] = [None] * R
        for tid in sorted(set(int(t) for t in task_ids)):
            sel = np.flatnonzero(task_ids == tid)
            clf = self.classifiers.get(tid)
            if clf is not None:
                scores, flags = batch_failure_scores(clf, futures[sel], hist[sel], self.cfg.trigger)
            else:
                scores, flags = np.zeros(len(sel)), np.zeros(len(sel), dtype=bool)
            for j, r in enumerate(sel):
                d, oflag = ood_verdict(self.ood, futures[r], tid)
                verdicts[r] = AnomalyVerdict(
                    failure_score=float(scores[j]), ood_distance=d,
                    failure_flag=bool(flags[j]), ood_flag=bool(oflag))
        return verdicts

    def evaluate(self, history: np.ndarray, task_id: int, rng: np.random.Generator) -> AnomalyVerdict:
        return self.evaluate_batch(history[None], np.array([task_id]), rng)[0]


def build_monitor(world_model: WorldModel, records: list[TrajectoryRecord],
                  cfg: MonitorConfig, p_h: dict, seed: int, split_seed: int = 0,
                  classifier_steps: int = 300,
                  prev: AnomalyMonitor | None = None,
                  classifier_records: list[TrajectoryRecord] | None = None,
                  log_fn=None) -> AnomalyMonitor:
    """Train per-task failure classifiers and build the OOD index.

    records: the aggregated buffer (OOD coverage). classifier_records: the most
    recent round only (failure finetuning); defaults to `records`. Tasks whose
    recent data lacks failure or human samples keep their previous classifier.
    """
    if not records:
        raise MonitorError("empty buffer")
    clf_records = classifier_records if classifier_records is not None else records
    latents_all = encode_records(world_model, records)

    # OOD: embeddings per task from the aggregated buffer
    by_task: dict[int, list[np.ndarray]] = {}
    for rec, z in zip(records, latents_all):
        by_task.setdefault(rec.task_id, []).append(z)
    task_embeddings = {tid: np.concatenate(zs, axis=0) for tid, zs in by_task.items()}
    thetas = {tid: calibrate_theta(float(p_h.get(tid, 1.0))) for tid in task_embeddings}
    ood = build_ood_index(task_embeddings, cfg.pca_dims, cfg.centroids, thetas, seed)

    # failure classifiers: per task, on the most recent labels
    clf_latents = (latents_all if clf_records is records
                   else encode_records(world_model, clf_records))
    classifiers: dict[int, FailureClassifier] = {}
    for tid in sorted(task_embeddings):
        zs, ys = [], []
        for rec, z in zip(clf_records, clf_latents):
            if rec.task_id != tid:
                continue
            zs.append(z)
            ys.append(label_trajectory(rec.control_flags, cfg.pre_window))
        flat = np.concatenate(ys) if ys else np.array([])
        has_all = len(flat) and {LABEL_FAILURE, LABEL_HUMAN} <= set(flat.tolist())
        prev_clf = prev.classifiers.get(tid) if prev else None
        if not has_all:
            classifiers[tid] = prev_clf
            if log_fn:
                log_fn(f"monitor: task {tid} lacks failure/human samples, keeping previous classifier")
            continue
        ccfg = ClassifierConfig(context=cfg.pre_window, latent_dim=zs[0].shape[1])
        classifiers[tid] = train_failure_classifier(
            zs, ys, seed=seed + tid, cfg=ccfg, steps=classifier_steps,
            init_from=prev_clf, log_fn=log_fn)
    return AnomalyMonitor(world_model, cfg, classifiers, ood, {int(k): float(v) for k, v in p_h.items()})


def update_monitor(monitor: AnomalyMonitor, round_records: list[TrajectoryRecord],
                   all_records: list[TrajectoryRecord], p_h: dict, seed: int,
                   classifier_steps: int = 300, log_fn=None) -> AnomalyMonitor:
    """Next-round monitor: classifier finetuned on the new round, OOD rebuilt on
    the aggregated buffer, thresholds recalibrated. The world model is untouched."""
    if not round_records:
        raise MonitorError("empty round buffer")
    return build_monitor(monitor.world_model, all_records, monitor.cfg, p_h, seed,
                         classifier_steps=classifier_steps, prev=monitor,
                         classifier_records=round_records, log_fn=log_fn)


# -- persistence ------------------------------------------------------------------

BUNDLE_MAGIC = b"FMMB"
BUNDLE_VERSION = 1


def _pack_section(name: str, payload: bytes) -> bytes:
    nb = name.encode()
    return (struct.pack("<I", len(nb)) + nb + struct.pack("<I", len(payload))
            + payload + struct.pack("<I", zlib.crc32(payload)))


def save_monitor_bundle(path: str | Path, monitor: AnomalyMonitor, variant: str = "primary"):
    """Container: json meta + projection + per-task centroids/archives + classifier FMCK blobs."""
    from .learncore.checkpoint import save_arrays as _sa
    import io, tempfile, os

    sections: list[tuple[str, bytes]] = []
    meta = {
        "variant": variant,
        "p_h": {str(k): v for k, v in monitor.p_h.items()},
        "thetas": {str(t): e.theta for t, e in monitor.ood.tasks.items()},
        "alphas": {str(t): e.alpha for t, e in monitor.ood.tasks.items()},
        "classifier_cfg": {
            str(t): {"context": c.cfg.context, "width": c.cfg.width,
                     "depth": c.cfg.depth, "heads": c.cfg.heads, "latent_dim": c.cfg.latent_dim}
            for t, c in monitor.classifiers.items() if c is not None},
        "config": {
            "rollout_length": monitor.cfg.rollout_length,
            "num_futures": monitor.cfg.num_futures,
            "pre_window": monitor.cfg.pre_window,
            "pca_dims": monitor.cfg.pca_dims,
            "centroids": monitor.cfg.centroids,
            "hysteresis": monitor.cfg.hysteresis,
            "decision_stride": monitor.cfg.decision_stride,
            "trigger": {"threshold_count": monitor.cfg.trigger.threshold_count,
                        "evaluation_indices": list(monitor.cfg.trigger.evaluation_indices),
                        "vote_fraction": monitor.cfg.trigger.vote_fraction},
        },
    }
    sections.append(("meta", json.dumps(meta, sort_keys=True).encode()))

    def arr_bytes(arrays: dict) -> bytes:
        with tempfile.NamedTemporaryFile(delete=False) as tmp:
            pass
        try:
            _sa(tmp.name, arrays)
            return Path(tmp.name).read_bytes()
        finally:
            os.unlink(tmp.name)

    sections.append(("projection", arr_bytes({
        "mean": monitor.ood.projection.mean.astype(np.float32),
        "components": monitor.ood.projection.components.astype(np.float32)})))
    for tid, entry in sorted(monitor.ood.tasks.items()):
        sections.append((f"ood/{tid}", arr_bytes({
            "centroids": entry.centroids.astype(np.float32),
            "archive": entry.archive.astype(np.float32)})))
    for tid, clf in sorted(monitor.classifiers.items()):
        if clf is not None:
            sections.append((f"classifier/{tid}", arr_bytes(dict(clf.named_parameters()))))

    buf = bytearray(BUNDLE_MAGIC + struct.pack("<II", BUNDLE_VERSION, len(sections)))
    for name, payload in sections:
        buf += _pack_section(name, payload)
    Path(path).write_bytes(bytes(buf))


def load_monitor_bundle(path: str | Path, world_model: WorldModel) -> AnomalyMonitor:
    import tempfile, os

    raw = Path(path).read_bytes()
    if raw[:4] != BUNDLE_MAGIC:
        raise MonitorError(f"{path}: bad bundle magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != BUNDLE_VERSION:
        raise MonitorError(f"{path}: unsupported bundle version {version}")
    off = 12
    sections: dict[str, bytes] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode()
        off += nlen
        (plen,) = struct.unpack_from("<I", raw, off)
        off += 4
        payload = raw[off:off + plen]
        off += plen
        (crc,) = struct.unpack_from("<I", raw, off)
        off += 4
        if zlib.crc32(payload) != crc:
            raise MonitorError(f"{path}: checksum mismatch in section {name}")
        sections[name] = payload

    def arrays_of(payload: bytes) -> dict:
        with tempfile.NamedTemporaryFile(delete=False) as tmp:
            tmp.write(payload)
        try:
            return load_arrays(tmp.name)
        finally:
            os.unlink(tmp.name)

    meta = json.loads(sections["meta"].decode())
    mc = meta["config"]
    cfg = MonitorConfig(
        rollout_length=mc["rollout_length"], num_futures=mc["num_futures"],
        pre_window=mc["pre_window"], pca_dims=mc["pca_dims"], centroids=mc["centroids"],
        hysteresis=mc["hysteresis"], decision_stride=mc["decision_stride"],
        trigger=TriggerRule(mc["trigger"]["threshold_count"],
                            tuple(mc["trigger"]["evaluation_indices"]),
                            mc["trigger"]["vote_fraction"]))
    proj_arrays = arrays_of(sections["projection"])
    ood = OODIndex(projection=Projection(mean=proj_arrays["mean"].astype(np.float64),
                                         components=proj_arrays["components"].astype(np.float64)))
    for name, payload in sections.items():
        if name.startswith("ood/"):
            tid = int(name.split("/")[1])
            arrays = arrays_of(payload)
            theta = meta["thetas"][str(tid)]
            entry = TaskOODEntry(centroids=arrays["centroids"].astype(np.float64),
                                 archive=arrays["archive"].astype(np.float64),
                                 theta=theta, alpha=meta["alphas"][str(tid)])
            ood.tasks[tid] = entry
    classifiers: dict[int, FailureClassifier] = {}
    for name, payload in sections.items():
        if name.startswith("classifier/"):
            tid = int(name.split("/")[1])
            arrays = arrays_of(payload)
            ccfg = ClassifierConfig(**meta["classifier_cfg"][str(tid)])
            clf = FailureClassifier(ccfg, seed=0)
            params = dict(clf.named_parameters())
            for pname, arr in arrays.items():
                params[pname].data = arr.copy()
            classifiers[tid] = clf
    for tid in ood.tasks:
        classifiers.setdefault(tid, None)
    p_h = {int(k): float(v) for k, v in meta["p_h"].items()}
    return AnomalyMonitor(world_model, cfg, classifiers, ood, p_h)
