"""Synthetic data generation, zero-shot scoring and test-stream simulation.

The generator builds class directions on the sphere with controllable
confusion pairs, draws features around them inside the class-direction
subspace and produces deliberately misaligned initial prototypes.  The
misalignment model (documented on :func:`generate_synthetic`) is what makes
the refinement methods distinguishable at desk scale: accuracy gains must come
from geometry, not from an unfair baseline.

Stream sampling follows the batch-realistic protocol (few effective classes
per task) and the online protocol (Dirichlet-correlated batches), both fully
seeded.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corelinalg import EmbeddingMatrix, normalize_rows
from .diagnostics import cosine_assign
from .errors import EmptyClassPool, InfeasibleConfusion, NotNormalized, ShapeMismatch

# Prototype-misalignment model constants.  Confused-pair prototypes are pulled
# toward their partner's direction, their residual error points partly at the
# nearest unconfused class, every prototype picks up a shared contamination
# direction, and unconfused prototypes get a small random tilt.  All noise
# lives inside the class-direction subspace, where it affects cosine scores.
PROTO_PULL = 0.75
PROTO_NOISE_PAIRED = 0.6
PROTO_NOISE_FREE = 0.15
PAIRED_NOISE_RANDOM_MIX = 0.3
CONTAMINATION_RANGE = (0.8, 1.8)

STREAM_MODES = ("batch_realistic", "online_dirichlet", "separate")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic classification task."""

    k: int
    d: int
    n_per_class: int
    confusion_pairs: tuple[tuple[int, int, float], ...] = ()
    noise_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.d < 1 or self.n_per_class < 1:
            raise ShapeMismatch("k, d and n_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ShapeMismatch("noise_sigma must be >= 0")
        pairs = tuple(
            (int(i), int(j), float(rho)) for i, j, rho in self.confusion_pairs
        )
        for i, j, rho in pairs:
            if i == j:
                raise ShapeMismatch(f"confusion pair ({i}, {j}) must use distinct classes")
            if not (0 <= i < self.k and 0 <= j < self.k):
                raise ShapeMismatch(f"confusion pair ({i}, {j}) out of range")
            if not (0.0 <= rho < 1.0):
                raise ShapeMismatch(f"confusion cosine {rho} must lie in [0, 1)")
        object.__setattr__(self, "confusion_pairs", pairs)


def _rotate_pairs(dirs: np.ndarray, pairs) -> np.ndarray | None:
    """Exact sequential construction; None when pairs overlap too much."""
    constrained: set[int] = set()
    out = dirs.copy()
    for i, j, rho in pairs:
        if j not in constrained:
            anchor, moving = i, j
        elif i not in constrained:
            anchor, moving = j, i
        else:
            return None
        u = out[anchor]
        resid = out[moving] - (out[moving] @ u) * u
        nrm = np.linalg.norm(resid)
        if nrm <= 1e-12:
            raise InfeasibleConfusion(
                f"classes {i} and {j} are collinear; cannot realize cosine {rho}"
            )
        out[moving] = rho * u + np.sqrt(1.0 - rho * rho) * (resid / nrm)
        constrained.update((i, j))
    return out


def _gram_construction(dirs: np.ndarray, pairs, d: int, rng) -> np.ndarray:
    """Overlapping pairs: edit the Gram matrix, check PSD and rank, refactor."""
    k = dirs.shape[0]
    g = dirs @ dirs.T
    for i, j, rho in pairs:
        g[i, j] = g[j, i] = rho
    np.fill_diagonal(g, 1.0)
    eigvals, eigvecs = np.linalg.eigh(g)
    if eigvals.min() < -1e-9:
        raise InfeasibleConfusion(
            f"requested cosine pattern is not positive semidefinite "
            f"(min eigenvalue {eigvals.min():.3e})"
        )
    keep = eigvals > 1e-9 * max(eigvals.max(), 1.0)
    rank = int(keep.sum())
    if rank > d:
        raise InfeasibleConfusion(
            f"cosine pattern needs {rank} dimensions but d={d}"
        )
    factor = eigvecs[:, keep] * np.sqrt(eigvals[keep])  # (k, rank)
    basis, _ = np.linalg.qr(rng.normal(size=(d, rank)))
    out = factor @ basis.T
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _span_basis(dirs: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(dirs.T)  # (d, min(k, d))
    return q


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[EmbeddingMatrix, np.ndarray, EmbeddingMatrix, EmbeddingMatrix]:
    """Build (features, labels, true_directions, initial_prototypes).

    Class directions are sampled uniformly on the sphere, then rotated pair by
    pair so each confusion pair meets its target cosine exactly; overlapping
    pair sets go through a Gram edit whose positive-semidefiniteness and rank
    checks detect infeasible patterns.  Features are the class direction plus
    isotropic noise drawn inside the span of the class directions (the
    operative subspace for cosine scores; ambient-orthogonal noise would be
    invisible to every classifier compared here), normalized to the sphere.

    Initial prototypes model misaligned zero-shot prototypes: each confused
    prototype is pulled toward its partner's direction and tilted toward the
    nearest unconfused class, and all prototypes share a common contamination
    direction with per-class random strength.
    """
    rng = np.random.default_rng(spec.seed)
    k, d = spec.k, spec.d
    dirs = rng.normal(size=(k, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    rotated = _rotate_pairs(dirs, spec.confusion_pairs)
    if rotated is None:
        dirs = _gram_construction(dirs, spec.confusion_pairs, d, rng)
    else:
        dirs = rotated
    for i, j, rho in spec.confusion_pairs:
        got = float(dirs[i] @ dirs[j])
        if abs(got - rho) > 1e-6:
            raise InfeasibleConfusion(
                f"pair ({i}, {j}) realized cosine {got:.8f}, wanted {rho}"
            )

    basis = _span_basis(dirs)  # (d, m)
    m = basis.shape[1]
    labels = np.repeat(np.arange(k), spec.n_per_class)
    raw = dirs[labels] + spec.noise_sigma * rng.normal(size=(labels.size, m)) @ basis.T
    features = normalize_rows(EmbeddingMatrix(raw))

    contamination = rng.normal(size=m) @ basis.T
    contamination /= np.linalg.norm(contamination)
    strength = rng.uniform(*CONTAMINATION_RANGE, size=k)
    proto = dirs + strength[:, None] * contamination

    in_pair = np.zeros(k, dtype=bool)
    for i, j, rho in spec.confusion_pairs:
        proto[i] = proto[i] + PROTO_PULL * dirs[j]
        proto[j] = proto[j] + PROTO_PULL * dirs[i]
        in_pair[[i, j]] = True

    free = [c for c in range(k) if not in_pair[c]]
    tilt = np.zeros((k, d))
    for i, j, rho in spec.confusion_pairs:
        mid = dirs[i] + dirs[j]
        mid /= np.linalg.norm(mid)
        candidates = free if len(free) >= 2 else [c for c in range(k) if c not in (i, j)]
        order = sorted(candidates, key=lambda c: -(dirs[c] @ mid))
        for member, slot in ((i, 0), (j, 1)):
            z = rng.normal(size=m) @ basis.T
            z /= np.linalg.norm(z)
            if len(order) > slot:
                mixed = PAIRED_NOISE_RANDOM_MIX * z + (
                    1.0 - PAIRED_NOISE_RANDOM_MIX
                ) * dirs[order[slot]]
                mixed /= np.linalg.norm(mixed)
            else:
                mixed = z
            tilt[member] = PROTO_NOISE_PAIRED * mixed
    for c in free:
        z = rng.normal(size=m) @ basis.T
        z /= np.linalg.norm(z)
        tilt[c] = PROTO_NOISE_FREE * z

    prototypes = normalize_rows(EmbeddingMatrix(proto + tilt))
    true_directions = EmbeddingMatrix(dirs, unit_rows=True)
    return features, labels, true_directions, prototypes


def zero_shot_accuracy(
    features: EmbeddingMatrix,
    labels: Sequence[int],
    prototypes: EmbeddingMatrix,
) -> float:
    """Fraction of samples whose cosine-argmax class matches the label."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape[0] != features.rows:
        raise ShapeMismatch("labels length must match feature rows")
    if labels.size and (labels.min() < 0 or labels.max() >= prototypes.rows):
        raise ShapeMismatch("labels out of range for the prototype set")
    predicted = cosine_assign(features, prototypes).labels()
    return float(np.mean(predicted == labels))


@dataclass(frozen=True)
class StreamConfig:
    """How evaluation tasks are drawn from a dataset."""

    mode: str = "batch_realistic"
    batch_size: int = 64
    n_tasks: int = 1000
    keff_range: tuple[int, int] = (1, 4)
    gamma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.mode not in STREAM_MODES:
            raise ShapeMismatch(f"mode must be one of {STREAM_MODES}")
        if self.batch_size < 1 or self.n_tasks < 1:
            raise ShapeMismatch("batch_size and n_tasks must be >= 1")
        lo, hi = self.keff_range
        if not (1 <= lo <= hi):
            raise ShapeMismatch(f"invalid keff_range {self.keff_range}")
        if self.mode == "online_dirichlet" and self.gamma <= 0:
            raise ShapeMismatch("gamma must be positive for online streams")


@dataclass(frozen=True)
class StreamTask:
    """One evaluation batch: sample indices, labels and the visible class set."""

    indices: np.ndarray
    labels: np.ndarray
    present_classes: frozenset[int]
    with_replacement: bool = False


def _class_pools(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {
        int(c): np.flatnonzero(labels == c)
        for c in np.unique(labels)
    }


def draw_proportions(k: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet(gamma * 1_k) draw of class proportions."""
    if gamma <= 0:
        raise ShapeMismatch("gamma must be positive")
    return rng.dirichlet(np.full(k, gamma))


def largest_remainder_counts(total: int, proportions: np.ndarray) -> np.ndarray:
    """Apportion ``total`` by proportions: floor, then residual to largest remainders."""
    raw = proportions * total
    counts = np.floor(raw).astype(int)
    residual = total - int(counts.sum())
    if residual > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:residual]] += 1
    return counts


def sample_batch_tasks(labels: Sequence[int], cfg: StreamConfig) -> list[StreamTask]:
    """Batch-realistic protocol: few effective classes per task.

    Per task: K_eff is uniform over ``keff_range``, that many classes are
    drawn without replacement, and ``batch_size`` samples come uniformly from
    the union of their pools (with replacement, flagged, only if the union is
    too small).
    """
    if cfg.mode != "batch_realistic":
        raise ShapeMismatch("sample_batch_tasks requires batch_realistic mode")
    labels = np.asarray(labels, dtype=np.intp)
    pools = _class_pools(labels)
    eligible = np.array(sorted(pools))
    lo, hi = cfg.keff_range
    if hi > eligible.size:
        raise EmptyClassPool(
            f"keff_range upper bound {hi} exceeds the {eligible.size} populated classes"
        )
    rng = np.random.default_rng(cfg.seed)
    tasks = []
    for _ in range(cfg.n_tasks):
        k_eff = int(rng.integers(lo, hi + 1))
        classes = rng.choice(eligible, size=k_eff, replace=False)
        union = np.concatenate([pools[int(c)] for c in classes])
        replace = union.size < cfg.batch_size
        if replace:
            warnings.warn(
                f"task pool of {union.size} samples smaller than batch "
                f"size {cfg.batch_size}; sampling with replacement",
                stacklevel=2,
            )
        idx = rng.choice(union, size=cfg.batch_size, replace=replace)
        tasks.append(
            StreamTask(
                indices=idx,
                labels=labels[idx],
                present_classes=frozenset(int(c) for c in classes),
                with_replacement=replace,
            )
        )
    return tasks


def sample_online_stream(labels: Sequence[int], cfg: StreamConfig) -> list[StreamTask]:
    """One online stream: an ordered list of correlated batches.

    Class proportions are drawn once per stream from Dirichlet(gamma); every
    batch apportions its size by those proportions (largest-remainder
    rounding) and draws per class without replacement until the pool runs dry,
    then with replacement (flagged).  ``separate`` mode is the gamma -> 0
    limit: classes are presented sequentially, one class per batch.
    """
    labels = np.asarray(labels, dtype=np.intp)
    pools = _class_pools(labels)
    k = int(labels.max()) + 1 if labels.size else 0
    rng = np.random.default_rng(cfg.seed)

    if cfg.mode == "separate":
        tasks = []
        for c in range(k):
            pool = pools.get(c)
            if pool is None:
                continue
            order = rng.permutation(pool)
            for start in range(0, order.size, cfg.batch_size):
                chunk = order[start:start + cfg.batch_size]
                tasks.append(
                    StreamTask(
                        indices=chunk,
                        labels=labels[chunk],
                        present_classes=frozenset((c,)),
                    )
                )
        return tasks

    if cfg.mode != "online_dirichlet":
        raise ShapeMismatch("sample_online_stream requires online_dirichlet or separate mode")

    proportions = draw_proportions(k, cfg.gamma, rng)
    queues = {c: list(rng.permutation(pool)) for c, pool in pools.items()}
    n_batches = int(np.ceil(labels.size / cfg.batch_size))
    tasks = []
    for _ in range(n_batches):
        counts = largest_remainder_counts(cfg.batch_size, proportions)
        idx_parts = []
        replace_used = False
        for c in range(k):
            need = int(counts[c])
            if need == 0:
                continue
            pool = pools.get(c)
            if pool is None or pool.size == 0:
                raise EmptyClassPool(f"class {c} has no samples to draw from")
            queue = queues[c]
            take = [queue.pop() for _ in range(min(need, len(queue)))]
            short = need - len(take)
            if short > 0:
                replace_used = True
                take.extend(rng.choice(pool, size=short, replace=True).tolist())
            idx_parts.append(np.asarray(take, dtype=np.intp))
        idx = np.concatenate(idx_parts) if idx_parts else np.empty(0, dtype=np.intp)
        if replace_used:
            warnings.warn("class pool exhausted; continuing with replacement", stacklevel=2)
        tasks.append(
            StreamTask(
                indices=idx,
                labels=labels[idx],
                present_classes=frozenset(int(c) for c in range(k) if counts[c] > 0),
                with_replacement=replace_used,
            )
        )
    return tasks


def evaluate_over_tasks(
    tasks: Sequence[StreamTask],
    features: EmbeddingMatrix,
    prototypes: EmbeddingMatrix,
    restrict_to_present: bool = True,
) -> tuple[float, list[float]]:
    """Per-task zero-shot accuracy and its mean.

    By default prediction is restricted to each task's visible class subset,
    matching the effective-class protocol; the unrestricted variant is
    available behind the flag.
    """
    if not tasks:
        raise ShapeMismatch("tasks must be nonempty")
    if not features.unit_rows or not prototypes.unit_rows:
        raise NotNormalized("features and prototypes must carry the unit_rows flag")
    if features.cols != prototypes.cols:
        raise ShapeMismatch("feature and prototype dimensions differ")
    scores_full = features.data @ prototypes.data.T
    accuracies = []
    for task in tasks:
        scores = scores_full[task.indices]
        if restrict_to_present:
            mask = np.full(prototypes.rows, -np.inf)
            present = sorted(task.present_classes)
            mask[present] = 0.0
            scores = scores + mask
        predicted = np.argmax(scores, axis=1)
        accuracies.append(float(np.mean(predicted == task.labels)))
    return float(np.mean(accuracies)), accuracies
