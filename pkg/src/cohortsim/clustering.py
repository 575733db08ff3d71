"""Online per-round clustering of participant updates and partition decisions.

Participants come and go every round, and their update vectors are only
comparable within a round (they depend on that round's model).  The cluster
prototype that persists across rounds is therefore the *label* each client
was assigned, not any absolute centroid: each round, the centroids are
recomputed from the returning labeled participants and everyone present is
(re)assigned to the nearest one.  All geometry runs on L2-normalized deltas,
where nearest-in-L2 coincides with most-similar-in-cosine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .population import Population
from .rewards import (  # noqa: F401  (re-exported public surface)
    RewardLedger,
    exploit_reward,
    explore_reward,
    l2_normalize,
    spawn_rewards,
    update_reward,
)
from .seeds import ensure_rng

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6
RHO_SMOOTHING_ROUNDS = 5
CHURN_STABLE_ROUNDS = 3
CHURN_STABLE_THRESHOLD = 0.2


@dataclass
class ClusterState:
    """Per-cohort clustering memory.

    ``persisted_labels`` is the long-lived prototype: every client that ever
    participated keeps the cluster index it was last assigned.  Round
    centroids are scratch state, valid only within the round that computed
    them.
    """

    k: int
    persisted_labels: dict[int, int] = field(default_factory=dict)
    round_centroids: np.ndarray | None = None
    initialized: bool = False
    dispersion_history: list[tuple[int, float, float]] = field(default_factory=list)
    churn_history: list[float | None] = field(default_factory=list)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("split arity must be >= 2")


@dataclass(frozen=True)
class PartitionConfig:
    """Knobs for when and how a cohort may split."""

    alpha: float = 1.0
    min_participants_per_cohort: int = 8
    clustering_start_round: int = 0
    partition_window: tuple[int, int] = (0, 10**9)
    max_tree_depth: int = 3
    required_reduction_exponent: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.min_participants_per_cohort < 1:
            raise ValueError("min_participants_per_cohort must be >= 1")
        if self.partition_window[0] >= self.partition_window[1]:
            raise ValueError("partition window must satisfy earliest < latest")


@dataclass(frozen=True)
class PartitionDecision:
    split: bool
    arity: int
    rho: float
    clauses: dict[str, bool]


def _normalized_matrix(deltas: dict[int, np.ndarray]) -> tuple[list[int], np.ndarray]:
    ids = sorted(deltas)
    mat = np.stack([l2_normalize(np.asarray(deltas[i], dtype=np.float64)) for i in ids])
    return ids, mat


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = [x[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((x - c) ** 2, axis=1) for c in centroids], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centroids.append(x[int(rng.integers(n))])
            continue
        probs = d2 / total
        centroids.append(x[int(rng.choice(n, p=probs))])
    return np.stack(centroids)


def _assign_nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _reseed_empty(
    x: np.ndarray, centroids: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Move each vacated centroid onto the participant farthest from its own."""
    centroids = centroids.copy()
    for k in range(centroids.shape[0]):
        if np.any(labels == k):
            continue
        dist = np.linalg.norm(x - centroids[labels], axis=1)
        far = int(dist.argmax())
        centroids[k] = x[far]
        labels[far] = k
    return centroids


def full_kmeans(
    x: np.ndarray, k: int, rng: np.random.Generator | int
) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iteration with k-means++ seeding on already-normalized rows."""
    rng = ensure_rng(rng)
    centroids = _kmeans_plus_plus(x, k, rng)
    labels = _assign_nearest(x, centroids)
    for _ in range(KMEANS_MAX_ITER):
        centroids = _reseed_empty(x, centroids, labels)
        new_centroids = np.stack(
            [x[labels == j].mean(axis=0) for j in range(k)]
        )
        shift = float(np.linalg.norm(new_centroids - centroids))
        centroids = new_centroids
        new_labels = _assign_nearest(x, centroids)
        moved = np.any(new_labels != labels)
        labels = new_labels
        if shift < KMEANS_TOL and not moved:
            break
    return labels, centroids


def init_prototypes(
    state: ClusterState,
    deltas: dict[int, np.ndarray],
    rng: np.random.Generator | int,
) -> ClusterState:
    """Seed the persisted labels with one full K-means pass over this round.

    With fewer participants than clusters, initialization is deferred to a
    later round; the call is a no-op.
    """
    if state.initialized:
        raise ValueError("cluster state already initialized")
    if len(deltas) < state.k:
        return state
    ids, x = _normalized_matrix(deltas)
    labels, centroids = full_kmeans(x, state.k, rng)
    for cid, lab in zip(ids, labels):
        state.persisted_labels[cid] = int(lab)
    state.round_centroids = centroids
    state.initialized = True
    return state


def assign_round(
    state: ClusterState, deltas: dict[int, np.ndarray]
) -> dict[int, int]:
    """One online clustering step over this round's participants.

    Returning participants vote the round's centroids through their persisted
    labels; then everyone present, labeled or new, is assigned to the nearest
    centroid and the assignment is persisted.  A cluster with no returning
    member is re-seeded at the participant farthest from its assigned
    centroid.
    """
    if not state.initialized:
        raise ValueError("cluster state not initialized")
    ids, x = _normalized_matrix(deltas)
    centroids = np.zeros((state.k, x.shape[1]))
    occupied = np.zeros(state.k, dtype=bool)
    prior = np.array([state.persisted_labels.get(i, -1) for i in ids])
    for k in range(state.k):
        members = prior == k
        if np.any(members):
            centroids[k] = x[members].mean(axis=0)
            occupied[k] = True
    if not np.any(occupied):
        # No participant carries a label this round; fall back to scratch.
        centroids = state.round_centroids
        occupied[:] = True
    else:
        # Vacated clusters re-seed at the farthest participant, one at a time.
        while not np.all(occupied):
            live = np.flatnonzero(occupied)
            d2 = ((x[:, None, :] - centroids[None, live, :]) ** 2).sum(axis=2)
            far = int(d2.min(axis=1).argmax())
            k = int(np.flatnonzero(~occupied)[0])
            centroids[k] = x[far]
            occupied[k] = True
    labels = _assign_nearest(x, centroids)
    had_before = prior >= 0
    if np.any(had_before):
        churn = float(np.mean(labels[had_before] != prior[had_before]))
    else:
        churn = None
    state.churn_history.append(churn)
    state.round_centroids = centroids
    assignment = {}
    for cid, lab in zip(ids, labels):
        state.persisted_labels[cid] = int(lab)
        assignment[cid] = int(lab)
    return assignment


def labels_stable(state: ClusterState) -> bool:
    """Label churn below threshold over the trailing stability window."""
    tail = state.churn_history[-CHURN_STABLE_ROUNDS:]
    if len(tail) < CHURN_STABLE_ROUNDS:
        return False
    return all(c is not None and c < CHURN_STABLE_THRESHOLD for c in tail)


def estimate_reduction(
    state: ClusterState,
    deltas: dict[int, np.ndarray],
    round_index: int = 0,
) -> float:
    """Estimated heterogeneity-reduction ratio from this round's geometry.

    The ratio of within-cluster dispersion to overall dispersion of the
    normalized updates; near 0 means the identified clusters are tight and a
    split would pay off, near 1 means no usable structure.  Smoothed with a
    trailing mean so one noisy round cannot trigger a split.
    """
    if not state.initialized:
        raise ValueError("cluster state not initialized")
    ids, x = _normalized_matrix(deltas)
    overall = float(np.linalg.norm(x - x.mean(axis=0), axis=1).mean())
    labels = np.array([state.persisted_labels[i] for i in ids])
    occupied = sorted(set(labels.tolist()))
    if overall == 0.0 or len(occupied) < 2:
        ratio = 1.0
    else:
        per_cluster = [
            float(
                np.linalg.norm(
                    x[labels == k] - state.round_centroids[k], axis=1
                ).mean()
            )
            for k in occupied
        ]
        intra = float(np.mean(per_cluster))
        ratio = intra / overall
    state.dispersion_history.append((round_index, overall, ratio * overall))
    return smoothed_reduction(state)


def smoothed_reduction(state: ClusterState) -> float:
    """Trailing-mean of the dispersion ratio over the last few rounds."""
    tail = state.dispersion_history[-RHO_SMOOTHING_ROUNDS:]
    if not tail:
        return 1.0
    ratios = [intra / overall if overall > 0 else 1.0 for _, overall, intra in tail]
    return float(np.mean(ratios))


def partition_criteria(
    state: ClusterState,
    cfg: PartitionConfig,
    per_round_resource: float,
    current_round: int,
    tree_depth: int,
    root_resource: float,
    root_dispersion: float,
) -> PartitionDecision:
    """Decide whether this cohort should split into its identified clusters.

    All four clauses must hold: (a) we are inside the partition window with
    stable cluster labels, (b) the estimated dispersion ratio shows at least
    the 1/sqrt(K) reduction needed to compensate for splitting the training
    resource K ways, (c) each child would keep enough participants per round
    to converge, where the floor scales like alpha * sqrt(P0 / G0^2) from the
    root cohort's resource and initial dispersion, and (d) the tree has room.
    """
    rho = smoothed_reduction(state)
    earliest, latest = cfg.partition_window
    in_window = (
        earliest <= current_round <= latest
        and current_round >= cfg.clustering_start_round
        and state.initialized
        and labels_stable(state)
    )
    reduction_ok = rho <= state.k ** (-cfg.required_reduction_exponent)
    if root_dispersion > 0:
        resource_floor = cfg.alpha * float(np.sqrt(root_resource)) / root_dispersion
    else:
        resource_floor = float("inf")
    resource_ok = per_round_resource / state.k >= max(
        cfg.min_participants_per_cohort, resource_floor
    )
    depth_ok = tree_depth < cfg.max_tree_depth
    clauses = {
        "window_stable": in_window,
        "reduction": reduction_ok,
        "resource": resource_ok,
        "depth": depth_ok,
    }
    return PartitionDecision(
        split=all(clauses.values()), arity=state.k, rho=rho, clauses=clauses
    )


def similarity_correlation(
    deltas: dict[int, np.ndarray], population: Population
) -> float:
    """Pearson correlation between gradient and data similarity, pairwise.

    Gradient similarity is the cosine between normalized updates; data
    similarity is the negative L2 distance between label histograms.  Used as
    a diagnostic for when gradients have become informative enough to cluster
    on.  Defined as 0 when either side has no variance.
    """
    ids, x = _normalized_matrix(deltas)
    if len(ids) < 3:
        raise ValueError("need at least 3 participants")
    hist = np.stack([population.client(i).label_histogram for i in ids])
    iu = np.triu_indices(len(ids), k=1)
    grad_sim = (x @ x.T)[iu]
    data_sim = -np.sqrt(
        np.maximum(
            ((hist[:, None, :] - hist[None, :, :]) ** 2).sum(axis=2), 0.0
        )
    )[iu]
    if float(grad_sim.std()) == 0.0 or float(data_sim.std()) == 0.0:
        return 0.0
    return float(np.corrcoef(grad_sim, data_sim)[0, 1])
