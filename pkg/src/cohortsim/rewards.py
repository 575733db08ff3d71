"""Affinity reward arithmetic: fit scores, decayed updates, tree propagation.

A participant's instant reward for the cohort it trained with is a fit score
of its update direction against the cohort's estimated center.  Rewards for
cohorts it did not train with are predicted by propagating the instant reward
through the cohort tree, attenuated by tree distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Protocol

import numpy as np

SPAWN_BONUS = 0.1
DEFAULT_GAMMA = 0.2


class TreeLike(Protocol):
    """Minimal cohort-tree view needed for reward propagation."""

    def leaf_ids(self) -> Iterable[Hashable]: ...

    def distance(self, a: Hashable, b: Hashable) -> int: ...


@dataclass
class RewardLedger:
    """Client/cohort reward table with exponential update decay.

    ``rewards`` maps ``(client_id, cohort_id)`` to the tracked reward value.
    Missing entries read as 0.  ``direct`` records the pairs whose value came
    from actually training together; values for other cohorts are predictions
    and keep moving until the client explores them.
    """

    gamma: float = DEFAULT_GAMMA
    rewards: dict[tuple[int, Hashable], float] = field(default_factory=dict)
    direct: set[tuple[int, Hashable]] = field(default_factory=set)

    def get(self, client_id: int, cohort_id: Hashable) -> float:
        return self.rewards.get((client_id, cohort_id), 0.0)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Unit-normalize ``v``; the zero vector is returned unchanged."""
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return v
    return v / n


def exploit_reward(
    deltas: dict[int, np.ndarray], known_members: set[int]
) -> dict[int, float]:
    """Fit score of each participant against the cohort's estimated center.

    The center is the mean of the normalized updates of participants that are
    already known members of the cohort; if no known member participated this
    round, every participant counts as known.  With D_i the distance of
    participant i to the center and T = mean(D) + std(D) over this round's
    participants, the score is 1 - D_i / T.  Negative scores mark outliers.
    """
    if not deltas:
        return {}
    ids = sorted(deltas)
    normed = {i: l2_normalize(np.asarray(deltas[i], dtype=np.float64)) for i in ids}
    anchor_ids = [i for i in ids if i in known_members]
    if not anchor_ids:
        anchor_ids = ids
    center = np.mean([normed[i] for i in anchor_ids], axis=0)
    dist = np.array([np.linalg.norm(normed[i] - center) for i in ids])
    threshold = float(dist.mean() + dist.std())
    if threshold == 0.0:
        return {i: 1.0 for i in ids}
    return {i: 1.0 - float(d) / threshold for i, d in zip(ids, dist)}


def update_reward(
    ledger: RewardLedger, client_id: int, cohort_id: Hashable, delta_r: float
) -> RewardLedger:
    """Fold an instant reward into the tracked value: gamma-weighted EMA."""
    if not np.isfinite(delta_r):
        raise ValueError(f"non-finite reward increment: {delta_r!r}")
    old = ledger.get(client_id, cohort_id)
    ledger.rewards[(client_id, cohort_id)] = (
        ledger.gamma * delta_r + (1.0 - ledger.gamma) * old
    )
    ledger.direct.add((client_id, cohort_id))
    return ledger


def explore_reward(
    tree: TreeLike,
    ledger: RewardLedger,
    client_id: int,
    explored: Hashable,
    delta_r: float,
) -> RewardLedger:
    """Predict rewards for unexplored leaves from one explored cohort's reward.

    Every other leaf the client has not explored itself is predicted at
    delta_r / (d + 1), where d is the tree distance (edge count through the
    lowest common ancestor) between it and the explored cohort.  Predictions
    reflect the latest feedback rather than accumulating: stacking them would
    bury never-visited cohorts below already-visited bad ones after a few
    negative rounds and the search would stop reaching them.  Leaves the
    client has direct experience with keep their tracked value.  A zero
    reward carries no information and changes nothing.
    """
    if delta_r == 0.0:
        return ledger
    for leaf in tree.leaf_ids():
        if leaf == explored:
            continue
        key = (client_id, leaf)
        if key in ledger.direct:
            continue
        d = tree.distance(explored, leaf)
        ledger.rewards[key] = delta_r / (d + 1)
    return ledger


def spawn_rewards(
    ledger: RewardLedger,
    parent: Hashable,
    children: list,
    persisted_labels: dict[int, int],
) -> RewardLedger:
    """Seed child-cohort rewards when a cohort is partitioned.

    Every client holding a reward entry for the parent receives one entry per
    child: the parent's reward, plus a bonus for the child matching the
    client's persisted cluster label.
    """
    parent_entries = [
        (cid, r) for (cid, coh), r in ledger.rewards.items() if coh == parent
    ]
    for cid, r in parent_entries:
        label = persisted_labels.get(cid)
        for k, child in enumerate(children):
            bonus = SPAWN_BONUS if label == k else 0.0
            ledger.rewards[(cid, child)] = r + bonus
    return ledger
