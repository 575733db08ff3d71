"""Hierarchical cohort tree, affinity messages, and client-side selection.

The coordinator keeps only soft state: the tree shape and each internal
node's split mapping.  All per-client knowledge lives in the clients' own
affinity stores and travels in affinity messages, so the server never holds
per-client records.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

import numpy as np

from .rewards import SPAWN_BONUS, RewardLedger, explore_reward, update_reward
from .seeds import ensure_rng


@dataclass(frozen=True, order=True)
class CohortId:
    """Position of a cohort in the tree: the root is the empty path."""

    path: tuple[int, ...] = ()

    def render(self) -> str:
        return "0" + "".join(f".{k}" for k in self.path)

    @staticmethod
    def parse(text: str) -> "CohortId":
        parts = text.strip().split(".")
        if not parts or parts[0] != "0":
            raise ValueError(f"cohort id must start with '0': {text!r}")
        return CohortId(tuple(int(p) for p in parts[1:]))

    def child(self, k: int) -> "CohortId":
        return CohortId(self.path + (k,))

    @property
    def depth(self) -> int:
        return len(self.path)

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.render()


def tree_distance(a: CohortId, b: CohortId) -> int:
    """Edge count of the path a -> lowest common ancestor -> b."""
    common = 0
    for x, y in zip(a.path, b.path):
        if x != y:
            break
        common += 1
    return (len(a.path) - common) + (len(b.path) - common)


@dataclass
class AffinityRecord:
    reward: float = 0.0
    cluster_index: int | None = None
    last_round: int = -1


@dataclass
class AffinityStore:
    """Client-owned memory of its relationship with cohorts it knows about."""

    records: dict[CohortId, AffinityRecord] = field(default_factory=dict)
    last_updated: int = -1

    def clear(self) -> None:
        self.records.clear()
        self.last_updated = -1

    def known_cohorts(self) -> list[CohortId]:
        return sorted(self.records)

    def argmax_cohort(self) -> CohortId | None:
        """Best-reward cohort; ties break toward the smallest id."""
        if not self.records:
            return None
        return min(self.records, key=lambda c: (-self.records[c].reward, c))


@dataclass
class AffinityMessage:
    """Per-participant feedback from a cohort after a round.

    ``reward`` is the instant fit score for this round (not the client's
    tracked value); ``cluster_index`` is the participant's fresh cluster label
    and is only present once the cohort's cluster state is initialized.
    ``round_index`` stamps the message so replays after a recovery are
    idempotent on the client side.
    """

    cohort_id: CohortId
    reward: float
    cluster_index: int | None
    round_index: int = 0


@dataclass
class AffinityRequest:
    client_id: int
    requested_cohort: CohortId | None = None
    cluster_index: int | None = None


def message_to_row(msg: AffinityMessage) -> tuple[str, float, int, int]:
    """Wire form: dotted cohort path, float64 reward, L (-1 = none), round."""
    idx = -1 if msg.cluster_index is None else int(msg.cluster_index)
    return (msg.cohort_id.render(), float(msg.reward), idx, int(msg.round_index))


def row_to_message(row: tuple[str, float, int, int]) -> AffinityMessage:
    path, reward, idx, rnd = row
    return AffinityMessage(
        cohort_id=CohortId.parse(path),
        reward=float(reward),
        cluster_index=None if int(idx) == -1 else int(idx),
        round_index=int(rnd),
    )


def request_to_row(req: AffinityRequest) -> tuple[int, str, int]:
    path = "" if req.requested_cohort is None else req.requested_cohort.render()
    idx = -1 if req.cluster_index is None else int(req.cluster_index)
    return (int(req.client_id), path, idx)


def row_to_request(row: tuple[int, str, int]) -> AffinityRequest:
    cid, path, idx = row
    return AffinityRequest(
        client_id=int(cid),
        requested_cohort=None if path == "" else CohortId.parse(path),
        cluster_index=None if int(idx) == -1 else int(idx),
    )


@dataclass
class CohortNode:
    """One cohort: model state plus training and clustering bookkeeping."""

    id: CohortId
    children: list[CohortId] = field(default_factory=list)
    status: str = "active-leaf"  # active-leaf | internal | recovering
    model: Any = None
    optimizer_state: Any = None
    cluster_state: Any = None
    round_counter: int = 0
    target_participants: int = 0
    known_members: set[int] = field(default_factory=set)
    attempt: int = 0


class CohortTree:
    """Soft-state registry of cohorts; only leaves run training rounds."""

    def __init__(self, root: CohortNode | None = None):
        self.nodes: dict[CohortId, CohortNode] = {}
        if root is None:
            root = CohortNode(id=CohortId())
        self.nodes[root.id] = root

    @property
    def root(self) -> CohortNode:
        return self.nodes[CohortId()]

    def __contains__(self, cohort_id: CohortId) -> bool:
        return cohort_id in self.nodes

    def node(self, cohort_id: CohortId) -> CohortNode:
        return self.nodes[cohort_id]

    def leaf_ids(self) -> list[CohortId]:
        return sorted(
            cid
            for cid, node in self.nodes.items()
            if node.status in ("active-leaf", "recovering")
        )

    def active_leaf_ids(self) -> list[CohortId]:
        return sorted(
            cid for cid, node in self.nodes.items() if node.status == "active-leaf"
        )

    def distance(self, a: CohortId, b: CohortId) -> int:
        if a not in self.nodes or b not in self.nodes:
            raise KeyError(f"cohort not in tree: {a if a not in self.nodes else b}")
        return tree_distance(a, b)

    def snapshot(self) -> list[tuple[str, str, int]]:
        """Serializable shape: (id, status, arity) rows, sorted by id."""
        return [
            (cid.render(), node.status, len(node.children))
            for cid, node in sorted(self.nodes.items())
        ]


def client_select_cohort(
    store: AffinityStore,
    known_leaves_hint: int,
    epsilon: float,
    round_index: int,
    rng: np.random.Generator | int,
) -> AffinityRequest:
    """Decaying epsilon-greedy cohort choice made by one client.

    With probability epsilon**round_index the client explores: it targets a
    uniformly random cohort among those it knows, plus an "unexplored"
    sentinel (request with no preference, resolved by the coordinator) when
    the coordinator's leaf-count hint says cohorts it has never seen exist.
    Otherwise it exploits the argmax-reward cohort in its store.  Clients
    with an empty store always send no preference.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1]: {epsilon}")
    rng = ensure_rng(rng)
    # The rng is consulted unconditionally so a client's later draws do not
    # depend on which branch earlier rounds took.
    u = float(rng.random())
    if not store.records:
        return AffinityRequest(client_id=-1, requested_cohort=None)
    explore = u < epsilon**round_index
    if explore:
        choices: list[CohortId | None] = list(store.known_cohorts())
        if known_leaves_hint > len(choices):
            choices.append(None)  # somewhere unexplored; coordinator resolves
        pick = choices[int(rng.integers(len(choices)))]
        if pick is None:
            return AffinityRequest(client_id=-1, requested_cohort=None)
        rec = store.records[pick]
        return AffinityRequest(
            client_id=-1, requested_cohort=pick, cluster_index=rec.cluster_index
        )
    best = store.argmax_cohort()
    rec = store.records[best]
    return AffinityRequest(
        client_id=-1, requested_cohort=best, cluster_index=rec.cluster_index
    )


def match_request(
    tree: CohortTree, req: AffinityRequest, rng: np.random.Generator | int
) -> CohortId:
    """Resolve a client request to an active leaf.

    No preference means a uniformly random active leaf.  A request for an
    internal cohort (the client is unaware of a partition) descends the tree:
    the carried cluster index picks the child at the requested node, and any
    further unknown hops are uniform random.
    """
    rng = ensure_rng(rng)
    leaves = tree.active_leaf_ids()
    if not leaves:
        raise RuntimeError("cohort tree has no active leaves")
    target = req.requested_cohort
    if target is not None and target not in tree:
        target = None
    if target is None:
        return leaves[int(rng.integers(len(leaves)))]
    node = tree.node(target)
    first_hop = True
    while node.status == "internal":
        arity = len(node.children)
        if first_hop and req.cluster_index is not None and 0 <= req.cluster_index < arity:
            nxt = node.children[req.cluster_index]
        else:
            nxt = node.children[int(rng.integers(arity))]
        node = tree.node(nxt)
        first_hop = False
    return node.id


def build_feedback(
    cohort_id: CohortId,
    round_index: int,
    instant_rewards: dict[int, float],
    labels: dict[int, int] | None,
) -> list[AffinityMessage]:
    """One affinity message per participant that finished the round.

    Participants appear in ``instant_rewards``; those that failed mid-round
    were never scored and so receive nothing.
    """
    messages = []
    for cid in sorted(instant_rewards):
        label = labels.get(cid) if labels is not None else None
        messages.append(
            AffinityMessage(
                cohort_id=cohort_id,
                reward=instant_rewards[cid],
                cluster_index=label,
                round_index=round_index,
            )
        )
    return messages


def migrate_store(store: AffinityStore, tree: CohortTree) -> None:
    """Resolve records held for since-partitioned cohorts down to leaves.

    Mirrors the reward seeding applied at partition time: each child record
    starts from the parent's reward, with a bonus on the child matching the
    client's stored cluster label.  Applied lazily whenever the client next
    touches its store, so partitions need no broadcast.
    """
    changed = True
    while changed:
        changed = False
        for cohort_id in list(store.records):
            if cohort_id not in tree:
                continue
            node = tree.node(cohort_id)
            if node.status != "internal":
                continue
            rec = store.records.pop(cohort_id)
            for k, child in enumerate(node.children):
                bonus = SPAWN_BONUS if rec.cluster_index == k else 0.0
                # The child itself was never explored: the migrated value is a
                # prediction, marked by the sentinel round.  A record written
                # by the child's own feedback is fresher and wins.
                if child not in store.records:
                    store.records[child] = AffinityRecord(
                        reward=rec.reward + bonus,
                        cluster_index=None,
                        last_round=-1,
                    )
            changed = True


def client_apply_feedback(
    store: AffinityStore,
    msg: AffinityMessage,
    tree: CohortTree,
    gamma: float,
) -> AffinityStore:
    """Fold one feedback message into a client's affinity store.

    The explored cohort's reward is updated with the decayed rule and its
    cluster label stored; every other leaf the client can see in the tree
    snapshot receives the distance-attenuated explore increment.  Messages
    for a round already applied to that cohort's record are ignored, which
    makes replays after recovery harmless.
    """
    migrate_store(store, tree)
    rec = store.records.get(msg.cohort_id)
    if rec is not None and 0 <= msg.round_index <= rec.last_round:
        return store
    ledger = RewardLedger(gamma=gamma)
    for cohort_id, r in store.records.items():
        ledger.rewards[(0, cohort_id)] = r.reward
        if r.last_round >= 0:
            ledger.direct.add((0, cohort_id))
    update_reward(ledger, 0, msg.cohort_id, msg.reward)
    explore_reward(tree, ledger, 0, msg.cohort_id, msg.reward)
    for (_, cohort_id), value in ledger.rewards.items():
        old = store.records.get(cohort_id)
        store.records[cohort_id] = AffinityRecord(
            reward=value,
            cluster_index=(
                msg.cluster_index
                if cohort_id == msg.cohort_id
                else (old.cluster_index if old else None)
            ),
            last_round=(
                msg.round_index
                if cohort_id == msg.cohort_id
                else (old.last_round if old else -1)
            ),
        )
    store.last_updated = max(store.last_updated, msg.round_index)
    return store


def partition_cohort(
    tree: CohortTree,
    parent_id: CohortId,
    arity: int,
    max_tree_depth: int,
    cluster_state_factory: Callable[[], Any] | None = None,
    optimizer_state_factory: Callable[[], Any] | None = None,
) -> list[CohortId]:
    """Split a leaf into ``arity`` children that continue training separately.

    Children inherit a copy of the parent's model weights and the parent's
    round counter, receive a fresh optimizer and cluster state, and divide
    the parent's per-round participant budget as equally as integers allow.
    Each child's known membership is seeded from the parent's persisted
    cluster labels.
    """
    parent = tree.node(parent_id)
    if parent.status != "active-leaf":
        raise ValueError(f"cannot partition non-leaf cohort {parent_id.render()}")
    if parent_id.depth + 1 > max_tree_depth:
        raise ValueError(
            f"partition of {parent_id.render()} would exceed max depth {max_tree_depth}"
        )
    labels = {}
    if parent.cluster_state is not None:
        labels = dict(parent.cluster_state.persisted_labels)
    base, extra = divmod(parent.target_participants, arity)
    children = []
    for k in range(arity):
        child = CohortNode(
            id=parent_id.child(k),
            model=copy.deepcopy(parent.model),
            optimizer_state=(
                optimizer_state_factory() if optimizer_state_factory else None
            ),
            cluster_state=cluster_state_factory() if cluster_state_factory else None,
            round_counter=parent.round_counter,
            target_participants=base + (1 if k < extra else 0),
            known_members={cid for cid, lab in labels.items() if lab == k},
        )
        tree.nodes[child.id] = child
        children.append(child.id)
    parent.children = children
    parent.status = "internal"
    return children
