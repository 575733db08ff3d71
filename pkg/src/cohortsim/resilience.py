"""Checkpointing, fault injection, and adversary handling.

Checkpoints are versioned, self-describing binaries: a JSON header lists
every array section, and all floats are little-endian 64-bit so a restored
cohort is bit-for-bit the cohort that was saved.  A human-readable manifest
is written next to each checkpoint file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import ClusterState
from .cohorttree import CohortId, CohortNode, CohortTree
from .errors import ConfigurationError, CheckpointError
from .fltrain import ModelWeights, YogiState
from .seeds import ensure_rng

CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    cohort_id: CohortId
    round_index: int
    written_at: float
    payload: bytes


@dataclass
class FaultPlan:
    """What goes wrong during a run, and when."""

    cohort_crash_times: list[tuple[float, CohortId]] = field(default_factory=list)
    coordinator_down: tuple[float, float] | None = None  # (start, duration)
    affinity_loss_rate: float = 0.0
    corrupted_fraction: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.affinity_loss_rate <= 1.0:
            raise ConfigurationError("affinity_loss_rate must be in [0, 1]")
        if not 0.0 <= self.corrupted_fraction <= 0.15:
            raise ConfigurationError("corrupted_fraction must be in [0, 0.15]")
        if self.coordinator_down is not None and self.coordinator_down[1] < 0:
            raise ConfigurationError("coordinator downtime duration must be >= 0")


def coordinator_is_down(plan: FaultPlan, sim_time: float) -> bool:
    """True while the coordinator is unavailable; requests are then dropped."""
    if plan.coordinator_down is None:
        return False
    start, duration = plan.coordinator_down
    return start <= sim_time < start + duration


@dataclass(frozen=True)
class AnomalyConfig:
    enabled: bool = False
    delta_gate: float = 0.5
    strike_threshold: int = 3


@dataclass
class Blacklist:
    members: set[int] = field(default_factory=set)
    strikes: dict[int, int] = field(default_factory=dict)
    log: list[tuple[int, int, float]] = field(default_factory=list)  # (client, round, score)


def detect_anomalies(
    blacklist: Blacklist,
    round_index: int,
    claims: dict[int, int | None],
    assigned: dict[int, int],
    instant_rewards: dict[int, float],
    cfg: AnomalyConfig,
) -> list[int]:
    """Strike participants whose claimed cluster contradicts where they landed.

    A strike needs both gates: the claimed cluster index differs from the
    fresh assignment, and the instant reward is far enough negative that the
    participant is a clear outlier.  Reaching the strike threshold blacklists
    the client; blacklisted clients are never matched again.
    """
    if not cfg.enabled:
        return []
    newly = []
    for cid in sorted(assigned):
        claim = claims.get(cid)
        reward = instant_rewards.get(cid)
        if claim is None or reward is None:
            continue
        if cid in blacklist.members:
            continue
        if claim != assigned[cid] and reward < -cfg.delta_gate:
            blacklist.strikes[cid] = blacklist.strikes.get(cid, 0) + 1
            blacklist.log.append((cid, round_index, reward))
            if blacklist.strikes[cid] >= cfg.strike_threshold:
                blacklist.members.add(cid)
                newly.append(cid)
    return newly


def corrupt_clients(
    population, fraction: float, rng: np.random.Generator | int
) -> set[int]:
    """Flip the labels of a random slice of clients with a fixed derangement.

    Every class moves to the next one, so a corrupted client's gradients
    consistently contradict its cohort.  The hidden ``corrupted`` flag is for
    evaluation only.
    """
    if not 0.0 <= fraction <= 0.15:
        raise ConfigurationError("corrupted_fraction must be in [0, 0.15]")
    rng = ensure_rng(rng)
    count = int(round(fraction * len(population)))
    chosen = set()
    if count:
        chosen = set(
            int(i) for i in rng.choice(len(population), size=count, replace=False)
        )
    c = population.num_classes
    for cid in sorted(chosen):
        client = population.client(cid)
        client.labels = (client.labels + 1) % c
        client.label_histogram = np.roll(client.label_histogram, 1)
        client.corrupted = True
    return chosen


def schedule_affinity_loss(
    population, rate: float, rng: np.random.Generator | int
) -> dict[int, float]:
    """Pick which clients lose their affinity records, and when.

    Each client independently loses its store once with probability ``rate``;
    the trigger is a uniform fraction of run progress.  The engine clears the
    store the next time the client checks in after its trigger point, after
    which it behaves like a brand-new client.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError("affinity loss rate must be in [0, 1]")
    rng = ensure_rng(rng)
    schedule = {}
    for client in population.clients:
        hit = float(rng.random()) < rate
        when = float(rng.random())
        if hit:
            schedule[client.client_id] = when
    return schedule


def _array_section(name: str, arr: np.ndarray) -> tuple[dict, bytes]:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"name": name, "dtype": "<f8", "shape": list(arr.shape)}, data


def serialize_cohort(node: CohortNode, tree: CohortTree, sim_time: float) -> bytes:
    """Pack a cohort's round-boundary state into the checkpoint wire format."""
    sections = []
    blobs = []
    meta, blob = _array_section("model", node.model.values)
    sections.append(meta)
    blobs.append(blob)
    yogi = None
    if node.optimizer_state is not None:
        s = node.optimizer_state
        m_meta, m_blob = _array_section("yogi_m", s.first_moment)
        v_meta, v_blob = _array_section("yogi_v", s.second_moment)
        sections += [m_meta, v_meta]
        blobs += [m_blob, v_blob]
        yogi = {"server_lr": s.server_lr, "beta1": s.beta1, "beta2": s.beta2, "tau": s.tau}
    cluster = None
    if node.cluster_state is not None:
        cs = node.cluster_state
        cluster = {
            "k": cs.k,
            "initialized": cs.initialized,
            "labels": {str(c): int(l) for c, l in sorted(cs.persisted_labels.items())},
            "dispersion_history": cs.dispersion_history,
            "churn_history": cs.churn_history,
        }
        if cs.round_centroids is not None:
            c_meta, c_blob = _array_section("centroids", cs.round_centroids)
            sections.append(c_meta)
            blobs.append(c_blob)
    header = {
        "version": CHECKPOINT_VERSION,
        "cohort": node.id.render(),
        "status": node.status,
        "round": node.round_counter,
        "written_at": sim_time,
        "target_participants": node.target_participants,
        "attempt": node.attempt,
        "known_members": sorted(node.known_members),
        "yogi": yogi,
        "cluster": cluster,
        "tree": tree.snapshot(),
        "sections": sections,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<II", CHECKPOINT_VERSION, len(head))
    out += head
    for blob in blobs:
        out += blob
    return bytes(out)


def deserialize_cohort(payload: bytes) -> tuple[CohortNode, dict]:
    """Rebuild a cohort node (and return the raw header) from checkpoint bytes."""
    if payload[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, head_len = struct.unpack("<II", payload[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(payload[12 : 12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    ofs = 12 + head_len
    arrays = {}
    for meta in header["sections"]:
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = count * 8
        if ofs + nbytes > len(payload):
            raise CheckpointError("checkpoint payload truncated")
        arrays[meta["name"]] = np.frombuffer(
            payload[ofs : ofs + nbytes], dtype="<f8"
        ).reshape(meta["shape"]).copy()
        ofs += nbytes
    node = CohortNode(
        id=CohortId.parse(header["cohort"]),
        status=header["status"],
        model=ModelWeights(values=arrays["model"]),
        round_counter=int(header["round"]),
        target_participants=int(header["target_participants"]),
        attempt=int(header["attempt"]),
        known_members=set(header["known_members"]),
    )
    if header["yogi"] is not None:
        node.optimizer_state = YogiState(
            first_moment=arrays["yogi_m"],
            second_moment=arrays["yogi_v"],
            **header["yogi"],
        )
    if header["cluster"] is not None:
        c = header["cluster"]
        node.cluster_state = ClusterState(
            k=int(c["k"]),
            persisted_labels={int(k): int(v) for k, v in c["labels"].items()},
            round_centroids=arrays.get("centroids"),
            initialized=bool(c["initialized"]),
            dispersion_history=[tuple(row) for row in c["dispersion_history"]],
            churn_history=list(c["churn_history"]),
        )
    return node, header


def checkpoint_cohort(node: CohortNode, tree: CohortTree, sim_time: float) -> Checkpoint:
    return Checkpoint(
        cohort_id=node.id,
        round_index=node.round_counter,
        written_at=sim_time,
        payload=serialize_cohort(node, tree, sim_time),
    )


def restore_cohort(ckpt: Checkpoint) -> CohortNode:
    """Exact reconstruction of the saved cohort at its round boundary."""
    node, _ = deserialize_cohort(ckpt.payload)
    return node


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> Path:
    """Write the binary plus a text manifest for offline inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"cohort_{ckpt.cohort_id.render().replace('.', '_')}_r{ckpt.round_index}"
    path = directory / f"{stem}.ckpt"
    path.write_bytes(ckpt.payload)
    _, header = deserialize_cohort(ckpt.payload)
    lines = [
        f"checkpoint version: {header['version']}",
        f"cohort: {header['cohort']}",
        f"round: {header['round']}",
        f"written at (sim s): {header['written_at']!r}",
        f"known members: {len(header['known_members'])}",
        "sections:",
    ]
    for meta in header["sections"]:
        lines.append(f"  {meta['name']}: dtype {meta['dtype']} shape {meta['shape']}")
    (directory / f"{stem}.manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = Path(path).read_bytes()
    node, header = deserialize_cohort(payload)
    return Checkpoint(
        cohort_id=node.id,
        round_index=node.round_counter,
        written_at=float(header["written_at"]),
        payload=payload,
    )
