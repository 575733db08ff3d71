"""Round orchestration across all cohorts on a shared simulated clock.

Each leaf cohort runs rounds back to back: matching, selection, execution,
aggregation, feedback.  Rounds are staged at their start event and applied at
their completion event, so a crash landing between the two discards the
in-flight round exactly as a process failure would.  All randomness comes
from named substreams of the master seed, which makes every run, including
re-executions after recovery, a pure function of its configuration.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import clustering as clu
from .cohorttree import (
    AffinityMessage,
    AffinityRequest,
    CohortId,
    CohortNode,
    CohortTree,
    client_apply_feedback,
    client_select_cohort,
    match_request,
    partition_cohort,
)
from .rewards import SPAWN_BONUS
from .config import ExperimentConfig
from .errors import TrainingDiverged
from .fltrain import (
    GradientUpdate,
    ModelSpec,
    YogiState,
    apply_ldp,
    evaluate,
    fedavg_aggregate,
    init_weights,
    local_train,
    train_split,
    yogi_aggregate,
)
from .metrics import bias_stats  # noqa: F401  (part of this module's surface)
from .population import (
    Population,
    generate_population,
    heterogeneity_report,
    sample_available,
)
from .resilience import (
    AnomalyConfig,
    Blacklist,
    checkpoint_cohort,
    coordinator_is_down,
    corrupt_clients,
    detect_anomalies,
    restore_cohort,
    schedule_affinity_loss,
)
from .seeds import substream

# Event kinds, in processing priority at equal timestamps: a completing round
# is applied before a crash at the same instant (the round boundary), and a
# crash tears the process down before the next round would start.
_PRIO_COMPLETE = 0
_PRIO_CRASH = 1
_PRIO_START = 2


@dataclass
class RoundPlan:
    cohort_id: CohortId
    target_participants: int
    overcommit_fraction: float = 0.25

    def invited(self) -> int:
        return math.ceil(self.target_participants * (1.0 + self.overcommit_fraction))


@dataclass
class RoundReport:
    cohort_id: CohortId
    round_index: int
    sim_start: float
    sim_end: float
    participants: list[int]
    mean_loss: float
    test_accuracy: float | None
    rho: float | None
    partition_event: str | None


@dataclass
class EventRow:
    sim_time: float
    cohort: str
    round_index: int
    kind: str
    detail: str


@dataclass
class _StagedRound:
    cohort_id: CohortId
    epoch: int
    round_index: int
    sim_start: float
    sim_end: float
    updates: list[GradientUpdate]
    claims: dict[int, int | None]
    failed: list[int]
    invited: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    population: Population
    tree: CohortTree
    reports: list[RoundReport]
    events: list[EventRow]
    blacklist: Blacklist
    final_assignment: dict[int, CohortId]
    final_accuracy: dict[int, float]
    participations: dict[int, int]
    heterogeneity_single: float
    heterogeneity_leaves: float

    def mean_final_accuracy(self) -> float:
        if not self.final_accuracy:
            return float("nan")
        return float(np.mean(list(self.final_accuracy.values())))


def resolved_view(store, tree) -> dict[CohortId, float]:
    """Leaf-level rewards implied by a store, without mutating it.

    Mirrors the lazy migration a client performs on its next feedback:
    records held for partitioned cohorts expand to their children with the
    spawn bonus on the child matching the stored cluster label, and a
    record written by the leaf itself always wins over a migrated value.
    """
    placed: dict[CohortId, tuple[float, int]] = {}
    expand = [
        (cid, rec.reward, rec.cluster_index, rec.last_round)
        for cid, rec in store.records.items()
    ]
    while expand:
        deeper = []
        for cid, reward, label, last_round in expand:
            node = tree.nodes.get(cid)
            if node is not None and node.status == "internal":
                for k, child in enumerate(node.children):
                    bonus = SPAWN_BONUS if label == k else 0.0
                    deeper.append((child, reward + bonus, None, -1))
                continue
            current = placed.get(cid)
            if current is None or current[1] < last_round:
                placed[cid] = (reward, last_round)
        expand = deeper
    return {cid: reward for cid, (reward, _) in placed.items()}


def resolved_argmax(store, tree) -> CohortId | None:
    """Best-reward leaf after resolving stale records down the tree."""
    view = resolved_view(store, tree)
    if not view:
        return None
    return min(view, key=lambda c: (-view[c], c))


class Engine:
    """One experiment: population, cohort tree, clock, and fault machinery."""

    def __init__(self, config: ExperimentConfig, population: Population | None = None):
        self.config = config
        seed = config.master_seed
        p = config.population
        if population is None:
            population = generate_population(
                p.spec(),
                n_clients=p.n_clients,
                num_classes=p.num_classes,
                feature_dim=p.feature_dim,
                seed=seed,
                min_samples=p.min_samples,
                max_samples=p.max_samples,
                duty_cycle=p.duty_cycle,
                on_range=(p.on_min, p.on_max),
                speed_sigma=p.speed_sigma,
                availability_horizon=p.availability_horizon,
            )
        self.population = population
        self.model_spec = ModelSpec(
            kind=config.model.kind,
            feature_dim=p.feature_dim,
            num_classes=p.num_classes,
            hidden_units=config.model.hidden_units,
        )

        self.fault_plan = config.faults.plan()
        self.fault_plan.validate()
        self.anomaly_cfg: AnomalyConfig = config.faults.anomaly()
        if self.fault_plan.corrupted_fraction > 0:
            corrupt_clients(
                self.population,
                self.fault_plan.corrupted_fraction,
                substream(seed, "faults", "corrupt"),
            )
        self.loss_schedule = schedule_affinity_loss(
            self.population,
            self.fault_plan.affinity_loss_rate,
            substream(seed, "faults", "affinity"),
        )
        self.loss_applied: set[int] = set()

        root = CohortNode(
            id=CohortId(),
            model=init_weights(self.model_spec, substream(seed, "model_init")),
            optimizer_state=self._fresh_optimizer(),
            target_participants=config.engine.target_participants,
        )
        self.tree = CohortTree(root)
        self.partition_cfg = clu.PartitionConfig(
            alpha=config.clustering.alpha,
            min_participants_per_cohort=config.clustering.min_participants,
            clustering_start_round=config.clustering_start_round(),
            partition_window=config.partition_window(),
            max_tree_depth=config.clustering.max_tree_depth,
        )
        self.root_resource = float(config.engine.target_participants)
        self.root_dispersion: float | None = None

        self.busy: dict[int, float] = {}
        self.participation_count: dict[int, int] = {}
        self.blacklist = Blacklist()
        self.checkpoints: dict[CohortId, object] = {}
        self.epoch: dict[CohortId, int] = {CohortId(): 0}
        self.events: list[EventRow] = []
        self.reports: list[RoundReport] = []
        self.latest_eval: dict[CohortId, tuple[float, int]] = {}  # leaf -> (acc, n)
        self._stop = False
        self._seq = 0
        self._heap: list = []

        self.checkpoints[root.id] = checkpoint_cohort(root, self.tree, 0.0)

    def _fresh_optimizer(self) -> YogiState | None:
        e = self.config.engine
        if e.algorithm != "yogi":
            return None
        return YogiState.fresh(
            self.model_spec.dim,
            server_lr=e.server_lr,
            beta1=e.beta1,
            beta2=e.beta2,
            tau=e.tau,
        )

    # ----------------------------------------------------------------- events

    def _push(self, time: float, prio: int, kind: str, payload) -> None:
        heapq.heappush(self._heap, (time, prio, self._seq, kind, payload))
        self._seq += 1

    def _log(self, t: float, cohort: CohortId | None, rnd: int, kind: str, detail: str):
        name = cohort.render() if cohort is not None else "-"
        self.events.append(EventRow(t, name, rnd, kind, detail))

    def _push_start(self, time: float, cohort_id: CohortId) -> None:
        self._push(time, _PRIO_START, "start", (cohort_id, self.epoch[cohort_id]))

    def run(self) -> Iterator[RoundReport]:
        """Drive the simulation, yielding one report per completed round."""
        self._push_start(0.0, CohortId())
        for t, cohort in self.fault_plan.cohort_crash_times:
            self._push(t, _PRIO_CRASH, "crash", cohort)
        while self._heap:
            time, _, _, kind, payload = heapq.heappop(self._heap)
            if kind == "start":
                self._handle_start(time, *payload)
            elif kind == "crash":
                self._handle_crash(time, payload)
            else:
                report = self._handle_complete(time, payload)
                if report is not None:
                    self.reports.append(report)
                    yield report

    # --------------------------------------------------------------- matching

    def _progress(self) -> float:
        done = max((n.round_counter for n in self.tree.nodes.values()), default=0)
        return done / max(self.config.engine.rounds, 1)

    def _maybe_lose_affinity(self, client_id: int, now: float) -> None:
        trigger = self.loss_schedule.get(client_id)
        if trigger is None or client_id in self.loss_applied:
            return
        if self._progress() >= trigger:
            self.population.client(client_id).affinity_store.clear()
            self.loss_applied.add(client_id)
            self._log(now, None, -1, "affinity_loss", f"client={client_id}")

    def _gather_pool(
        self, cohort_id: CohortId, round_index: int, attempt: int, now: float
    ) -> list[tuple[int, AffinityRequest]]:
        """Free available clients whose check-in resolved to this cohort."""
        if coordinator_is_down(self.fault_plan, now):
            return []
        seed = self.config.master_seed
        hint = len(self.tree.active_leaf_ids())
        eps = self.config.clustering.epsilon
        pool = []
        for cid in sample_available(self.population, now):
            if self.busy.get(cid, -1.0) > now or cid in self.blacklist.members:
                continue
            self._maybe_lose_affinity(cid, now)
            store = self.population.client(cid).affinity_store
            req = client_select_cohort(
                store,
                hint,
                eps,
                round_index,
                substream(seed, "select", cid, cohort_id.path, round_index, attempt),
            )
            req.client_id = cid
            leaf = match_request(
                self.tree,
                req,
                substream(seed, "match", cid, cohort_id.path, round_index, attempt),
            )
            if leaf == cohort_id:
                pool.append((cid, req))
        return pool

    def _duration(self, client_id: int) -> float:
        client = self.population.client(client_id)
        _, y = train_split(client)
        samples = min(self.config.engine.batch_size, len(y))
        return (
            self.config.engine.k_steps * samples / client.compute_speed
            + client.network_time
        )

    def _invite(self, pool, count, cohort_id, round_index, attempt):
        if len(pool) <= count:
            return list(pool)
        rng = substream(
            self.config.master_seed, "invite", cohort_id.path, round_index, attempt
        )
        idx = rng.choice(len(pool), size=count, replace=False)
        return [pool[int(i)] for i in sorted(idx)]

    def _stage_round(
        self, node: CohortNode, pool, round_index: int, now: float
    ) -> _StagedRound:
        """Invite with over-commitment, keep the fastest, train the kept."""
        cohort_id = node.id
        plan = RoundPlan(
            cohort_id, node.target_participants, self.config.engine.overcommit
        )
        if len(pool) < plan.target_participants:
            self._log(
                now, cohort_id, round_index, "short_round",
                f"available={len(pool)} target={plan.target_participants}",
            )
        invited = self._invite(pool, plan.invited(), cohort_id, round_index, node.attempt)
        durations = {cid: self._duration(cid) for cid, _ in invited}
        for cid, _ in invited:
            self.busy[cid] = now + durations[cid]
        ranked = sorted(invited, key=lambda item: (durations[item[0]], item[0]))
        kept = ranked[: plan.target_participants]
        sim_end = now + max(durations[cid] for cid, _ in kept)

        seed = self.config.master_seed
        e = self.config.engine
        updates, failed, claims = [], [], {}
        for cid, req in kept:
            claims[cid] = req.cluster_index if req.requested_cohort == cohort_id else None
            try:
                upd = local_train(
                    self.model_spec,
                    node.model,
                    self.population.client(cid),
                    e.k_steps,
                    e.batch_size,
                    e.lr,
                    substream(seed, "train", cid, cohort_id.path, round_index, node.attempt),
                )
            except TrainingDiverged:
                failed.append(cid)
                self._log(now, cohort_id, round_index, "client_failure", f"client={cid}")
                continue
            if self.config.ldp.enabled:
                upd = apply_ldp(
                    upd,
                    self.config.ldp,
                    substream(seed, "ldp", cid, cohort_id.path, round_index, node.attempt),
                )
            updates.append(upd)
        return _StagedRound(
            cohort_id=cohort_id,
            epoch=self.epoch[cohort_id],
            round_index=round_index,
            sim_start=now,
            sim_end=sim_end,
            updates=updates,
            claims=claims,
            failed=failed,
            invited=len(invited),
        )

    # -------------------------------------------------------------- start

    def _handle_start(self, now: float, cohort_id: CohortId, epoch: int) -> None:
        if self._stop or cohort_id not in self.tree:
            return
        if epoch != self.epoch[cohort_id]:
            return  # stale schedule from before a recovery
        node = self.tree.node(cohort_id)
        if node.status != "active-leaf":
            return
        if node.round_counter >= self.config.engine.rounds:
            return
        round_index = node.round_counter + 1
        pool = self._gather_pool(cohort_id, round_index, node.attempt, now)
        if not pool:
            node.attempt += 1
            self._push_start(now + self.config.engine.idle_quantum, cohort_id)
            return
        staged = self._stage_round(node, pool, round_index, now)
        self._push(staged.sim_end, _PRIO_COMPLETE, "complete", staged)

    # -------------------------------------------------------------- crash

    def _handle_crash(self, now: float, cohort_id: CohortId) -> None:
        if cohort_id not in self.tree:
            self._log(now, cohort_id, -1, "crash_ignored", "cohort does not exist")
            return
        node = self.tree.node(cohort_id)
        if node.status == "internal":
            self._log(
                now, cohort_id, node.round_counter, "crash_ignored", "already partitioned"
            )
            return
        self._log(
            now, cohort_id, node.round_counter, "cohort_crash",
            "process killed; in-flight round discarded",
        )
        restored = restore_cohort(self.checkpoints[cohort_id])
        restored.status = "active-leaf"
        restored.children = node.children
        self.tree.nodes[cohort_id] = restored
        self.epoch[cohort_id] = self.epoch.get(cohort_id, 0) + 1
        self._log(
            now, cohort_id, restored.round_counter, "cohort_recovered",
            f"resumed_from_round={restored.round_counter}",
        )
        self._push_start(now + self.config.faults.recovery_delay, cohort_id)

    # ------------------------------------------------------------ complete

    def _handle_complete(self, now: float, staged: _StagedRound) -> RoundReport | None:
        cohort_id = staged.cohort_id
        if cohort_id not in self.tree or staged.epoch != self.epoch[cohort_id]:
            return None  # the cohort process died while this round was in flight
        node = self.tree.node(cohort_id)
        if node.status != "active-leaf":
            return None
        node.round_counter = staged.round_index
        if not staged.updates:
            self._log(
                now, cohort_id, staged.round_index, "round_aborted",
                "no surviving updates",
            )
            self._schedule_next(node, now)
            return None
        updates = sorted(staged.updates, key=lambda u: u.client_id)
        for u in updates:
            self.participation_count[u.client_id] = (
                self.participation_count.get(u.client_id, 0) + 1
            )
        e = self.config.engine
        if e.algorithm == "yogi":
            node.model, node.optimizer_state = yogi_aggregate(
                node.optimizer_state, node.model, updates, e.sample_weighted
            )
        else:
            node.model = fedavg_aggregate(node.model, updates, e.sample_weighted)

        deltas = {u.client_id: u.delta for u in updates}
        labels, rho = self._cluster_step(node, deltas, staged.round_index)
        instant = clu.exploit_reward(deltas, node.known_members)
        if labels is not None:
            newly = detect_anomalies(
                self.blacklist, staged.round_index, staged.claims, labels,
                instant, self.anomaly_cfg,
            )
            for cid in newly:
                self._log(now, cohort_id, staged.round_index, "blacklisted", f"client={cid}")
        self._send_feedback(node, staged.round_index, instant, labels)
        # Membership follows fit: outliers are not considered cohort members,
        # so the estimated center stays anchored to clients that belong here.
        # Rounds where no recognized member showed up scored everyone against
        # an unanchored center; admitting on those would launder noise into
        # the membership, so they only evict.
        anchored = bool(node.known_members & set(deltas))
        if anchored or not node.known_members:
            margin = self.config.clustering.membership_margin
            node.known_members |= {cid for cid, r in instant.items() if r > margin}
        node.known_members -= {cid for cid, r in instant.items() if r < 0.0}

        accuracy = None
        if staged.round_index % e.eval_interval == 0:
            accuracy = self._evaluate_leaf(node, staged.round_index)
        partition_note = self._maybe_partition(node, now, staged.round_index)
        if (
            node.status == "active-leaf"
            and staged.round_index % self.config.faults.checkpoint_interval == 0
        ):
            self.checkpoints[cohort_id] = checkpoint_cohort(node, self.tree, now)
        if self.config.engine.log_similarity and len(deltas) >= 3:
            r = clu.similarity_correlation(deltas, self.population)
            self._log(now, cohort_id, staged.round_index, "similarity", f"pearson_r={r:.6f}")
        self._schedule_next(node, now)
        return RoundReport(
            cohort_id=cohort_id,
            round_index=staged.round_index,
            sim_start=staged.sim_start,
            sim_end=staged.sim_end,
            participants=[u.client_id for u in updates],
            mean_loss=float(np.mean([u.loss for u in updates])),
            test_accuracy=accuracy,
            rho=rho,
            partition_event=partition_note,
        )

    def _cluster_step(self, node, deltas, round_index):
        if node.cluster_state is None:
            if round_index >= self.partition_cfg.clustering_start_round:
                node.cluster_state = clu.ClusterState(k=self.config.clustering.arity)
            else:
                return None, None
        cs = node.cluster_state
        labels = None
        if not cs.initialized:
            clu.init_prototypes(
                cs,
                deltas,
                substream(self.config.master_seed, "cluster", node.id.path, round_index),
            )
            if cs.initialized:
                labels = {cid: cs.persisted_labels[cid] for cid in deltas}
        else:
            labels = clu.assign_round(cs, deltas)
        rho = None
        if cs.initialized:
            rho = clu.estimate_reduction(cs, deltas, round_index)
            if node.id == CohortId() and self.root_dispersion is None:
                self.root_dispersion = cs.dispersion_history[0][1]
        return labels, rho

    def _send_feedback(self, node, round_index, instant, labels):
        gamma = self.config.clustering.gamma
        for cid in sorted(instant):
            msg = AffinityMessage(
                cohort_id=node.id,
                reward=instant[cid],
                cluster_index=labels.get(cid) if labels is not None else None,
                round_index=round_index,
            )
            client_apply_feedback(
                self.population.client(cid).affinity_store, msg, self.tree, gamma
            )

    def _evaluate_leaf(self, node, round_index) -> float:
        members = [
            c.client_id
            for c in self.population.clients
            if resolved_argmax(c.affinity_store, self.tree) == node.id
        ]
        if not members:
            members = sorted(node.known_members)
        if not members:
            return float("nan")
        cap = self.config.engine.eval_sample
        if len(members) > cap:
            rng = substream(self.config.master_seed, "eval", node.id.path, round_index)
            picked = rng.choice(len(members), size=cap, replace=False)
            members = sorted(members[int(i)] for i in picked)
        acc, _ = evaluate(
            self.model_spec, node.model, [self.population.client(i) for i in members]
        )
        self.latest_eval[node.id] = (acc, len(members))
        self._maybe_stop_on_target()
        return acc

    def _maybe_stop_on_target(self) -> None:
        target = self.config.engine.target_accuracy
        if target is None or not self.latest_eval:
            return
        active = set(self.tree.active_leaf_ids())
        evals = [(acc, n) for leaf, (acc, n) in self.latest_eval.items() if leaf in active]
        if not evals:
            return
        total = sum(n for _, n in evals)
        combined = sum(acc * n for acc, n in evals) / total
        if combined >= target:
            self._stop = True

    def _maybe_partition(self, node, now, round_index) -> str | None:
        cs = node.cluster_state
        if cs is None or not cs.initialized or node.status != "active-leaf":
            return None
        decision = clu.partition_criteria(
            cs,
            self.partition_cfg,
            per_round_resource=node.target_participants,
            current_round=round_index,
            tree_depth=node.id.depth,
            root_resource=self.root_resource,
            root_dispersion=self.root_dispersion or 0.0,
        )
        if not decision.split:
            return None
        children = partition_cohort(
            self.tree,
            node.id,
            decision.arity,
            self.partition_cfg.max_tree_depth,
            optimizer_state_factory=self._fresh_optimizer,
        )
        for child in children:
            self.epoch[child] = 0
            self.checkpoints[child] = checkpoint_cohort(self.tree.node(child), self.tree, now)
            self._push_start(now, child)
        note = "+".join(c.render() for c in children)
        self._log(
            now, node.id, round_index, "partition",
            f"children={note} rho={decision.rho:.6f}",
        )
        return note

    def _schedule_next(self, node, now) -> None:
        if (
            not self._stop
            and node.status == "active-leaf"
            and node.round_counter < self.config.engine.rounds
        ):
            self._push_start(now, node.id)

    # ------------------------------------------------------------- finalize

    def finalize(self) -> ExperimentResult:
        """Final per-client assignment, accuracy, and heterogeneity summary."""
        assignment: dict[int, CohortId] = {}
        accuracy: dict[int, float] = {}
        participations = dict(self.participation_count)
        leaves = self.tree.active_leaf_ids()
        members_by_leaf: dict[CohortId, list[int]] = {leaf: [] for leaf in leaves}
        for client in self.population.clients:
            leaf = resolved_argmax(client.affinity_store, self.tree)
            if leaf is None or leaf not in members_by_leaf:
                continue
            assignment[client.client_id] = leaf
            members_by_leaf[leaf].append(client.client_id)
        for leaf, member_ids in members_by_leaf.items():
            if not member_ids:
                continue
            _, per_client = evaluate(
                self.model_spec,
                self.tree.node(leaf).model,
                [self.population.client(i) for i in member_ids],
            )
            accuracy.update(per_client)

        participants = sorted(assignment)
        j_single = float("nan")
        j_leaves = float("nan")
        if participants:
            clients = [self.population.client(i) for i in participants]
            j_single = heterogeneity_report(clients, {c: 0 for c in participants}, 1).total
            leaf_index = {leaf: i for i, leaf in enumerate(leaves)}
            leaf_membership = {cid: leaf_index[assignment[cid]] for cid in participants}
            j_leaves = heterogeneity_report(clients, leaf_membership, len(leaves)).total
        return ExperimentResult(
            config=self.config,
            population=self.population,
            tree=self.tree,
            reports=self.reports,
            events=self.events,
            blacklist=self.blacklist,
            final_assignment=assignment,
            final_accuracy=accuracy,
            participations=participations,
            heterogeneity_single=j_single,
            heterogeneity_leaves=j_leaves,
        )


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run a full experiment and collect reports plus final summaries."""
    engine = Engine(config)
    for _ in engine.run():
        pass
    return engine.finalize()


def run_round(engine: Engine, cohort_id: CohortId, now: float) -> RoundReport | None:
    """Run a single round of one cohort synchronously (testing/diagnostics).

    Stages the round at ``now`` and immediately applies its completion,
    bypassing the event queue.  Returns None when no clients resolved to the
    cohort (the cohort would idle one scheduling quantum).
    """
    node = engine.tree.node(cohort_id)
    round_index = node.round_counter + 1
    pool = engine._gather_pool(cohort_id, round_index, node.attempt, now)
    if not pool:
        return None
    staged = engine._stage_round(node, pool, round_index, now)
    report = engine._handle_complete(staged.sim_end, staged)
    if report is not None:
        engine.reports.append(report)
    return report
