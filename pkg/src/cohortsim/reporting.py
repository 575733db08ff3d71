"""Run artifacts: CSV emission, summaries, and run-to-run comparison.

CSV files are the contract for offline analysis; every float is serialized
with 9 significant digits and rows are emitted in deterministic order, so a
rerun with the same config and seed produces byte-identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import EventRow, ExperimentResult, RoundReport
from .metrics import adjusted_rand_index, bias_stats, time_to_accuracy

ROUNDS_HEADER = [
    "cohort", "round", "sim_start", "sim_end", "participants",
    "mean_loss", "test_accuracy", "rho", "partition_event",
]
CLIENTS_HEADER = [
    "client_id", "latent_cohort", "assigned_leaf", "final_accuracy",
    "participations", "corrupted", "blacklisted",
]
EVENTS_HEADER = ["sim_time", "cohort", "round", "kind", "detail"]


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return "%.9g" % value
    return str(value)


def write_rounds_csv(reports: list[RoundReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUNDS_HEADER)
        for r in reports:
            writer.writerow(
                [
                    r.cohort_id.render(),
                    r.round_index,
                    fmt(r.sim_start),
                    fmt(r.sim_end),
                    " ".join(str(c) for c in r.participants),
                    fmt(r.mean_loss),
                    fmt(r.test_accuracy),
                    fmt(r.rho),
                    r.partition_event or "",
                ]
            )


def write_clients_csv(result: ExperimentResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLIENTS_HEADER)
        for client in result.population.clients:
            cid = client.client_id
            leaf = result.final_assignment.get(cid)
            writer.writerow(
                [
                    cid,
                    client.latent_cohort,
                    leaf.render() if leaf is not None else "",
                    fmt(result.final_accuracy.get(cid)),
                    result.participations.get(cid, 0),
                    int(client.corrupted),
                    int(cid in result.blacklist.members),
                ]
            )


def write_events_csv(events: list[EventRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENTS_HEADER)
        for e in events:
            writer.writerow([fmt(e.sim_time), e.cohort, e.round_index, e.kind, e.detail])


def load_rounds_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_clients_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def accuracy_curve(rows: list[dict]) -> list[tuple[float, float]]:
    """Population accuracy over simulated time from rounds.csv rows.

    At each evaluation row the cohort's latest accuracy is refreshed; the
    population value is the participant-weighted mean over cohorts still
    training (a partitioned cohort drops out when its children take over).
    """
    latest: dict[str, tuple[float, float]] = {}
    curve: list[tuple[float, float]] = []
    for row in rows:
        cohort = row["cohort"]
        if row["partition_event"]:
            latest.pop(cohort, None)
        acc = row["test_accuracy"]
        if acc == "" or acc is None:
            continue
        weight = float(len(row["participants"].split())) if row["participants"] else 1.0
        latest[cohort] = (float(acc), weight)
        total = sum(w for _, w in latest.values())
        combined = sum(a * w for a, w in latest.values()) / total
        curve.append((float(row["sim_end"]), combined))
    return curve


def recovery_ari(result: ExperimentResult, min_participations: int = 1) -> float | None:
    """Agreement between recovered leaf assignment and the latent cohorts."""
    ids = [
        cid
        for cid, n in sorted(result.participations.items())
        if n >= min_participations and cid in result.final_assignment
    ]
    if len(ids) < 2:
        return None
    recovered = [result.final_assignment[c].render() for c in ids]
    truth = [result.population.client(c).latent_cohort for c in ids]
    return adjusted_rand_index(recovered, truth)


def summarize(result: ExperimentResult) -> str:
    lines = ["experiment summary", "=================="]
    leaves = result.tree.active_leaf_ids()
    lines.append(f"leaves: {len(leaves)} ({', '.join(l.render() for l in leaves)})")
    partitions = [e for e in result.events if e.kind == "partition"]
    lines.append(f"partition events: {len(partitions)}")
    if result.final_accuracy:
        lines.append(f"final mean accuracy: {fmt(result.mean_final_accuracy())}")
        stats = bias_stats(result.final_accuracy) if len(result.final_accuracy) >= 10 else None
        if stats:
            lines.append(
                "accuracy bias: variance="
                f"{fmt(stats.variance)} worst10={fmt(stats.worst10_mean)} "
                f"best10={fmt(stats.best10_mean)}"
            )
    lines.append(
        "heterogeneity: single-cohort="
        f"{fmt(result.heterogeneity_single)} recovered-leaves={fmt(result.heterogeneity_leaves)}"
    )
    if result.heterogeneity_single and result.heterogeneity_single > 0:
        ratio = result.heterogeneity_leaves / result.heterogeneity_single
        lines.append(f"heterogeneity ratio: {fmt(ratio)}")
    ari = recovery_ari(result)
    if ari is not None:
        lines.append(f"cohort recovery ARI: {fmt(ari)}")
    lines.append(f"blacklisted clients: {len(result.blacklist.members)}")
    if result.reports:
        lines.append(f"rounds completed: {len(result.reports)}")
        lines.append(f"simulated end time: {fmt(result.reports[-1].sim_end)}")
    return "\n".join(lines) + "\n"


def write_run_outputs(result: ExperimentResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rounds_csv(result.reports, out / "rounds.csv")
    write_clients_csv(result, out / "clients.csv")
    write_events_csv(result.events, out / "events.csv")
    (out / "summary.txt").write_text(summarize(result))


@dataclass
class CompareReport:
    target: float
    time_a: float | None
    time_b: float | None
    speedup_b_over_a: float | None
    final_accuracy_a: float | None
    final_accuracy_b: float | None
    variance_a: float | None
    variance_b: float | None

    def render(self) -> str:
        def t(x):
            return fmt(x) if x is not None else "NA"

        lines = [
            f"target accuracy: {fmt(self.target)}",
            f"time to target, run A: {t(self.time_a)}",
            f"time to target, run B: {t(self.time_b)}",
            f"speedup of B over A: {t(self.speedup_b_over_a)}",
            f"final accuracy delta (B - A): "
            + (
                fmt(self.final_accuracy_b - self.final_accuracy_a)
                if self.final_accuracy_a is not None and self.final_accuracy_b is not None
                else "NA"
            ),
            f"accuracy variance, run A: {t(self.variance_a)}",
            f"accuracy variance, run B: {t(self.variance_b)}",
        ]
        return "\n".join(lines) + "\n"


def _final_stats(run_dir: Path) -> tuple[float | None, float | None]:
    clients_path = run_dir / "clients.csv"
    if not clients_path.is_file():
        return None, None
    accs = [
        float(row["final_accuracy"])
        for row in load_clients_csv(clients_path)
        if row["final_accuracy"] != ""
    ]
    if not accs:
        return None, None
    arr = np.asarray(accs)
    return float(arr.mean()), float(arr.var())


def compare_runs(dir_a: str | Path, dir_b: str | Path, target: float) -> CompareReport:
    """Time-to-accuracy and bias comparison of two finished runs."""
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    curve_a = accuracy_curve(load_rounds_csv(dir_a / "rounds.csv"))
    curve_b = accuracy_curve(load_rounds_csv(dir_b / "rounds.csv"))
    time_a = time_to_accuracy(curve_a, target)
    time_b = time_to_accuracy(curve_b, target)
    speedup = None
    if time_a is not None and time_b is not None and time_b > 0:
        speedup = time_a / time_b
    final_a, var_a = _final_stats(dir_a)
    final_b, var_b = _final_stats(dir_b)
    return CompareReport(
        target=target,
        time_a=time_a,
        time_b=time_b,
        speedup_b_over_a=speedup,
        final_accuracy_a=final_a,
        final_accuracy_b=final_b,
        variance_a=var_a,
        variance_b=var_b,
    )
