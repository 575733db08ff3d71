"""Synthetic federated populations with controllable latent cohort structure.

Clients are drawn from hidden latent cohorts.  Each cohort has its own label
profile (how concentrated depends on the label skew), an optional offset in
feature space, and optionally a conflicting label/feature mapping: the same
feature region carries different labels in different cohorts, so no single
global model can fit everyone.  The latent assignment is recorded per client
but used only for evaluation, never by the algorithm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohorttree import AffinityStore
from .errors import ConfigurationError
from .seeds import substream

FEATURE_NOISE = 1.0
BLOB_SCALE = 2.0
COHORT_PROFILE_CONCENTRATION = 0.5  # default spikiness of cohort label profiles

DEFAULT_DUTY_CYCLE = 0.05
DEFAULT_AVAILABILITY_HORIZON = 2.0e6
ON_RANGE = (300.0, 900.0)
SPEED_LOG_MEAN = np.log(3.0)
SPEED_LOG_SIGMA = 0.6
NETWORK_RANGE = (2.0, 10.0)


@dataclass(frozen=True)
class LatentCohortSpec:
    """Ground-truth grouping the generator plants in the population.

    ``profile_concentration`` shapes how spiky each cohort's label profile
    is: small values give cohorts dominated by a few classes (cohorts are
    distinguishable by label histogram alone), large values make every
    cohort's marginal near-uniform (cohorts then differ only through the
    conflicting label/feature mapping).
    """

    num_latent_cohorts: int
    label_skew: float = 0.8
    feature_shift: float = 0.0
    cohort_weights: tuple[float, ...] | None = None
    label_conflict: bool = False
    profile_concentration: float = COHORT_PROFILE_CONCENTRATION

    def weights(self) -> np.ndarray:
        if self.cohort_weights is None:
            return np.full(self.num_latent_cohorts, 1.0 / self.num_latent_cohorts)
        return np.asarray(self.cohort_weights, dtype=np.float64)

    def validate(self) -> None:
        if self.num_latent_cohorts < 1:
            raise ConfigurationError("num_latent_cohorts must be >= 1")
        if not 0.0 < self.label_skew <= 1.0:
            raise ConfigurationError(f"label_skew must be in (0, 1]: {self.label_skew}")
        if self.feature_shift < 0.0:
            raise ConfigurationError("feature_shift must be >= 0")
        if self.profile_concentration <= 0.0:
            raise ConfigurationError("profile_concentration must be > 0")
        w = self.weights()
        if len(w) != self.num_latent_cohorts:
            raise ConfigurationError(
                f"cohort_weights has {len(w)} entries for "
                f"{self.num_latent_cohorts} cohorts"
            )
        if abs(float(w.sum()) - 1.0) > 1e-9 or np.any(w < 0):
            raise ConfigurationError(f"cohort_weights must sum to 1: {w.tolist()}")


@dataclass
class ClientProfile:
    """A simulated device: local data, speed, availability, affinity memory."""

    client_id: int
    latent_cohort: int
    features: np.ndarray  # (n_samples, feature_dim)
    labels: np.ndarray  # (n_samples,)
    label_histogram: np.ndarray
    compute_speed: float  # samples / second
    network_time: float  # seconds per model transfer
    availability: list[tuple[float, float]]
    affinity_store: AffinityStore = field(default_factory=AffinityStore)
    corrupted: bool = False

    @property
    def num_samples(self) -> int:
        return len(self.labels)

    def dataset(self) -> list[tuple[np.ndarray, int]]:
        return [(self.features[i], int(self.labels[i])) for i in range(self.num_samples)]


@dataclass
class Population:
    clients: list[ClientProfile]
    num_classes: int
    feature_dim: int
    rng_seed: int
    # Periodic availability parameters, cached for vectorized queries.
    avail_on: np.ndarray = field(default_factory=lambda: np.empty(0))
    avail_period: np.ndarray = field(default_factory=lambda: np.empty(0))
    avail_phase: np.ndarray = field(default_factory=lambda: np.empty(0))
    horizon: float = DEFAULT_AVAILABILITY_HORIZON

    def client(self, client_id: int) -> ClientProfile:
        return self.clients[client_id]

    def __len__(self) -> int:
        return len(self.clients)


def _conflict_permutation(cohort: int, num_classes: int, enabled: bool) -> np.ndarray:
    """Class relabeling used by one cohort's feature mapping.

    The first third of the classes keeps a globally consistent mapping, so a
    single global model retains a learnable core; the remaining classes are
    rotated per cohort, so the same feature region carries different labels
    in different cohorts and no global model can serve everyone.
    """
    perm = np.arange(num_classes)
    if not enabled:
        return perm
    shared = num_classes // 3
    rotating = np.arange(shared, num_classes)
    perm[rotating] = shared + (rotating - shared + cohort) % len(rotating)
    return perm


def generate_population(
    spec: LatentCohortSpec,
    n_clients: int,
    num_classes: int,
    feature_dim: int,
    seed: int,
    min_samples: int = 16,
    max_samples: int = 48,
    duty_cycle: float = DEFAULT_DUTY_CYCLE,
    on_range: tuple[float, float] = ON_RANGE,
    speed_sigma: float = SPEED_LOG_SIGMA,
    availability_horizon: float = DEFAULT_AVAILABILITY_HORIZON,
) -> Population:
    """Generate a deterministic synthetic population.

    Each client is assigned a latent cohort by the cohort weights; its label
    distribution is a Dirichlet draw concentrated (by ``label_skew``) around
    the cohort's label profile, and its features are class-conditioned
    Gaussians whose means carry the cohort's feature shift and, when label
    conflict is on, the cohort's class relabeling.
    """
    spec.validate()
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if n_clients < spec.num_latent_cohorts:
        raise ConfigurationError("need at least one client per latent cohort")
    if not 0.0 < duty_cycle <= 1.0:
        raise ConfigurationError(f"duty_cycle must be in (0, 1]: {duty_cycle}")

    k = spec.num_latent_cohorts
    rng_struct = substream(seed, "population", "structure")
    blob_means = rng_struct.normal(size=(num_classes, feature_dim)) * BLOB_SCALE
    shift_dirs = rng_struct.normal(size=(k, feature_dim))
    shift_dirs /= np.maximum(np.linalg.norm(shift_dirs, axis=1, keepdims=True), 1e-12)
    profiles = rng_struct.dirichlet(
        np.full(num_classes, spec.profile_concentration), size=k
    )

    rng_assign = substream(seed, "population", "assign")
    cohorts = rng_assign.choice(k, size=n_clients, p=spec.weights())

    clients = []
    on = np.empty(n_clients)
    period = np.empty(n_clients)
    phase = np.empty(n_clients)
    for cid in range(n_clients):
        rng = substream(seed, "population", "client", cid)
        c = int(cohorts[cid])
        n_i = int(rng.integers(min_samples, max_samples + 1))

        if spec.label_skew >= 0.999:
            p_i = profiles[c]
        else:
            conc = num_classes * spec.label_skew / (1.0 - spec.label_skew)
            p_i = rng.dirichlet(conc * profiles[c] + 1e-6)
        labels = rng.choice(num_classes, size=n_i, p=p_i)
        hist = np.bincount(labels, minlength=num_classes).astype(np.float64) / n_i

        perm = _conflict_permutation(c, num_classes, spec.label_conflict)
        means = blob_means[perm[labels]] + spec.feature_shift * shift_dirs[c]
        features = means + rng.normal(size=(n_i, feature_dim)) * FEATURE_NOISE

        speed = float(np.exp(rng.normal(SPEED_LOG_MEAN, speed_sigma)))
        network = float(rng.uniform(*NETWORK_RANGE))

        on_i = float(rng.uniform(*on_range))
        if duty_cycle >= 1.0:
            period_i, phase_i, on_i = availability_horizon, 0.0, availability_horizon
        else:
            period_i = on_i / duty_cycle
            phase_i = float(rng.uniform(0.0, period_i))
        on[cid], period[cid], phase[cid] = on_i, period_i, phase_i

        clients.append(
            ClientProfile(
                client_id=cid,
                latent_cohort=c,
                features=features,
                labels=labels.astype(np.int64),
                label_histogram=hist,
                compute_speed=speed,
                network_time=network,
                availability=_intervals(on_i, period_i, phase_i, availability_horizon),
            )
        )
    return Population(
        clients=clients,
        num_classes=num_classes,
        feature_dim=feature_dim,
        rng_seed=seed,
        avail_on=on,
        avail_period=period,
        avail_phase=phase,
        horizon=availability_horizon,
    )


def _intervals(
    on: float, period: float, phase: float, horizon: float
) -> list[tuple[float, float]]:
    """Materialized on-intervals of a periodic trace, clipped to the horizon."""
    out = []
    start = -phase
    while start < horizon:
        lo, hi = max(start, 0.0), min(start + on, horizon)
        if hi > lo:
            out.append((lo, hi))
        start += period
    return out


def sample_available(population: Population, sim_time: float) -> list[int]:
    """Clients whose availability trace covers ``sim_time``."""
    if sim_time < 0:
        raise ValueError("sim_time must be >= 0")
    if sim_time >= population.horizon:
        return []
    t = (sim_time + population.avail_phase) % population.avail_period
    mask = t < population.avail_on
    return [int(i) for i in np.nonzero(mask)[0]]


def distribution_distance(a: ClientProfile, b: ClientProfile) -> float:
    """Euclidean distance between two clients' label histograms."""
    if a.label_histogram.shape != b.label_histogram.shape:
        raise ValueError("label histograms have different class counts")
    return float(np.linalg.norm(a.label_histogram - b.label_histogram))


@dataclass
class HeterogeneityReport:
    total: float
    per_cohort: list[float]
    sizes: list[int]
    empty_cohorts: list[int]


def heterogeneity_report(
    clients: list[ClientProfile],
    membership: dict[int, int],
    num_cohorts: int,
) -> HeterogeneityReport:
    """Average intra-cohort heterogeneity of a membership assignment.

    For each cohort, half the mean pairwise squared distance between its
    members' label histograms, summed over cohorts; equivalently the
    within-cohort sum of squared deviations from the cohort mean histogram.
    Empty cohorts contribute zero and are flagged.
    """
    groups: dict[int, list[np.ndarray]] = {m: [] for m in range(num_cohorts)}
    for client in clients:
        m = membership[client.client_id]
        if not 0 <= m < num_cohorts:
            raise ValueError(f"membership {m} out of range for {num_cohorts} cohorts")
        groups[m].append(client.label_histogram)
    per_cohort, sizes, empties = [], [], []
    for m in range(num_cohorts):
        xs = groups[m]
        sizes.append(len(xs))
        if not xs:
            per_cohort.append(0.0)
            empties.append(m)
            continue
        arr = np.asarray(xs)
        centered = arr - arr.mean(axis=0)
        per_cohort.append(float(np.sum(centered * centered)))
    return HeterogeneityReport(
        total=float(sum(per_cohort)),
        per_cohort=per_cohort,
        sizes=sizes,
        empty_cohorts=empties,
    )


def intra_cohort_heterogeneity(
    clients: list[ClientProfile],
    membership: dict[int, int],
    num_cohorts: int,
) -> float:
    return heterogeneity_report(clients, membership, num_cohorts).total
