import numpy as np
import pytest

from cohortsim.cohorttree import AffinityStore
from cohortsim.population import ClientProfile, LatentCohortSpec, Population


def make_client(
    client_id: int,
    histogram,
    latent: int = 0,
    n_samples: int = 10,
    feature_dim: int = 4,
    seed: int = 0,
) -> ClientProfile:
    """Hand-built client with a prescribed label histogram."""
    rng = np.random.default_rng(seed + client_id)
    hist = np.asarray(histogram, dtype=np.float64)
    counts = np.round(hist * n_samples).astype(int)
    while counts.sum() < n_samples:
        counts[int(hist.argmax())] += 1
    while counts.sum() > n_samples:
        counts[int(counts.argmax())] -= 1
    labels = np.repeat(np.arange(len(hist)), counts)
    features = rng.normal(size=(n_samples, feature_dim)) + labels[:, None]
    return ClientProfile(
        client_id=client_id,
        latent_cohort=latent,
        features=features,
        labels=labels.astype(np.int64),
        label_histogram=counts / n_samples,
        compute_speed=5.0,
        network_time=3.0,
        availability=[(0.0, 1e9)],
        affinity_store=AffinityStore(),
    )


def make_population(clients, num_classes, feature_dim=4, horizon=1e9) -> Population:
    on = np.array([1e9] * len(clients))
    period = np.array([2e9] * len(clients))
    phase = np.zeros(len(clients))
    return Population(
        clients=clients,
        num_classes=num_classes,
        feature_dim=feature_dim,
        rng_seed=0,
        avail_on=on,
        avail_period=period,
        avail_phase=phase,
        horizon=horizon,
    )


@pytest.fixture
def four_cohort_spec():
    return LatentCohortSpec(
        num_latent_cohorts=4,
        label_skew=0.8,
        feature_shift=1.0,
        cohort_weights=(0.25, 0.25, 0.25, 0.25),
        label_conflict=True,
    )
