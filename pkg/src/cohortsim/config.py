"""Experiment configuration: a sectioned key=value file, strictly validated.

Unknown sections or keys are rejected with the offending line number so a
typo cannot silently fall back to a default.  All randomness in a run flows
from the single ``[seeds] master`` value through named substreams, so sweeps
perturb only the swept subsystem.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .cohorttree import CohortId
from .errors import ConfigurationError
from .fltrain import LdpConfig
from .population import DEFAULT_AVAILABILITY_HORIZON, DEFAULT_DUTY_CYCLE, LatentCohortSpec
from .resilience import AnomalyConfig, FaultPlan


@dataclass(frozen=True)
class PopulationSettings:
    n_clients: int
    num_classes: int = 10
    feature_dim: int = 16
    latent_cohorts: int = 1
    label_skew: float = 0.8
    feature_shift: float = 0.0
    label_conflict: bool = False
    profile_concentration: float = 0.5
    cohort_weights: tuple[float, ...] | None = None
    min_samples: int = 16
    max_samples: int = 48
    duty_cycle: float = DEFAULT_DUTY_CYCLE
    on_min: float = 300.0
    on_max: float = 900.0
    speed_sigma: float = 0.6
    availability_horizon: float = DEFAULT_AVAILABILITY_HORIZON

    def spec(self) -> LatentCohortSpec:
        return LatentCohortSpec(
            num_latent_cohorts=self.latent_cohorts,
            label_skew=self.label_skew,
            feature_shift=self.feature_shift,
            cohort_weights=self.cohort_weights,
            label_conflict=self.label_conflict,
            profile_concentration=self.profile_concentration,
        )


@dataclass(frozen=True)
class ModelSettings:
    kind: str = "logreg"
    hidden_units: int = 32


@dataclass(frozen=True)
class EngineSettings:
    rounds: int
    target_participants: int = 200
    overcommit: float = 0.25
    algorithm: str = "yogi"  # fedavg | yogi
    lr: float = 0.05
    k_steps: int = 5
    batch_size: int = 6
    sample_weighted: bool = True
    eval_interval: int = 5
    eval_sample: int = 100
    idle_quantum: float = 30.0
    server_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    target_accuracy: float | None = None
    log_similarity: bool = False


@dataclass(frozen=True)
class ClusteringSettings:
    arity: int = 2
    epsilon: float = 0.9
    gamma: float = 0.2
    alpha: float = 1.0
    min_participants: int = 8
    clustering_start_frac: float = 0.2
    window_start_frac: float = 0.2
    window_end_frac: float = 0.8
    max_tree_depth: int = 3
    # Fit score a participant must clear to count as a recognized member of
    # the cohort (anchors future center estimates).
    membership_margin: float = 0.25


@dataclass(frozen=True)
class FaultSettings:
    cohort_crashes: tuple[tuple[float, str], ...] = ()
    coordinator_down: tuple[float, float] | None = None
    affinity_loss_rate: float = 0.0
    corrupted_fraction: float = 0.0
    detection_enabled: bool = False
    delta_gate: float = 0.5
    strike_threshold: int = 3
    checkpoint_interval: int = 5
    recovery_delay: float = 0.0

    def plan(self) -> FaultPlan:
        return FaultPlan(
            cohort_crash_times=[
                (t, CohortId.parse(c)) for t, c in self.cohort_crashes
            ],
            coordinator_down=self.coordinator_down,
            affinity_loss_rate=self.affinity_loss_rate,
            corrupted_fraction=self.corrupted_fraction,
        )

    def anomaly(self) -> AnomalyConfig:
        return AnomalyConfig(
            enabled=self.detection_enabled,
            delta_gate=self.delta_gate,
            strike_threshold=self.strike_threshold,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationSettings
    engine: EngineSettings
    model: ModelSettings = field(default_factory=ModelSettings)
    clustering: ClusteringSettings = field(default_factory=ClusteringSettings)
    ldp: LdpConfig = field(default_factory=LdpConfig)
    faults: FaultSettings = field(default_factory=FaultSettings)
    master_seed: int = 1
    output_dir: str = "runs/latest"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, master_seed=seed)

    def clustering_start_round(self) -> int:
        return int(self.clustering.clustering_start_frac * self.engine.rounds)

    def partition_window(self) -> tuple[int, int]:
        return (
            int(self.clustering.window_start_frac * self.engine.rounds),
            int(self.clustering.window_end_frac * self.engine.rounds),
        )


_REQUIRED = {
    "population": ("n_clients",),
    "engine": ("rounds",),
    "seeds": ("master",),
}

_PARSERS = {
    "population": {
        "n_clients": int,
        "num_classes": int,
        "feature_dim": int,
        "latent_cohorts": int,
        "label_skew": float,
        "feature_shift": float,
        "label_conflict": "bool",
        "profile_concentration": float,
        "cohort_weights": "floats",
        "min_samples": int,
        "max_samples": int,
        "duty_cycle": float,
        "on_min": float,
        "on_max": float,
        "speed_sigma": float,
        "availability_horizon": float,
    },
    "model": {"kind": str, "hidden_units": int},
    "engine": {
        "rounds": int,
        "target_participants": int,
        "overcommit": float,
        "algorithm": str,
        "lr": float,
        "k_steps": int,
        "batch_size": int,
        "sample_weighted": "bool",
        "eval_interval": int,
        "eval_sample": int,
        "idle_quantum": float,
        "server_lr": float,
        "beta1": float,
        "beta2": float,
        "tau": float,
        "target_accuracy": float,
        "log_similarity": "bool",
    },
    "clustering": {
        "arity": int,
        "epsilon": float,
        "gamma": float,
        "alpha": float,
        "min_participants": int,
        "clustering_start_frac": float,
        "window_start_frac": float,
        "window_end_frac": float,
        "max_tree_depth": int,
        "membership_margin": float,
    },
    "ldp": {"enabled": "bool", "sigma": float, "clip_norm": float},
    "faults": {
        "cohort_crashes": "crashes",
        "coordinator_down": "floats",
        "affinity_loss_rate": float,
        "corrupted_fraction": float,
        "detection_enabled": "bool",
        "delta_gate": float,
        "strike_threshold": int,
        "checkpoint_interval": int,
        "recovery_delay": float,
    },
    "output": {"dir": str},
    "seeds": {"master": int},
}

_BOOL_VALUES = {"true": True, "yes": True, "1": True,
                "false": False, "no": False, "0": False}


def _find_line(text: str, needle: str) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith(needle):
            return i
    return 0


def _parse_value(kind, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in _BOOL_VALUES:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_VALUES[raw.lower()]
        if kind == "floats":
            return tuple(float(p) for p in raw.split(",") if p.strip() != "")
        if kind == "crashes":
            out = []
            for part in raw.split(";"):
                part = part.strip()
                if not part:
                    continue
                t, cohort = part.split(":")
                out.append((float(t), cohort.strip()))
            return tuple(out)
        return kind(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"{where}: cannot parse value {raw!r}: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _PARSERS:
            line = _find_line(text, f"[{section}]")
            raise ConfigurationError(f"{path}:{line}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _PARSERS[section]:
                line = _find_line(text, key)
                raise ConfigurationError(
                    f"{path}:{line}: unknown key {key!r} in section [{section}]"
                )
            values[section][key] = _parse_value(
                _PARSERS[section][key], raw, f"{path}: [{section}] {key}"
            )

    for section, keys in _REQUIRED.items():
        for key in keys:
            if key not in values.get(section, {}):
                raise ConfigurationError(
                    f"{path}: missing required field [{section}] {key}"
                )

    return build_config(values)


def build_config(values: dict[str, dict]) -> ExperimentConfig:
    """Assemble the typed config from parsed section dicts."""
    pop = PopulationSettings(**values.get("population", {}))
    model = ModelSettings(**values.get("model", {}))
    eng = EngineSettings(**values.get("engine", {}))
    clu = ClusteringSettings(**values.get("clustering", {}))
    ldp_raw = dict(values.get("ldp", {}))
    if "sigma" in ldp_raw:
        ldp_raw["noise_scale"] = ldp_raw.pop("sigma")
    ldp = LdpConfig(**ldp_raw)
    faults_raw = dict(values.get("faults", {}))
    if "coordinator_down" in faults_raw and faults_raw["coordinator_down"] is not None:
        cd = faults_raw["coordinator_down"]
        if len(cd) != 2:
            raise ConfigurationError("coordinator_down needs start,duration")
        faults_raw["coordinator_down"] = (cd[0], cd[1])
    faults = FaultSettings(**faults_raw)
    out_dir = values.get("output", {}).get("dir", "runs/latest")
    seed = values.get("seeds", {}).get("master", 1)

    cfg = ExperimentConfig(
        population=pop,
        model=model,
        engine=eng,
        clustering=clu,
        ldp=ldp,
        faults=faults,
        master_seed=seed,
        output_dir=out_dir,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    e, c, p = cfg.engine, cfg.clustering, cfg.population
    if e.rounds < 1:
        raise ConfigurationError("engine rounds must be >= 1")
    if e.target_participants < 1:
        raise ConfigurationError("target_participants must be >= 1")
    if e.algorithm not in ("fedavg", "yogi"):
        raise ConfigurationError(f"unknown algorithm {e.algorithm!r}")
    if cfg.model.kind not in ("logreg", "mlp"):
        raise ConfigurationError(f"unknown model kind {cfg.model.kind!r}")
    if not 0.0 <= c.epsilon <= 1.0:
        raise ConfigurationError("epsilon must be in [0, 1]")
    if not 0.0 < c.gamma <= 1.0:
        raise ConfigurationError("gamma must be in (0, 1]")
    if c.arity < 2:
        raise ConfigurationError("clustering arity must be >= 2")
    if c.max_tree_depth < 0:
        raise ConfigurationError("max_tree_depth must be >= 0")
    if not c.window_start_frac < c.window_end_frac:
        raise ConfigurationError("partition window must satisfy start < end")
    p.spec().validate()
    cfg.faults.plan().validate()


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    """Serialize a config back to the sectioned text form."""
    lines = []

    def section(name, pairs):
        rows = [f"[{name}]"]
        for k, v in pairs:
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                if name == "faults" and k == "cohort_crashes":
                    v = ";".join(f"{t}:{c}" for t, c in v)
                else:
                    v = ",".join(str(x) for x in v)
            rows.append(f"{k} = {v}")
        lines.extend(rows + [""])

    p = cfg.population
    section("population", [(f.name, getattr(p, f.name)) for f in fields(p)])
    section("model", [(f.name, getattr(cfg.model, f.name)) for f in fields(cfg.model)])
    section("engine", [(f.name, getattr(cfg.engine, f.name)) for f in fields(cfg.engine)])
    section(
        "clustering",
        [(f.name, getattr(cfg.clustering, f.name)) for f in fields(cfg.clustering)],
    )
    section(
        "ldp",
        [
            ("enabled", cfg.ldp.enabled),
            ("sigma", cfg.ldp.noise_scale),
            ("clip_norm", cfg.ldp.clip_norm),
        ],
    )
    f = cfg.faults
    section("faults", [(fld.name, getattr(f, fld.name)) for fld in fields(f)])
    section("output", [("dir", cfg.output_dir)])
    section("seeds", [("master", cfg.master_seed)])
    Path(path).write_text("\n".join(lines))
