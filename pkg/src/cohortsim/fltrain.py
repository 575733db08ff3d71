"""Local client training, server aggregation, evaluation, and update noising.

Models are kept deliberately small and dense: a multinomial logistic
regression by default or a one-hidden-layer tanh MLP.  The per-round report
a client sends is the model delta over its local steps, which is also the
substrate the clustering machinery consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import TrainingDiverged
from .population import ClientProfile
from .seeds import ensure_rng

HOLDOUT_FRACTION = 0.2


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "logreg" | "mlp"
    feature_dim: int
    num_classes: int
    hidden_units: int = 32

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model kind: {self.kind!r}")

    @property
    def dim(self) -> int:
        d, c, h = self.feature_dim, self.num_classes, self.hidden_units
        if self.kind == "logreg":
            return c * d + c
        return h * d + h + c * h + c


@dataclass
class ModelWeights:
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def copy(self) -> "ModelWeights":
        return ModelWeights(values=self.values.copy())


@dataclass
class GradientUpdate:
    """What a participant reports: its k-step model delta plus bookkeeping."""

    client_id: int
    delta: np.ndarray  # w_before - w_after
    loss: float
    num_samples: int


@dataclass
class YogiState:
    """Server-side adaptive optimizer state (sign-based second moment)."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    server_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3

    @staticmethod
    def fresh(dim: int, server_lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.99, tau: float = 1e-3) -> "YogiState":
        return YogiState(
            first_moment=np.zeros(dim),
            second_moment=np.zeros(dim),
            server_lr=server_lr,
            beta1=beta1,
            beta2=beta2,
            tau=tau,
        )


@dataclass(frozen=True)
class LdpConfig:
    enabled: bool = False
    noise_scale: float = 0.0  # sigma, in units of the clip norm
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def init_weights(spec: ModelSpec, rng: np.random.Generator | int) -> ModelWeights:
    """Small random init, deterministic given the generator."""
    rng = ensure_rng(rng)
    return ModelWeights(values=rng.normal(scale=0.01, size=spec.dim))


def _unpack(spec: ModelSpec, values: np.ndarray):
    d, c, h = spec.feature_dim, spec.num_classes, spec.hidden_units
    if spec.kind == "logreg":
        w = values[: c * d].reshape(c, d)
        b = values[c * d :]
        return w, b
    ofs = 0
    w1 = values[ofs : ofs + h * d].reshape(h, d); ofs += h * d
    b1 = values[ofs : ofs + h]; ofs += h
    w2 = values[ofs : ofs + c * h].reshape(c, h); ofs += c * h
    b2 = values[ofs:]
    return w1, b1, w2, b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_logits(spec: ModelSpec, w: ModelWeights, x: np.ndarray) -> np.ndarray:
    if spec.kind == "logreg":
        wt, b = _unpack(spec, w.values)
        return x @ wt.T + b
    w1, b1, w2, b2 = _unpack(spec, w.values)
    hidden = np.tanh(x @ w1.T + b1)
    return hidden @ w2.T + b2


def mean_loss(spec: ModelSpec, w: ModelWeights, x: np.ndarray, y: np.ndarray) -> float:
    logp = _log_softmax(predict_logits(spec, w, x))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_grad(
    spec: ModelSpec, w: ModelWeights, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient in flat parameter space."""
    n = len(y)
    if spec.kind == "logreg":
        wt, b = _unpack(spec, w.values)
        logits = x @ wt.T + b
        logp = _log_softmax(logits)
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        p /= n
        grad = np.concatenate([(p.T @ x).ravel(), p.sum(axis=0)])
        loss = float(-logp[np.arange(n), y].mean())
        return loss, grad
    w1, b1, w2, b2 = _unpack(spec, w.values)
    pre = x @ w1.T + b1
    hidden = np.tanh(pre)
    logits = hidden @ w2.T + b2
    logp = _log_softmax(logits)
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    p /= n
    g_w2 = p.T @ hidden
    g_b2 = p.sum(axis=0)
    back = (p @ w2) * (1.0 - hidden * hidden)
    g_w1 = back.T @ x
    g_b1 = back.sum(axis=0)
    grad = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
    loss = float(-logp[np.arange(n), y].mean())
    return loss, grad


def train_split(client: ClientProfile) -> tuple[np.ndarray, np.ndarray]:
    """First 80% of the client's samples; the rest is held out for testing."""
    n = client.num_samples
    cut = n if n == 1 else min(max(int(0.8 * n), 1), n - 1)
    return client.features[:cut], client.labels[:cut]


def test_split(client: ClientProfile) -> tuple[np.ndarray, np.ndarray]:
    n = client.num_samples
    cut = 0 if n == 1 else min(max(int(0.8 * n), 1), n - 1)
    return client.features[cut:], client.labels[cut:]


def local_train(
    spec: ModelSpec,
    w: ModelWeights,
    client: ClientProfile,
    k_steps: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator | int,
) -> GradientUpdate:
    """Run k steps of minibatch SGD on the client's local training split.

    Returns the model delta (initial minus final weights) and the mean loss
    over the training split at the final weights.  Deterministic given the
    generator; a non-finite loss raises and the engine counts the client as
    failed for the round.
    """
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    if client.num_samples == 0:
        raise ValueError("client dataset is empty")
    rng = ensure_rng(rng)
    x, y = train_split(client)
    n = len(y)
    values = w.values.copy()
    work = ModelWeights(values=values)
    bs = min(batch_size, n)
    for _ in range(k_steps):
        idx = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
        loss, grad = loss_and_grad(spec, work, x[idx], y[idx])
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"client {client.client_id}: non-finite loss")
        values -= lr * grad
    final_loss = mean_loss(spec, work, x, y)
    if not np.isfinite(final_loss):
        raise TrainingDiverged(f"client {client.client_id}: non-finite loss")
    return GradientUpdate(
        client_id=client.client_id,
        delta=w.values - values,
        loss=final_loss,
        num_samples=n,
    )


def _weighted_mean_delta(
    updates: list[GradientUpdate], sample_weighted: bool
) -> np.ndarray:
    if not updates:
        raise ValueError("round aborted: no updates to aggregate")
    dim = updates[0].delta.size
    for u in updates:
        if u.delta.size != dim:
            raise ValueError("update dimensions do not match")
    if sample_weighted:
        weights = np.array([u.num_samples for u in updates], dtype=np.float64)
    else:
        weights = np.ones(len(updates))
    weights /= weights.sum()
    out = np.zeros(dim)
    for wgt, u in zip(weights, updates):
        out += wgt * u.delta
    return out


def fedavg_aggregate(
    w: ModelWeights, updates: list[GradientUpdate], sample_weighted: bool = True
) -> ModelWeights:
    """Apply the sample-weighted mean delta with unit server step."""
    return ModelWeights(values=w.values - _weighted_mean_delta(updates, sample_weighted))


def yogi_aggregate(
    state: YogiState,
    w: ModelWeights,
    updates: list[GradientUpdate],
    sample_weighted: bool = True,
) -> tuple[ModelWeights, YogiState]:
    """Adaptive server step treating the weighted mean delta as pseudo-gradient.

    The second moment only grows where the squared pseudo-gradient exceeds
    it (sign-based rule), which keeps the effective step from collapsing
    under heterogeneous update magnitudes.
    """
    g = _weighted_mean_delta(updates, sample_weighted)
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    g2 = g * g
    v = state.second_moment - (1.0 - state.beta2) * g2 * np.sign(
        state.second_moment - g2
    )
    new_values = w.values - state.server_lr * m / (np.sqrt(v) + state.tau)
    new_state = replace(state, first_moment=m, second_moment=v)
    return ModelWeights(values=new_values), new_state


def evaluate(
    spec: ModelSpec, w: ModelWeights, clients: list[ClientProfile]
) -> tuple[float, dict[int, float]]:
    """Top-1 accuracy on each client's held-out split; client-uniform mean."""
    if not clients:
        raise ValueError("no clients to evaluate")
    per_client = {}
    for client in clients:
        x, y = test_split(client)
        pred = predict_logits(spec, w, x).argmax(axis=1)
        per_client[client.client_id] = float((pred == y).mean())
    mean = float(np.mean(list(per_client.values())))
    return mean, per_client


def apply_ldp(
    update: GradientUpdate, cfg: LdpConfig, rng: np.random.Generator | int
) -> GradientUpdate:
    """Clip the update to the configured norm, then add Gaussian noise.

    Noise standard deviation is noise_scale * clip_norm per coordinate.  The
    server only ever sees the noised delta, so clustering downstream operates
    on exactly what a privacy-conscious client would transmit.
    """
    delta = update.delta
    norm = float(np.linalg.norm(delta))
    if norm > cfg.clip_norm:
        delta = delta * (cfg.clip_norm / norm)
    if cfg.noise_scale > 0:
        rng = ensure_rng(rng)
        delta = delta + rng.normal(
            scale=cfg.noise_scale * cfg.clip_norm, size=delta.shape
        )
    return replace(update, delta=delta)
