"""Probabilistic ensemble dynamics model.

B independent multilayer perceptrons with diagonal Gaussian heads, trained
by negative log-likelihood on bootstrap resamples of a shared transition
dataset. Each member maps a normalized (observation, action) input to the
mean and log-variance of the next-observation delta. The analytic score of
a realized transition with respect to the head outputs is what the robust
planning objective differentiates, so it is exposed alongside prediction.

Backprop and the adaptive-moment optimizer are hand-rolled in numpy; the
networks are small enough that this is both transparent and fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeds import stream_key

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 4.0
_STD_FLOOR = 1e-8
_LN_2PI = float(np.log(2.0 * np.pi))


class TrainingDiverged(RuntimeError):
    def __init__(self, member: int, epoch: int):
        super().__init__(f"training loss became non-finite (member {member}, epoch {epoch})")
        self.member = member
        self.epoch = epoch


@dataclass(frozen=True)
class NormStats:
    """Per-dimension normalization of inputs (obs || action) and delta targets."""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    @classmethod
    def identity(cls, input_dim: int, target_dim: int) -> "NormStats":
        return cls(np.zeros(input_dim), np.ones(input_dim),
                   np.zeros(target_dim), np.ones(target_dim))

    @classmethod
    def from_data(cls, inputs: np.ndarray, targets: np.ndarray) -> "NormStats":
        return cls(
            inputs.mean(axis=0),
            np.maximum(inputs.std(axis=0), _STD_FLOOR),
            targets.mean(axis=0),
            np.maximum(targets.std(axis=0), _STD_FLOOR),
        )

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_mean) / self.input_std


@dataclass(frozen=True)
class TransitionDataset:
    observations: np.ndarray       # (N, obs_dim)
    actions: np.ndarray            # (N,)
    next_observations: np.ndarray  # (N, obs_dim)
    norm: NormStats

    @classmethod
    def from_transitions(cls, observations, actions, next_observations) -> "TransitionDataset":
        observations = np.asarray(observations, dtype=float)
        actions = np.asarray(actions, dtype=float).reshape(-1)
        next_observations = np.asarray(next_observations, dtype=float)
        if observations.shape != next_observations.shape or len(actions) != len(observations):
            raise ValueError("transition arrays are dimension-inconsistent")
        inputs = np.concatenate([observations, actions[:, None]], axis=1)
        deltas = next_observations - observations
        return cls(observations, actions, next_observations,
                   NormStats.from_data(inputs, deltas))

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.observations, self.actions[:, None]], axis=1)

    @property
    def deltas(self) -> np.ndarray:
        return self.next_observations - self.observations

    def extend(self, other: "TransitionDataset") -> "TransitionDataset":
        """Concatenate rows; normalization statistics are recomputed."""
        return TransitionDataset.from_transitions(
            np.concatenate([self.observations, other.observations]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.next_observations, other.next_observations]),
        )


@dataclass
class MLPParams:
    """Weights of one member plus its architecture descriptor."""

    weights: list[np.ndarray]   # weights[l]: (n_in, n_out)
    biases: list[np.ndarray]    # biases[l]: (n_out,)
    hidden: tuple[int, ...]
    activation: str = "swish"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]


@dataclass(frozen=True)
class GaussianPrediction:
    mean: np.ndarray          # (..., obs_dim) de-normalized delta mean
    log_variance: np.ndarray  # (..., obs_dim) clamped to [LOG_VAR_MIN, LOG_VAR_MAX]


@dataclass(frozen=True)
class ScoreVector:
    """Gradient of the Gaussian log-density w.r.t. (mean, log-variance)."""

    d_mean: np.ndarray
    d_logvar: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_mean, self.d_logvar], axis=-1)


@dataclass
class EnsembleModel:
    """The trained ensemble: a Dirac mixture over B member networks."""

    members: list[MLPParams]
    norm: NormStats
    obs_dim: int
    act_dim: int = 1
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.members)

    def pack(self) -> tuple[np.ndarray, np.ndarray]:
        """Flatten member weights into (theta (B, P), layer dims) for the kernels."""
        if self._packed is None:
            dims = np.array([self.members[0].input_dim, *self.members[0].hidden,
                             self.members[0].output_dim], dtype=np.int64)
            rows = []
            for m in self.members:
                rows.append(np.concatenate(
                    [np.concatenate([w.ravel(), b]) for w, b in zip(m.weights, m.biases)]))
            self._packed = (np.ascontiguousarray(np.stack(rows)), dims)
        return self._packed


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class TrainReport:
    loss_curves: np.ndarray  # (B, epochs) mean training nll per epoch


def _swish(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def init_ensemble(obs_dim: int, members: int, hidden: tuple[int, ...] = (64, 64, 64),
                  seed: int = 0, act_dim: int = 1) -> EnsembleModel:
    """Fresh ensemble with scaled-normal weights; normalization is identity
    until a dataset is seen by :func:`train`."""
    if members < 1:
        raise ValueError("ensemble needs at least one member")
    root = np.random.SeedSequence(entropy=seed)
    dims = [obs_dim + act_dim, *hidden, 2 * obs_dim]
    nets = []
    for child in root.spawn(members):
        rng = np.random.default_rng(child)
        weights = [rng.normal(0.0, 1.0 / np.sqrt(dims[l]), size=(dims[l], dims[l + 1]))
                   for l in range(len(dims) - 1)]
        biases = [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)]
        nets.append(MLPParams(weights, biases, tuple(hidden)))
    return EnsembleModel(nets, NormStats.identity(obs_dim + act_dim, obs_dim), obs_dim, act_dim)


def _forward_raw(member: MLPParams, x_norm: np.ndarray, keep: bool = False):
    """Network pass on normalized inputs; optionally keeps activations for backprop."""
    acts, sigs = [x_norm], []
    h = x_norm
    n_layers = len(member.weights)
    for l in range(n_layers):
        z = h @ member.weights[l] + member.biases[l]
        if l < n_layers - 1:
            h, sig = _swish(z)
            if keep:
                acts.append(h)
                sigs.append((z, sig))
        else:
            h = z
    return (h, acts, sigs) if keep else h


def forward(member: MLPParams, obs: np.ndarray, action, norm: NormStats) -> GaussianPrediction:
    """Gaussian head prediction for one (obs, action) pair or a batch of rows."""
    obs = np.asarray(obs, dtype=float)
    action = np.broadcast_to(np.asarray(action, dtype=float), obs.shape[:-1])
    x = np.concatenate([obs, action[..., None]], axis=-1)
    out = _forward_raw(member, norm.normalize_input(x))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("model forward pass produced non-finite values")
    d = obs.shape[-1]
    mean = norm.target_mean + norm.target_std * out[..., :d]
    logvar = np.clip(out[..., d:] + 2.0 * np.log(norm.target_std),
                     LOG_VAR_MIN, LOG_VAR_MAX)
    return GaussianPrediction(mean=mean, log_variance=logvar)


def nll(pred: GaussianPrediction, target_delta: np.ndarray) -> float:
    """Gaussian negative log-likelihood of one target delta."""
    diff = np.asarray(target_delta, dtype=float) - pred.mean
    var = np.exp(pred.log_variance)
    d = pred.mean.shape[-1]
    return float(0.5 * np.sum(diff ** 2 / var + pred.log_variance) + 0.5 * d * _LN_2PI)


def score(pred: GaussianPrediction, observed_delta: np.ndarray) -> ScoreVector:
    """Analytic gradient of ln N(observed; mean, diag exp(logvar)) w.r.t.
    the head outputs; exact, no approximation."""
    diff = np.asarray(observed_delta, dtype=float) - pred.mean
    var = np.exp(pred.log_variance)
    return ScoreVector(d_mean=diff / var,
                       d_logvar=0.5 * (diff ** 2 / var - 1.0))


def sample_next(pred: GaussianPrediction, obs: np.ndarray, rng: np.random.Generator,
                angle_pair: int | None = None) -> np.ndarray:
    """Draw the next observation; the (cos, sin) pair at ``angle_pair`` is
    re-normalized to the unit circle after sampling."""
    z = rng.standard_normal(pred.mean.shape)
    nxt = np.asarray(obs, dtype=float) + pred.mean + np.exp(0.5 * pred.log_variance) * z
    if angle_pair is not None:
        c, s = nxt[..., angle_pair], nxt[..., angle_pair + 1]
        norm = np.hypot(c, s)
        with np.errstate(invalid="ignore", divide="ignore"):
            nxt[..., angle_pair] = c / norm
            nxt[..., angle_pair + 1] = s / norm
    return nxt


def ensemble_density(model: EnsembleModel, obs: np.ndarray, action, delta: np.ndarray) -> float:
    """Mixture density of a delta under the ensemble: the average of the
    member Gaussian densities at that point."""
    delta = np.asarray(delta, dtype=float)
    total = 0.0
    for member in model.members:
        pred = forward(member, obs, action, model.norm)
        var = np.exp(pred.log_variance)
        log_pdf = -0.5 * np.sum((delta - pred.mean) ** 2 / var
                                + pred.log_variance + _LN_2PI)
        total += np.exp(log_pdf)
    return float(total / model.size)


def _adam_state(member: MLPParams):
    zeros = lambda a: np.zeros_like(a)
    return ([zeros(w) for w in member.weights], [zeros(b) for b in member.biases],
            [zeros(w) for w in member.weights], [zeros(b) for b in member.biases])


def _nll_batch_and_grads(member: MLPParams, x_norm: np.ndarray, deltas: np.ndarray,
                         norm: NormStats):
    """Mean nll over a batch plus gradients w.r.t. every weight and bias."""
    out, acts, sigs = _forward_raw(member, x_norm, keep=True)
    n, d = deltas.shape
    h_mean, h_logvar = out[:, :d], out[:, d:]
    mean = norm.target_mean + norm.target_std * h_mean
    logvar_raw = h_logvar + 2.0 * np.log(norm.target_std)
    logvar = np.clip(logvar_raw, LOG_VAR_MIN, LOG_VAR_MAX)
    inside = (logvar_raw > LOG_VAR_MIN) & (logvar_raw < LOG_VAR_MAX)

    diff = deltas - mean
    var = np.exp(logvar)
    loss = float(np.mean(0.5 * np.sum(diff ** 2 / var + logvar, axis=1) + 0.5 * d * _LN_2PI))

    d_mean = (mean - deltas) / var / n
    d_logvar = 0.5 * (1.0 - diff ** 2 / var) / n * inside
    d_out = np.concatenate([d_mean * norm.target_std, d_logvar], axis=1)

    grads_w, grads_b = [None] * len(member.weights), [None] * len(member.biases)
    delta_l = d_out
    for l in range(len(member.weights) - 1, -1, -1):
        grads_w[l] = acts[l].T @ delta_l
        grads_b[l] = delta_l.sum(axis=0)
        if l > 0:
            z, sig = sigs[l - 1]
            upstream = delta_l @ member.weights[l].T
            delta_l = upstream * sig * (1.0 + z * (1.0 - sig))
    return loss, grads_w, grads_b


def train(model: EnsembleModel, data: TransitionDataset,
          config: TrainConfig = TrainConfig()) -> tuple[EnsembleModel, TrainReport]:
    """Train every member on its own bootstrap resample of ``data``.

    Normalization statistics are recomputed from the full dataset first;
    optimization is mini-batch adaptive-moment gradient descent on the
    Gaussian nll. Deterministic given ``config.seed``; returns a new model,
    the input model is left untouched.
    """
    if len(data) == 0:
        raise ValueError("training requires a non-empty dataset")
    norm = NormStats.from_data(data.inputs, data.deltas)
    x_norm_all = norm.normalize_input(data.inputs)
    deltas_all = data.deltas
    n = len(data)
    beta1, beta2, eps_opt = 0.9, 0.999, 1e-8

    trained, curves = [], []
    root = np.random.SeedSequence(entropy=config.seed, spawn_key=(stream_key("ensemble-train"),))
    for b, (member, child) in enumerate(zip(model.members, root.spawn(model.size))):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, n, size=n)
        x_norm, deltas = x_norm_all[boot], deltas_all[boot]
        member = MLPParams([w.copy() for w in member.weights],
                           [v.copy() for v in member.biases],
                           member.hidden, member.activation)
        m_w, m_b, v_w, v_b = _adam_state(member)
        step_count = 0
        losses = []
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            epoch_loss, batches = 0.0, 0
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                loss, g_w, g_b = _nll_batch_and_grads(member, x_norm[idx], deltas[idx], norm)
                if not np.isfinite(loss):
                    raise TrainingDiverged(b, epoch)
                epoch_loss += loss
                batches += 1
                step_count += 1
                corr1 = 1.0 - beta1 ** step_count
                corr2 = 1.0 - beta2 ** step_count
                for l in range(len(member.weights)):
                    m_w[l] = beta1 * m_w[l] + (1 - beta1) * g_w[l]
                    v_w[l] = beta2 * v_w[l] + (1 - beta2) * g_w[l] ** 2
                    member.weights[l] -= config.learning_rate * (m_w[l] / corr1) \
                        / (np.sqrt(v_w[l] / corr2) + eps_opt)
                    m_b[l] = beta1 * m_b[l] + (1 - beta1) * g_b[l]
                    v_b[l] = beta2 * v_b[l] + (1 - beta2) * g_b[l] ** 2
                    member.biases[l] -= config.learning_rate * (m_b[l] / corr1) \
                        / (np.sqrt(v_b[l] / corr2) + eps_opt)
            losses.append(epoch_loss / batches)
        trained.append(member)
        curves.append(losses)
    return (EnsembleModel(trained, norm, model.obs_dim, model.act_dim),
            TrainReport(loss_curves=np.asarray(curves)))
