"""Conditional denoising diffusion model over costate vectors.

A small fully connected network learns to predict the noise injected by a
linear Gaussian corruption schedule, conditioned on the mission parameter
through a learned embedding. A dedicated null token replaces the
condition with fixed probability during training so the same network also
provides the unconditional prediction needed for classifier-free
guidance. Fine-tuning continues from existing weights, weights every
example by its reward, and drops the worst tenth of the dataset by
objective value first.

Gradients are computed in closed form (the network is four matrices) and
applied with an adaptive-moment optimizer, so no ML runtime is involved.
All randomness flows through counter-based streams: training draws one
stream per optimizer step and sampling one stream per requested sample,
which keeps runs bitwise reproducible and sampling order-independent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

TERMINAL_MARGINAL_BOUND = 1e-4
DISCARD_FRACTION = 0.1
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DiffusionConfig:
    """Schedule, architecture and optimizer settings in one place."""

    data_dim: int = 4
    n_steps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden_width: int = 128
    hidden_layers: int = 3
    time_embed_dim: int = 32
    cond_embed_dim: int = 16
    p_drop: float = 0.1
    guidance_weight: float = 0.3
    learning_rate: float = 1e-3
    batch_size: int = 128
    train_iterations: int = 4000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    posterior_variance: str = "beta"

    def __post_init__(self):
        if min(self.data_dim, self.n_steps, self.hidden_width, self.hidden_layers) < 1:
            raise ConfigError("network and schedule dimensions must be positive")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be a positive even number")
        if self.cond_embed_dim < 1:
            raise ConfigError("cond_embed_dim must be positive")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1): {self.p_drop}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.train_iterations < 0:
            raise ConfigError("invalid optimizer settings")
        if self.posterior_variance not in ("beta", "beta_tilde"):
            raise ConfigError(f"unknown posterior variance rule: {self.posterior_variance!r}")

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_embed_dim + self.cond_embed_dim


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise variances with cached cumulative signal products."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "VarianceSchedule":
        betas = np.asarray(betas, dtype=float)
        sched = cls(betas=betas, alphas=1.0 - betas, alpha_bar=np.cumprod(1.0 - betas))
        sched.validate()
        return sched

    @classmethod
    def linear(cls, n_steps: int = 500, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls.from_betas(np.linspace(beta_start, beta_end, n_steps))

    @classmethod
    def of(cls, config: DiffusionConfig) -> "VarianceSchedule":
        return cls.linear(config.n_steps, config.beta_start, config.beta_end)

    @property
    def n_steps(self) -> int:
        return self.betas.size

    def validate(self) -> None:
        b = self.betas
        if b.ndim != 1 or b.size == 0:
            raise ConfigError("variance schedule must be a nonempty 1-D array")
        if not (b[0] > 0.0 and b[-1] < 1.0 and np.all(np.diff(b) >= 0.0)):
            raise ConfigError("variances must be nondecreasing within (0, 1)")
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ConfigError("cumulative signal products must be strictly decreasing")
        if self.alpha_bar[-1] >= TERMINAL_MARGINAL_BOUND:
            logger.warning(
                "terminal signal fraction %.3e exceeds %.0e; the noised "
                "marginal keeps a visible trace of the data",
                self.alpha_bar[-1], TERMINAL_MARGINAL_BOUND,
            )

    def posterior_variance(self, kind: str) -> np.ndarray:
        """Reverse-step noise variance per step (index 0 is step 1)."""
        if kind == "beta":
            return self.betas.copy()
        if kind == "beta_tilde":
            prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
            return (1.0 - prev) / (1.0 - self.alpha_bar) * self.betas
        raise ConfigError(f"unknown posterior variance rule: {kind!r}")


def forward_noise(lam0, n: int, noise, schedule: VarianceSchedule):
    """Draw from the step-n corruption marginal in closed form.

    Step 0 is the identity by the usual convention that the cumulative
    signal product starts at one.
    """
    if not 0 <= n <= schedule.n_steps:
        raise ValueError(f"step {n} outside [0, {schedule.n_steps}]")
    lam0 = np.asarray(lam0, dtype=float)
    if n == 0:
        return lam0.copy()
    ab = schedule.alpha_bar[n - 1]
    return np.sqrt(ab) * lam0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=float)


@dataclass(frozen=True)
class NormalizationStats:
    """Componentwise affine map applied to costates before training."""

    mean: np.ndarray
    std: np.ndarray
    alpha_lo: float = 0.0
    alpha_hi: float = 1.0

    @classmethod
    def fit(cls, lam0, alpha_lo: float = 0.0, alpha_hi: float = 1.0):
        lam0 = np.asarray(lam0, dtype=float)
        std = lam0.std(axis=0)
        if np.any(std <= 0.0):
            raise NumericalError("training costates are degenerate along some component")
        if not alpha_hi > alpha_lo:
            raise ConfigError("mission-parameter range must have positive width")
        return cls(mean=lam0.mean(axis=0), std=std, alpha_lo=alpha_lo, alpha_hi=alpha_hi)

    def normalize(self, lam):
        return (np.asarray(lam, dtype=float) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def normalize_alpha(self, alpha):
        return (np.asarray(alpha, dtype=float) - self.alpha_lo) / (self.alpha_hi - self.alpha_lo)


@dataclass
class DenoiserParams:
    """Weights of the noise predictor, embeddings included."""

    config: DiffusionConfig
    cond_weight: np.ndarray
    cond_bias: np.ndarray
    null_token: np.ndarray
    weights: list
    biases: list

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            config=self.config,
            cond_weight=self.cond_weight.copy(),
            cond_bias=self.cond_bias.copy(),
            null_token=self.null_token.copy(),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def arrays(self) -> list:
        """Flat parameter list in a fixed order (shared with the optimizer)."""
        out = [self.cond_weight, self.cond_bias, self.null_token]
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_params(config: DiffusionConfig, stream: np.random.Generator) -> DenoiserParams:
    """Scaled-normal initialization sized for the SiLU hidden stack."""
    dims = [config.input_dim] + [config.hidden_width] * config.hidden_layers + [config.data_dim]
    weights, biases = [], []
    cond_weight = 0.1 * stream.standard_normal(config.cond_embed_dim)
    cond_bias = 0.1 * stream.standard_normal(config.cond_embed_dim)
    null_token = 0.1 * stream.standard_normal(config.cond_embed_dim)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(stream.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return DenoiserParams(config, cond_weight, cond_bias, null_token, weights, biases)


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig


def _silu_grad(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig * (1.0 + z * (1.0 - sig))


def _time_embedding(n, dim: int):
    """Sinusoidal features of the (integer) step index."""
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / half)
    args = np.asarray(n, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _cond_embedding(params: DenoiserParams, alpha_norm):
    return alpha_norm[:, None] * params.cond_weight[None, :] + params.cond_bias[None, :]


def _forward(params: DenoiserParams, x, cache: bool = False):
    pres, acts = [], [x]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        pre = h @ w + b
        h = _silu(pre)
        pres.append(pre)
        acts.append(h)
    out = h @ params.weights[-1] + params.biases[-1]
    if cache:
        return out, acts, pres
    return out


def predict(params: DenoiserParams, lam_n, n: int, alpha=None):
    """Noise prediction for a batch; alpha=None selects the null token."""
    cfg = params.config
    lam_n = np.atleast_2d(np.asarray(lam_n, dtype=float))
    batch = lam_n.shape[0]
    t_emb = _time_embedding(np.full(batch, n), cfg.time_embed_dim)
    if alpha is None:
        cond = np.tile(params.null_token, (batch, 1))
    else:
        cond = _cond_embedding(params, np.full(batch, float(alpha)))
    return _forward(params, np.concatenate([lam_n, t_emb, cond], axis=1))


def cfg_predict(params: DenoiserParams, lam_n, n: int, alpha: float, w: float):
    """Guided prediction: conditional pushed away from the unconditional."""
    lam_n = np.asarray(lam_n, dtype=float)
    cond = predict(params, lam_n, n, alpha)
    if w == 0.0:
        out = cond
    else:
        out = (1.0 + w) * cond - w * predict(params, lam_n, n, None)
    return out[0] if lam_n.ndim == 1 else out


class _Adam:
    """Adaptive-moment updates applied in place to a parameter list."""

    def __init__(self, arrays, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _loss_and_grads(params, lam_n, t_emb, alpha_norm, dropped, eps, weights):
    """Weighted squared prediction error and its parameter gradients."""
    cfg = params.config
    cond = _cond_embedding(params, alpha_norm)
    cond[dropped] = params.null_token
    x = np.concatenate([lam_n, t_emb, cond], axis=1)
    out, acts, pres = _forward(params, x, cache=True)

    batch = lam_n.shape[0]
    resid = out - eps
    loss = float(np.mean(weights * np.sum(resid * resid, axis=1)))
    delta = (2.0 / batch) * weights[:, None] * resid

    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    for j in range(len(params.weights) - 1, -1, -1):
        grads_w[j] = acts[j].T @ delta
        grads_b[j] = delta.sum(axis=0)
        if j > 0:
            delta = (delta @ params.weights[j].T) * _silu_grad(pres[j - 1])
    dx = delta @ params.weights[0].T
    dcond = dx[:, cfg.data_dim + cfg.time_embed_dim:]

    kept = ~dropped
    g_cond_w = (alpha_norm[kept, None] * dcond[kept]).sum(axis=0)
    g_cond_b = dcond[kept].sum(axis=0)
    g_null = dcond[dropped].sum(axis=0)

    grads = [g_cond_w, g_cond_b, g_null]
    for gw, gb in zip(grads_w, grads_b):
        grads.extend((gw, gb))
    return loss, grads


def _run_training(params, stats, lam0, alpha, rewards, config, seed) -> None:
    """Shared optimizer loop; mutates params in place."""
    schedule = VarianceSchedule.of(config)
    lam0_n = stats.normalize(lam0)
    alpha_n = stats.normalize_alpha(alpha)
    opt = _Adam(params.arrays(), config.learning_rate,
                config.adam_beta1, config.adam_beta2, config.adam_eps)
    n_data = lam0_n.shape[0]
    report = max(1, config.train_iterations // 8)
    for step in range(1, config.train_iterations + 1):
        stream = rng.substream(seed, rng.PURPOSE_TRAIN, 0, counter=step)
        idx = stream.integers(0, n_data, size=config.batch_size)
        n = stream.integers(1, schedule.n_steps + 1, size=config.batch_size)
        eps = stream.standard_normal((config.batch_size, config.data_dim))
        dropped = stream.random(config.batch_size) < config.p_drop

        ab = schedule.alpha_bar[n - 1][:, None]
        lam_n = np.sqrt(ab) * lam0_n[idx] + np.sqrt(1.0 - ab) * eps
        t_emb = _time_embedding(n, config.time_embed_dim)
        loss, grads = _loss_and_grads(
            params, lam_n, t_emb, alpha_n[idx], dropped, eps, rewards[idx])
        opt.step(params.arrays(), grads)
        if step % report == 0 or step == config.train_iterations:
            logger.info("training step %d/%d: batch loss %.5f",
                        step, config.train_iterations, loss)


def _as_dataset(lam0, alpha, rewards, data_dim):
    lam0 = np.asarray(lam0, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if lam0.ndim != 2 or lam0.shape[0] == 0:
        raise ValueError("training set must be a nonempty 2-D array of costates")
    if lam0.shape[1] != data_dim:
        raise ConfigError(f"dataset is {lam0.shape[1]}-D but the model expects {data_dim}-D")
    if alpha.shape != (lam0.shape[0],):
        raise ValueError("need one mission parameter per costate")
    if rewards is None:
        rewards = np.ones(lam0.shape[0])
    else:
        rewards = np.asarray(rewards, dtype=float)
        if rewards.shape != (lam0.shape[0],):
            raise ValueError("need one reward per costate")
    return lam0, alpha, rewards


def train(lam0, alpha, config: DiffusionConfig | None = None, rewards=None, seed: int = 0):
    """Train a denoiser from scratch; returns (params, stats)."""
    config = config if config is not None else DiffusionConfig()
    lam0, alpha, rewards = _as_dataset(lam0, alpha, rewards, config.data_dim)
    stats = NormalizationStats.fit(lam0)
    params = init_params(config, rng.substream(seed, rng.PURPOSE_TRAIN, 0, counter=0))
    _run_training(params, stats, lam0, alpha, rewards, config, seed)
    return params, stats


def filter_worst(j_values, fraction: float = DISCARD_FRACTION):
    """Indices that survive dropping the worst fraction by objective value."""
    j = np.asarray(j_values, dtype=float)
    drop = int(j.size * fraction)
    if drop == 0:
        return np.arange(j.size)
    order = np.argsort(j, kind="stable")
    return np.sort(order[: j.size - drop])


def finetune(baseline: DenoiserParams, stats: NormalizationStats,
             lam0, alpha, rewards, j_values, config: DiffusionConfig | None = None,
             seed: int = 0) -> DenoiserParams:
    """Continue training from baseline weights with reward weighting.

    The worst tenth of the dataset by objective value is discarded first.
    The baseline's normalization is kept: refitting would rescale inputs
    under weights trained at the old scale.
    """
    config = config if config is not None else baseline.config
    lam0, alpha, rewards = _as_dataset(lam0, alpha, rewards, config.data_dim)
    if np.any(rewards < 0.1 - 1e-12) or np.any(rewards > 1.0 + 1e-12):
        raise ValueError("rewards must be calibrated into [0.1, 1]")
    j = np.asarray(j_values, dtype=float)
    if j.shape != (lam0.shape[0],):
        raise ValueError("need one objective value per costate")
    keep = filter_worst(j)
    logger.info("fine-tuning on %d of %d records (worst tenth dropped)",
                keep.size, lam0.shape[0])
    params = baseline.copy()
    _run_training(params, stats, lam0[keep], alpha[keep], rewards[keep], config, seed)
    return params


def evaluate_loss(params: DenoiserParams, stats: NormalizationStats,
                  lam0, alpha, rewards=None, seed: int = 0, repeats: int = 4) -> float:
    """Monte Carlo estimate of the training loss on a held-out set."""
    config = params.config
    lam0, alpha, rewards = _as_dataset(lam0, alpha, rewards, config.data_dim)
    schedule = VarianceSchedule.of(config)
    lam0_n = stats.normalize(lam0)
    alpha_n = stats.normalize_alpha(alpha)
    total = 0.0
    n_data = lam0_n.shape[0]
    for rep in range(repeats):
        stream = rng.substream(seed, rng.PURPOSE_TRAIN, 1, counter=rep)
        n = stream.integers(1, schedule.n_steps + 1, size=n_data)
        eps = stream.standard_normal((n_data, config.data_dim))
        ab = schedule.alpha_bar[n - 1][:, None]
        lam_n = np.sqrt(ab) * lam0_n + np.sqrt(1.0 - ab) * eps
        t_emb = _time_embedding(n, config.time_embed_dim)
        cond = _cond_embedding(params, alpha_n)
        out = _forward(params, np.concatenate([lam_n, t_emb, cond], axis=1))
        resid = out - eps
        total += float(np.mean(rewards * np.sum(resid * resid, axis=1)))
    return total / repeats


def sample(params: DenoiserParams, stats: NormalizationStats, alpha: float,
           w: float | None = None, count: int = 1, seed: int = 0,
           chunk: int = 4096) -> np.ndarray:
    """Generate costates by running the learned reverse process.

    Each requested sample owns one noise stream keyed by its index, so
    the injected noise never depends on batching; repeating a call with
    the same arguments is bitwise reproducible. The chunk size only
    bounds memory, though changing it can move the last bits of the
    batched matrix products.
    """
    config = params.config
    if count < 0:
        raise ValueError("count must be nonnegative")
    if w is None:
        w = config.guidance_weight
    schedule = VarianceSchedule.of(config)
    post_var = schedule.posterior_variance(config.posterior_variance)
    alpha_n = float(stats.normalize_alpha(alpha))
    n_steps, dim = schedule.n_steps, config.data_dim

    out = np.empty((count, dim))
    for lo in range(0, count, chunk):
        hi = min(lo + chunk, count)
        noise = np.stack([
            rng.substream(seed, rng.PURPOSE_SAMPLE, i).standard_normal((n_steps, dim))
            for i in range(lo, hi)
        ])
        z = noise[:, 0, :].copy()
        for n in range(n_steps, 0, -1):
            eps = cfg_predict(params, z, n, alpha_n, w)
            coef = schedule.betas[n - 1] / np.sqrt(1.0 - schedule.alpha_bar[n - 1])
            z = (z - coef * eps) / np.sqrt(schedule.alphas[n - 1])
            if n > 1:
                z += np.sqrt(post_var[n - 1]) * noise[:, n_steps - n + 1, :]
        out[lo:hi] = stats.denormalize(z)
    return out


def save_checkpoint(path, params: DenoiserParams, stats: NormalizationStats,
                    meta: dict | None = None) -> None:
    """Write a versioned archive of weights, stats and configuration."""
    path = Path(path)
    blocks = {
        "version": np.int64(CHECKPOINT_VERSION),
        "config_json": np.bytes_(json.dumps(asdict(params.config)).encode()),
        "meta_json": np.bytes_(json.dumps(meta or {}).encode()),
        "cond_weight": params.cond_weight,
        "cond_bias": params.cond_bias,
        "null_token": params.null_token,
        "stats_mean": stats.mean,
        "stats_std": stats.std,
        "alpha_range": np.array([stats.alpha_lo, stats.alpha_hi]),
    }
    for i, (wgt, bia) in enumerate(zip(params.weights, params.biases)):
        blocks[f"weight_{i}"] = wgt
        blocks[f"bias_{i}"] = bia
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **blocks)
    tmp.replace(path)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, stats, meta)."""
    path = Path(path)
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(
                f"checkpoint {path} has version {version}, expected {CHECKPOINT_VERSION}")
        config = DiffusionConfig(**json.loads(bytes(data["config_json"]).decode()))
        meta = json.loads(bytes(data["meta_json"]).decode())
        n_layers = config.hidden_layers + 1
        params = DenoiserParams(
            config=config,
            cond_weight=data["cond_weight"].copy(),
            cond_bias=data["cond_bias"].copy(),
            null_token=data["null_token"].copy(),
            weights=[data[f"weight_{i}"].copy() for i in range(n_layers)],
            biases=[data[f"bias_{i}"].copy() for i in range(n_layers)],
        )
        lo, hi = data["alpha_range"]
        stats = NormalizationStats(
            mean=data["stats_mean"].copy(), std=data["stats_std"].copy(),
            alpha_lo=float(lo), alpha_hi=float(hi))
    return params, stats, meta
