"""DiffRec: corrupt interaction vectors with Gaussian noise, learn to denoise.

The forward chain q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)
has the closed-form marginal x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps,
which is what training and inference sample. The denoiser predicts the
clean vector, and the reverse step plugs that prediction into the posterior
mean; no noise is ever sampled at inference so ranking is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError, TrainingError
from . import nncore
from .baselines import RecommenderModel
from .nncore import Mlp, named_stream


@dataclass
class NoiseSchedule:
    """Linear beta schedule scaled by s, with cumulative alpha products.

    alpha_bar has length T + 1 with alpha_bar[0] = 1, so index t is the
    marginal signal level after t corruption steps.
    """

    T: int
    s: float
    beta: np.ndarray  # (T,), beta[t - 1] is the step-t noise variance
    alpha: np.ndarray  # (T,)
    alpha_bar: np.ndarray  # (T + 1,)


def build_schedule(T: int, s: float, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("need at least one diffusion step")
    if not 0.0 < beta_min <= beta_max:
        raise ConfigError("need 0 < beta_min <= beta_max")
    if not 0.0 < s * beta_max < 1.0:
        raise ConfigError("need 0 < s * beta_max < 1")
    steps = np.arange(T, dtype=float)
    beta = s * (beta_min + steps / max(T - 1, 1) * (beta_max - beta_min))
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(T=T, s=s, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


@dataclass
class Denoiser:
    """MLP mapping (x_t, timestep embedding) to the predicted clean vector."""

    mlp: Mlp
    d_t: int

    @property
    def data_dim(self) -> int:
        return self.mlp.out_dim

    def predict(self, x_t: np.ndarray, t: np.ndarray):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        t = np.broadcast_to(np.atleast_1d(t), (x_t.shape[0],))
        inp = np.hstack([x_t, timestep_embedding(t, self.d_t)])
        return nncore.mlp_forward(self.mlp, inp)


def build_denoiser(data_dim: int, hidden_dims, d_t: int, rng: np.random.Generator) -> Denoiser:
    dims = [data_dim + d_t, *hidden_dims, data_dim]
    acts = ["tanh"] * len(hidden_dims) + ["identity"]
    return Denoiser(mlp=nncore.build_mlp(dims, acts, rng), d_t=d_t)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t may be a scalar or one integer per batch row; t = 0 returns x0.
    """
    x0 = np.asarray(x0, dtype=float)
    t_arr = np.asarray(t, dtype=int)
    if np.any(t_arr < 0) or np.any(t_arr > sched.T):
        raise ConfigError(f"timestep out of range [0, {sched.T}]")
    abar = sched.alpha_bar[t_arr]
    if x0.ndim == 2 and abar.ndim == 1 and abar.size == x0.shape[0]:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=float)


def diffusion_loss(
    X0: np.ndarray,
    sched: NoiseSchedule,
    denoiser: Denoiser,
    rng: np.random.Generator | None = None,
    frozen: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Reconstruction objective: mean over the batch of |x_hat0 - x0|^2.

    Each row draws t uniform on {1..T} and Gaussian noise, forms x_t, and
    the denoiser predicts the clean row back. Unweighted across timesteps.
    Returns (loss, denoiser gradients). frozen = (t, eps) pins the draws.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if X0.shape[0] == 0:
        raise ConfigError("empty batch")
    B = X0.shape[0]
    if frozen is not None:
        t, eps = frozen
    else:
        t = rng.integers(1, sched.T + 1, size=B)
        eps = rng.standard_normal(X0.shape)
    x_t = q_sample(X0, t, eps, sched)
    pred, cache = denoiser.predict(x_t, t)
    pred = np.atleast_2d(pred)
    resid = pred - X0
    loss = float((resid * resid).sum() / B)
    if not np.isfinite(loss):
        raise TrainingError("diffusion loss is non-finite")
    grads = nncore.mlp_backward(denoiser.mlp, cache, 2.0 * resid / B)
    return loss, nncore.grads_as_list(grads)


def reverse_denoise(
    x: np.ndarray, sched: NoiseSchedule, denoiser: Denoiser, t_prime: int
) -> np.ndarray:
    """Deterministic reverse pass from a t_prime-step corruption of x.

    The history is corrupted without sampled noise (eps = 0), then each
    step replaces x_t with the posterior mean built from the predicted
    clean vector; the final prediction is returned as the score vector.
    """
    if not 0 <= t_prime <= sched.T:
        raise ConfigError(f"inference steps {t_prime} outside [0, {sched.T}]")
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if t_prime == 0:
        pred, _ = denoiser.predict(X, np.zeros(X.shape[0]))
        pred = np.atleast_2d(pred)
        return pred[0] if single else pred
    x_t = np.sqrt(sched.alpha_bar[t_prime]) * X
    pred = None
    for t in range(t_prime, 0, -1):
        pred, _ = denoiser.predict(x_t, np.full(X.shape[0], t))
        pred = np.atleast_2d(pred)
        if t > 1:
            abar_t = sched.alpha_bar[t]
            abar_prev = sched.alpha_bar[t - 1]
            c_pred = np.sqrt(abar_prev) * sched.beta[t - 1] / (1.0 - abar_t)
            c_xt = np.sqrt(sched.alpha[t - 1]) * (1.0 - abar_prev) / (1.0 - abar_t)
            x_t = c_pred * pred + c_xt * x_t
    return pred[0] if single else pred


@dataclass
class DiffRecParams:
    T: int = 5
    s: float = 0.1
    beta_min: float = 1e-4
    beta_max: float = 0.02
    t_prime: int = 0
    hidden_dims: tuple[int, ...] = (300,)
    d_t: int = 10
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 400

    def validate(self):
        if not 0 <= self.t_prime <= self.T:
            raise ConfigError("t_prime must lie in [0, T]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class DiffRecModel(RecommenderModel):
    schedule: NoiseSchedule
    denoiser: Denoiser
    t_prime: int
    hyper: DiffRecParams
    seed: int
    loss_curve: list[float] = field(default_factory=list)

    name = "diffrec"

    def score_batch(self, X, user_indices):
        return np.atleast_2d(reverse_denoise(X, self.schedule, self.denoiser, self.t_prime))

    def to_dict(self):
        return {
            "model": self.name,
            "T": self.schedule.T,
            "s": self.schedule.s,
            "beta_min": self.hyper.beta_min,
            "beta_max": self.hyper.beta_max,
            "t_prime": self.t_prime,
            "d_t": self.denoiser.d_t,
            "hidden_dims": list(self.hyper.hidden_dims),
            "lr": self.hyper.lr,
            "epochs": self.hyper.epochs,
            "batch_size": self.hyper.batch_size,
            "seed": self.seed,
            "mlp": nncore.mlp_to_dict(self.denoiser.mlp),
            "loss_curve": self.loss_curve,
        }

    @classmethod
    def from_dict(cls, d):
        hyper = DiffRecParams(
            T=int(d["T"]),
            s=float(d["s"]),
            beta_min=float(d["beta_min"]),
            beta_max=float(d["beta_max"]),
            t_prime=int(d["t_prime"]),
            hidden_dims=tuple(d["hidden_dims"]),
            d_t=int(d["d_t"]),
            lr=float(d["lr"]),
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
        )
        sched = build_schedule(hyper.T, hyper.s, hyper.beta_min, hyper.beta_max)
        denoiser = Denoiser(mlp=nncore.mlp_from_dict(d["mlp"]), d_t=hyper.d_t)
        return cls(
            schedule=sched,
            denoiser=denoiser,
            t_prime=hyper.t_prime,
            hyper=hyper,
            seed=int(d["seed"]),
            loss_curve=list(d.get("loss_curve", [])),
        )


def fit_diffrec(train: sparse.csr_matrix, params: DiffRecParams, seed: int = 0) -> DiffRecModel:
    """Adam-train the denoiser on the users' binary interaction rows."""
    params.validate()
    sched = build_schedule(params.T, params.s, params.beta_min, params.beta_max)
    init = named_stream(seed, "diffrec", "init")
    denoiser = build_denoiser(train.shape[1], params.hidden_dims, params.d_t, init)
    plist = nncore.mlp_params(denoiser.mlp)
    state = nncore.init_adam(plist, params.lr)
    curve = []
    for epoch in range(params.epochs):
        rng = named_stream(seed, "diffrec", "epoch", epoch)
        order = rng.permutation(train.shape[0])
        losses = []
        for start in range(0, len(order), params.batch_size):
            rows = order[start : start + params.batch_size]
            X0 = np.asarray(train[rows].todense(), dtype=float)
            loss, grads = diffusion_loss(X0, sched, denoiser, rng=rng)
            nncore.adam_update(plist, grads, state)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return DiffRecModel(
        schedule=sched,
        denoiser=denoiser,
        t_prime=params.t_prime,
        hyper=params,
        seed=seed,
        loss_curve=curve,
    )
