"""L-DiffRec: diffusion in a compressed latent space.

Items are clustered on pretrained collaborative embeddings, each user's
interaction vector splits into per-cluster sub-vectors, a small VAE
compresses every sub-vector, and the diffusion forward/reverse processes
run on the concatenated latents. Decoding maps the denoised latent back
to a full item score vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError, TrainingError, ValidationError
from . import nncore
from .baselines import RecommenderModel, fit_bprmf
from .diffusion import NoiseSchedule, Denoiser, build_schedule, build_denoiser, q_sample, reverse_denoise
from .nncore import Mlp, named_stream


def pretrain_item_embeddings(
    train: sparse.csr_matrix,
    d: int = 64,
    seed: int = 0,
    epochs: int = 10,
    lr: float = 0.05,
    reg: float = 1e-4,
) -> np.ndarray:
    """Item factors from a BPRMF fit, used only as clustering features."""
    model = fit_bprmf(train, n_factors=d, lr=lr, reg=reg, epochs=epochs, seed=seed)
    return model.Q


@dataclass
class ClusterPartition:
    """Assignment of every item to exactly one of C nonempty clusters."""

    n_clusters: int
    assignment: np.ndarray  # (n_items,) cluster id per item
    members: list[np.ndarray]  # per cluster, item indices in ascending order

    @property
    def n_items(self) -> int:
        return len(self.assignment)

    def sizes(self) -> list[int]:
        return [len(m) for m in self.members]

    def to_dict(self):
        return {"n_clusters": self.n_clusters, "assignment": self.assignment.tolist()}

    @classmethod
    def from_dict(cls, d):
        return partition_from_assignment(np.asarray(d["assignment"], dtype=int), int(d["n_clusters"]))


def partition_from_assignment(assignment: np.ndarray, n_clusters: int) -> ClusterPartition:
    members = [np.where(assignment == c)[0] for c in range(n_clusters)]
    if any(len(m) == 0 for m in members):
        raise ValidationError("cluster partition has an empty cluster")
    return ClusterPartition(n_clusters, assignment, members)


def kmeans_cluster(
    embeddings: np.ndarray, C: int, seed: int = 0, return_history: bool = False
):
    """Deterministic k-means with greedy farthest-point seeding.

    Runs at most 100 Lloyd iterations or until the centroids move less
    than 1e-6. Empty clusters are repaired by moving in the point that is
    farthest from its own centroid.
    """
    emb = np.asarray(embeddings, dtype=float)
    n = emb.shape[0]
    if not 1 <= C <= n:
        raise ConfigError(f"cluster count {C} must lie in [1, {n}]")
    rng = named_stream(seed, "kmeans", "seeding")
    first = int(rng.integers(n))
    chosen = [first]
    dist2 = ((emb - emb[first]) ** 2).sum(axis=1)
    for _ in range(1, C):
        nxt = int(np.argmax(dist2))
        chosen.append(nxt)
        dist2 = np.minimum(dist2, ((emb - emb[nxt]) ** 2).sum(axis=1))
    centroids = emb[chosen].copy()

    history = []
    assignment = np.zeros(n, dtype=int)
    for _ in range(100):
        d2 = ((emb[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignment = np.argmin(d2, axis=1)
        counts = np.bincount(assignment, minlength=C)
        for c in range(C):
            if counts[c] == 0:
                own = d2[np.arange(n), assignment]
                movable = counts[assignment] >= 2
                own = np.where(movable, own, -np.inf)
                point = int(np.argmax(own))
                counts[assignment[point]] -= 1
                assignment[point] = c
                counts[c] += 1
        new_centroids = np.stack(
            [emb[assignment == c].mean(axis=0) for c in range(C)]
        )
        wcss = float(((emb - new_centroids[assignment]) ** 2).sum())
        history.append(wcss)
        move = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if move < 1e-6:
            break
    part = partition_from_assignment(assignment, C)
    if return_history:
        return part, history
    return part


def split_by_cluster(x: np.ndarray, partition: ClusterPartition) -> list[np.ndarray]:
    """Route vector entries to their cluster, ascending item order within each."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != partition.n_items:
        raise ValidationError(
            f"vector has {x.shape[-1]} entries, partition covers {partition.n_items} items"
        )
    return [x[..., idx] for idx in partition.members]


def merge_clusters(subs: list[np.ndarray], partition: ClusterPartition) -> np.ndarray:
    """Exact inverse of split_by_cluster."""
    if len(subs) != partition.n_clusters:
        raise ValidationError("wrong number of sub-vectors for this partition")
    subs = [np.asarray(s, dtype=float) for s in subs]
    for s, idx in zip(subs, partition.members):
        if s.shape[-1] != len(idx):
            raise ValidationError("sub-vector length does not match its cluster size")
    lead = subs[0].shape[:-1]
    out = np.zeros(lead + (partition.n_items,))
    for s, idx in zip(subs, partition.members):
        out[..., idx] = s
    return out


@dataclass
class LdiffrecParams:
    C: int = 5
    rho: float = 0.1
    T: int = 5
    s: float = 0.1
    beta_min: float = 1e-4
    beta_max: float = 0.02
    t_prime: int = 0
    hidden_dims: tuple[int, ...] = (300,)
    d_t: int = 10
    gamma: float = 1.0
    beta_kl: float = 0.1
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 400
    embed_dim: int = 64
    embed_epochs: int = 10

    def validate(self):
        if self.C < 1:
            raise ConfigError("need at least one cluster")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("compression ratio must lie in (0, 1]")
        if not 0 <= self.t_prime <= self.T:
            raise ConfigError("t_prime must lie in [0, T]")
        if self.gamma < 0.0 or self.beta_kl < 0.0:
            raise ConfigError("loss weights must be non-negative")


def latent_dims_for(partition: ClusterPartition, rho: float) -> list[int]:
    return [max(1, int(round(rho * len(m)))) for m in partition.members]


@dataclass
class LDiffRecModel(RecommenderModel):
    partition: ClusterPartition
    encoders: list[Mlp]
    decoders: list[Mlp]
    latent_dims: list[int]
    schedule: NoiseSchedule
    denoiser: Denoiser
    t_prime: int
    hyper: LdiffrecParams
    seed: int
    loss_curve: list[float] = field(default_factory=list)

    name = "ldiffrec"

    @property
    def latent_dim(self) -> int:
        return sum(self.latent_dims)

    def _latent_slices(self):
        offsets = np.cumsum([0] + self.latent_dims)
        return [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]

    def encode_means(self, X: np.ndarray) -> np.ndarray:
        subs = split_by_cluster(np.atleast_2d(np.asarray(X, dtype=float)), self.partition)
        parts = []
        for enc, sub, d_c in zip(self.encoders, subs, self.latent_dims):
            h, _ = nncore.mlp_forward(enc, sub)
            parts.append(np.atleast_2d(h)[:, :d_c])
        return np.hstack(parts)

    def decode(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        outs = []
        for dec, sl in zip(self.decoders, self._latent_slices()):
            out, _ = nncore.mlp_forward(dec, Z[:, sl])
            outs.append(np.atleast_2d(out))
        return merge_clusters(outs, self.partition)

    def score_batch(self, X, user_indices):
        z = self.encode_means(X)
        denoised = reverse_denoise(z, self.schedule, self.denoiser, self.t_prime)
        return self.decode(denoised)

    def params(self) -> list[np.ndarray]:
        out = []
        for enc in self.encoders:
            out.extend(nncore.mlp_params(enc))
        for dec in self.decoders:
            out.extend(nncore.mlp_params(dec))
        out.extend(nncore.mlp_params(self.denoiser.mlp))
        return out

    def to_dict(self):
        return {
            "model": self.name,
            "partition": self.partition.to_dict(),
            "latent_dims": list(self.latent_dims),
            "encoders": [nncore.mlp_to_dict(e) for e in self.encoders],
            "decoders": [nncore.mlp_to_dict(d) for d in self.decoders],
            "denoiser": nncore.mlp_to_dict(self.denoiser.mlp),
            "d_t": self.denoiser.d_t,
            "t_prime": self.t_prime,
            "seed": self.seed,
            "loss_curve": self.loss_curve,
            "hyper": {
                "C": self.hyper.C,
                "rho": self.hyper.rho,
                "T": self.hyper.T,
                "s": self.hyper.s,
                "beta_min": self.hyper.beta_min,
                "beta_max": self.hyper.beta_max,
                "t_prime": self.hyper.t_prime,
                "hidden_dims": list(self.hyper.hidden_dims),
                "d_t": self.hyper.d_t,
                "gamma": self.hyper.gamma,
                "beta_kl": self.hyper.beta_kl,
                "lr": self.hyper.lr,
                "epochs": self.hyper.epochs,
                "batch_size": self.hyper.batch_size,
                "embed_dim": self.hyper.embed_dim,
                "embed_epochs": self.hyper.embed_epochs,
            },
        }

    @classmethod
    def from_dict(cls, d):
        h = dict(d["hyper"])
        h["hidden_dims"] = tuple(h["hidden_dims"])
        hyper = LdiffrecParams(**h)
        sched = build_schedule(hyper.T, hyper.s, hyper.beta_min, hyper.beta_max)
        return cls(
            partition=ClusterPartition.from_dict(d["partition"]),
            encoders=[nncore.mlp_from_dict(e) for e in d["encoders"]],
            decoders=[nncore.mlp_from_dict(x) for x in d["decoders"]],
            latent_dims=[int(v) for v in d["latent_dims"]],
            schedule=sched,
            denoiser=Denoiser(mlp=nncore.mlp_from_dict(d["denoiser"]), d_t=int(d["d_t"])),
            t_prime=int(d["t_prime"]),
            hyper=hyper,
            seed=int(d["seed"]),
            loss_curve=list(d.get("loss_curve", [])),
        )


def joint_loss(
    model: LDiffRecModel,
    X: np.ndarray,
    rng: np.random.Generator | None = None,
    frozen: dict | None = None,
):
    """L-DiffRec training objective with exact gradients for all parts.

    total = L_diff + gamma * (L_recon + beta_kl * KL) where L_diff is the
    latent reconstruction MSE, L_recon the multinomial log-likelihood of
    the decoded denoised latent against the raw binary rows, and KL the
    Gaussian prior term of the per-cluster encoders.

    frozen may pin {"t", "eps_diff", "eps_reparam"}; eps_reparam = 0 makes
    the encoding deterministic at the means.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = X.shape[0]
    D = model.latent_dim
    sched = model.schedule
    gamma, beta_kl = model.hyper.gamma, model.hyper.beta_kl
    if frozen is not None:
        t = frozen["t"]
        eps_diff = frozen["eps_diff"]
        eps_rep = frozen["eps_reparam"]
    else:
        t = rng.integers(1, sched.T + 1, size=B)
        eps_diff = rng.standard_normal((B, D))
        eps_rep = rng.standard_normal((B, D))

    subs = split_by_cluster(X, model.partition)
    slices = model._latent_slices()
    enc_caches = []
    mu = np.empty((B, D))
    logvar = np.empty((B, D))
    for enc, sub, d_c, sl in zip(model.encoders, subs, model.latent_dims, slices):
        h, cache = nncore.mlp_forward(enc, sub)
        h = np.atleast_2d(h)
        mu[:, sl] = h[:, :d_c]
        logvar[:, sl] = h[:, d_c:]
        enc_caches.append(cache)
    sigma = np.exp(0.5 * logvar)
    z0 = mu + sigma * eps_rep

    x_t = q_sample(z0, t, eps_diff, sched)
    pred, den_cache = model.denoiser.predict(x_t, t)
    pred = np.atleast_2d(pred)
    resid = pred - z0
    l_diff = float((resid * resid).sum() / B)

    dec_caches = []
    logit_parts = []
    for dec, sl in zip(model.decoders, slices):
        out, cache = nncore.mlp_forward(dec, pred[:, sl])
        logit_parts.append(np.atleast_2d(out))
        dec_caches.append(cache)
    logits = merge_clusters(logit_parts, model.partition)
    mx = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - mx).sum(axis=1, keepdims=True)) + mx
    log_softmax = logits - lse
    l_recon = float(-(X * log_softmax).sum() / B)
    kl = float(-0.5 * (1.0 + logvar - mu**2 - np.exp(logvar)).sum() / B)
    loss = l_diff + gamma * (l_recon + beta_kl * kl)
    if not np.isfinite(loss):
        raise TrainingError("L-DiffRec joint loss is non-finite")

    # reconstruction path back through the decoders into the prediction
    softmax = np.exp(log_softmax)
    d_logits = gamma * (softmax * X.sum(axis=1, keepdims=True) - X) / B
    d_logit_parts = split_by_cluster(d_logits, model.partition)
    d_pred = 2.0 * resid / B
    dec_grads = []
    for dec, cache, d_out, sl in zip(model.decoders, dec_caches, d_logit_parts, slices):
        g = nncore.mlp_backward(dec, cache, d_out)
        dec_grads.extend(nncore.grads_as_list(g))
        d_pred[:, sl] += np.atleast_2d(g.d_input)

    # denoiser path; its input gradient flows to z0 through the corruption
    den_grads = nncore.mlp_backward(model.denoiser.mlp, den_cache, d_pred)
    d_xt = np.atleast_2d(den_grads.d_input)[:, :D]
    abar = sched.alpha_bar[np.asarray(t, dtype=int)][:, None]
    d_z0 = d_xt * np.sqrt(abar) - 2.0 * resid / B

    enc_grads = []
    for enc, cache, d_c, sl in zip(model.encoders, enc_caches, model.latent_dims, slices):
        d_mu = d_z0[:, sl] + gamma * beta_kl * mu[:, sl] / B
        d_lv = (
            d_z0[:, sl] * eps_rep[:, sl] * 0.5 * sigma[:, sl]
            + gamma * beta_kl * 0.5 * (np.exp(logvar[:, sl]) - 1.0) / B
        )
        g = nncore.mlp_backward(enc, cache, np.hstack([d_mu, d_lv]))
        enc_grads.extend(nncore.grads_as_list(g))

    grads = enc_grads + dec_grads + nncore.grads_as_list(den_grads)
    return loss, grads, {"l_diff": l_diff, "l_recon": l_recon, "kl": kl}


def fit_ldiffrec(
    train: sparse.csr_matrix, params: LdiffrecParams, seed: int = 0
) -> LDiffRecModel:
    """Cluster, compress, and jointly train latent diffusion with the VAEs."""
    params.validate()
    if params.C > train.shape[1]:
        raise ConfigError("more clusters than items")
    embeddings = pretrain_item_embeddings(
        train, d=params.embed_dim, seed=seed, epochs=params.embed_epochs
    )
    partition = kmeans_cluster(embeddings, params.C, seed=seed)
    dims = latent_dims_for(partition, params.rho)
    init = named_stream(seed, "ldiffrec", "init")
    encoders = [
        nncore.build_mlp([len(m), 2 * d_c], ["identity"], init)
        for m, d_c in zip(partition.members, dims)
    ]
    decoders = [
        nncore.build_mlp([d_c, len(m)], ["identity"], init)
        for m, d_c in zip(partition.members, dims)
    ]
    sched = build_schedule(params.T, params.s, params.beta_min, params.beta_max)
    denoiser = build_denoiser(sum(dims), params.hidden_dims, params.d_t, init)
    model = LDiffRecModel(
        partition=partition,
        encoders=encoders,
        decoders=decoders,
        latent_dims=dims,
        schedule=sched,
        denoiser=denoiser,
        t_prime=params.t_prime,
        hyper=params,
        seed=seed,
    )
    plist = model.params()
    state = nncore.init_adam(plist, params.lr)
    for epoch in range(params.epochs):
        rng = named_stream(seed, "ldiffrec", "epoch", epoch)
        order = rng.permutation(train.shape[0])
        losses = []
        for start in range(0, len(order), params.batch_size):
            rows = order[start : start + params.batch_size]
            X = np.asarray(train[rows].todense(), dtype=float)
            loss, grads, _ = joint_loss(model, X, rng=rng)
            nncore.adam_update(plist, grads, state)
            losses.append(loss)
        model.loss_curve.append(float(np.mean(losses)))
    return model
