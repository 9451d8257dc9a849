"""Non-diffusion recommenders behind one scoring contract.

ItemkNN and EASE are closed-form item-item models; BPRMF is pairwise
ranking SGD; MultiVAE is the multinomial variational autoencoder. All of
them consume a binary user-item CSR train matrix and score a user from
that user's training interaction vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import sparse

from .errors import ConfigError, TrainingError, ValidationError
from . import nncore
from .nncore import Mlp, named_stream


class RecommenderModel:
    """Scoring contract: a trained model maps a user's train vector to item scores."""

    name = "base"

    def score_user(self, x_u: np.ndarray, user_index: int) -> np.ndarray:
        return self.score_batch(np.asarray(x_u, dtype=float)[None, :], np.array([user_index]))[0]

    def score_batch(self, X: np.ndarray, user_indices: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class PopularityModel(RecommenderModel):
    """Scores every user with the item train-popularity vector."""

    counts: np.ndarray

    name = "popularity"

    def score_batch(self, X, user_indices):
        return np.tile(self.counts.astype(float), (X.shape[0], 1))

    def to_dict(self):
        return {"model": self.name, "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(counts=np.asarray(d["counts"], dtype=float))


def fit_popularity(train: sparse.csr_matrix) -> PopularityModel:
    return PopularityModel(counts=np.asarray(train.sum(axis=0)).ravel())


@dataclass
class ItemKnnModel(RecommenderModel):
    """Cosine item-item similarities truncated to the top n neighbors per item."""

    similarity: sparse.csr_matrix  # row i holds sim(i, j) for i's kept neighbors
    n_neighbors: int

    name = "itemknn"

    def score_batch(self, X, user_indices):
        # score(i) = sum_j sim(i, j) * x_u[j]
        X = np.asarray(X, dtype=float)
        return np.asarray((self.similarity @ X.T).T)

    def to_dict(self):
        s = self.similarity.tocsr()
        return {
            "model": self.name,
            "n_neighbors": self.n_neighbors,
            "shape": list(s.shape),
            "data": nncore._encode_array(s.data),
            "indices": s.indices.tolist(),
            "indptr": s.indptr.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        data = nncore._decode_array(d["data"], (-1,))
        sim = sparse.csr_matrix(
            (data, np.array(d["indices"]), np.array(d["indptr"])), shape=tuple(d["shape"])
        )
        return cls(similarity=sim, n_neighbors=int(d["n_neighbors"]))


def fit_itemknn(train: sparse.csr_matrix, n_neighbors: int) -> ItemKnnModel:
    """Cosine similarity on binary columns, truncated per row.

    sim(i, j) = |U_i & U_j| / (sqrt(|U_i|) * sqrt(|U_j|)); rows keep the
    n highest similarities, ties broken by ascending item index. Items
    without train interactions get an all-zero row.
    """
    if n_neighbors < 1:
        raise ConfigError("neighbor count must be >= 1")
    X = train.astype(float).tocsr()
    cooc = (X.T @ X).tocsr()
    item_counts = np.asarray(X.sum(axis=0)).ravel()
    norm = np.sqrt(item_counts)
    n_items = X.shape[1]
    rows, cols, vals = [], [], []
    for i in range(n_items):
        lo, hi = cooc.indptr[i], cooc.indptr[i + 1]
        js = cooc.indices[lo:hi]
        cs = cooc.data[lo:hi]
        keep = js != i
        js, cs = js[keep], cs[keep]
        if js.size == 0:
            continue
        sims = cs / (norm[i] * norm[js])
        order = np.lexsort((js, -sims))[:n_neighbors]
        rows.extend([i] * len(order))
        cols.extend(js[order].tolist())
        vals.extend(sims[order].tolist())
    sim = sparse.csr_matrix((vals, (rows, cols)), shape=(n_items, n_items))
    return ItemKnnModel(similarity=sim, n_neighbors=n_neighbors)


@dataclass
class EaseModel(RecommenderModel):
    """Closed-form item-item weights with an exactly zero diagonal."""

    B: np.ndarray
    lam: float

    name = "ease"

    def score_batch(self, X, user_indices):
        return X @ self.B

    def to_dict(self):
        return {"model": self.name, "lam": self.lam, "shape": list(self.B.shape)}


def fit_ease(train: sparse.csr_matrix, lam: float) -> EaseModel:
    """Solve the ridge-regularized item-item regression in closed form.

    G = X'X + lam * I, P = G^-1, B = I - P * diag(1 / diag(P)), then the
    diagonal is forced to zero.
    """
    if lam <= 0:
        raise ConfigError("EASE regularization must be positive")
    G = np.asarray((train.T @ train).todense(), dtype=float)
    np.fill_diagonal(G, G.diagonal() + lam)
    try:
        P = scipy.linalg.solve(G, np.eye(G.shape[0]), assume_a="pos")
    except np.linalg.LinAlgError as exc:  # pragma: no cover - lam > 0 keeps G SPD
        raise TrainingError(f"EASE solve failed: {exc}") from exc
    B = np.eye(G.shape[0]) - P / np.diag(P)[None, :]
    np.fill_diagonal(B, 0.0)
    return EaseModel(B=B, lam=float(lam))


@dataclass
class BprMfModel(RecommenderModel):
    """Matrix factorization with item biases trained on pairwise ranking."""

    P: np.ndarray  # (n_users, d)
    Q: np.ndarray  # (n_items, d)
    item_bias: np.ndarray  # (n_items,)

    name = "bprmf"

    def score_batch(self, X, user_indices):
        return self.P[np.asarray(user_indices, dtype=int)] @ self.Q.T + self.item_bias

    def to_dict(self):
        return {
            "model": self.name,
            "d": self.Q.shape[1],
            "P": nncore._encode_array(self.P),
            "Q": nncore._encode_array(self.Q),
            "item_bias": nncore._encode_array(self.item_bias),
            "shape": [self.P.shape[0], self.Q.shape[0]],
        }

    @classmethod
    def from_dict(cls, d):
        n_users, n_items = d["shape"]
        k = int(d["d"])
        return cls(
            P=nncore._decode_array(d["P"], (n_users, k)),
            Q=nncore._decode_array(d["Q"], (n_items, k)),
            item_bias=nncore._decode_array(d["item_bias"], (n_items,)),
        )


def bpr_triple_loss(P, Q, item_bias, u, i, j, reg):
    """Loss and analytic gradients for one (user, positive, negative) triple.

    loss = -ln sigmoid(x_ui - x_uj) + reg * (|p_u|^2 + |q_i|^2 + |q_j|^2)
    with x_ui = p_u . q_i + b_i.
    """
    p, qi, qj = P[u], Q[i], Q[j]
    d = p @ qi + item_bias[i] - p @ qj - item_bias[j]
    loss = np.log1p(np.exp(-np.abs(d))) + max(-d, 0.0)  # stable -ln(sigmoid(d))
    loss += reg * (p @ p + qi @ qi + qj @ qj)
    g = -1.0 / (1.0 + np.exp(d))  # d(-ln sigmoid(d)) / dd
    grad_p = g * (qi - qj) + 2.0 * reg * p
    grad_qi = g * p + 2.0 * reg * qi
    grad_qj = -g * p + 2.0 * reg * qj
    return float(loss), (grad_p, grad_qi, grad_qj, g, -g)


def fit_bprmf(
    train: sparse.csr_matrix,
    n_factors: int = 64,
    lr: float = 0.05,
    reg: float = 1e-4,
    epochs: int = 10,
    seed: int = 0,
    batch_size: int = 4096,
) -> BprMfModel:
    """Pairwise ranking SGD with uniform negative resampling each epoch."""
    if n_factors < 1 or epochs < 1:
        raise ConfigError("need n_factors >= 1 and epochs >= 1")
    if train.nnz == 0:
        raise ValidationError("cannot fit BPRMF on an empty train set")
    n_users, n_items = train.shape
    coo = train.tocoo()
    pos_u = coo.row.astype(np.int64)
    pos_i = coo.col.astype(np.int64)
    train_keys = np.sort(pos_u * n_items + pos_i)
    # users holding the whole catalog have no negatives to sample
    user_counts = np.asarray((train != 0).sum(axis=1)).ravel()
    usable = user_counts[pos_u] < n_items
    pos_u, pos_i = pos_u[usable], pos_i[usable]

    init = named_stream(seed, "bprmf", "init")
    P = init.normal(0.0, 0.1, size=(n_users, n_factors))
    Q = init.normal(0.0, 0.1, size=(n_items, n_factors))
    b = np.zeros(n_items)

    for epoch in range(epochs):
        rng = named_stream(seed, "bprmf", "epoch", epoch)
        order = rng.permutation(len(pos_u))
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            u, i = pos_u[sel], pos_i[sel]
            j = rng.integers(0, n_items, size=len(sel))
            bad = np.isin(u * n_items + j, train_keys, assume_unique=False)
            while bad.any():
                j[bad] = rng.integers(0, n_items, size=int(bad.sum()))
                bad = np.isin(u * n_items + j, train_keys)
            d = np.einsum("ij,ij->i", P[u], Q[i] - Q[j]) + b[i] - b[j]
            g = -1.0 / (1.0 + np.exp(d))
            gp = g[:, None] * (Q[i] - Q[j]) + 2.0 * reg * P[u]
            gi = g[:, None] * P[u] + 2.0 * reg * Q[i]
            gj = -g[:, None] * P[u] + 2.0 * reg * Q[j]
            np.add.at(P, u, -lr * gp)
            np.add.at(Q, i, -lr * gi)
            np.add.at(Q, j, -lr * gj)
            np.add.at(b, i, -lr * g)
            np.add.at(b, j, lr * g)
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(Q)) and np.all(np.isfinite(b))):
        raise TrainingError("BPRMF diverged to non-finite parameters")
    return BprMfModel(P=P, Q=Q, item_bias=b)


@dataclass
class MultiVaeModel(RecommenderModel):
    """Multinomial VAE over interaction vectors; scores are mean-latent logits."""

    encoder: Mlp
    decoder: Mlp
    d_z: int
    dropout: float
    beta_max: float

    name = "multivae"

    def score_batch(self, X, user_indices):
        xn = _l2_normalize_rows(np.asarray(X, dtype=float))
        h, _ = nncore.mlp_forward(self.encoder, xn)
        mu = np.atleast_2d(h)[:, : self.d_z]
        logits, _ = nncore.mlp_forward(self.decoder, mu)
        return np.atleast_2d(logits)

    def params(self) -> list[np.ndarray]:
        return nncore.mlp_params(self.encoder) + nncore.mlp_params(self.decoder)

    def to_dict(self):
        return {
            "model": self.name,
            "d_z": self.d_z,
            "dropout": self.dropout,
            "beta_max": self.beta_max,
            "encoder": nncore.mlp_to_dict(self.encoder),
            "decoder": nncore.mlp_to_dict(self.decoder),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoder=nncore.mlp_from_dict(d["encoder"]),
            decoder=nncore.mlp_from_dict(d["decoder"]),
            d_z=int(d["d_z"]),
            dropout=float(d["dropout"]),
            beta_max=float(d["beta_max"]),
        )


def _l2_normalize_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return X / norms


def multivae_loss(
    model: MultiVaeModel,
    X: np.ndarray,
    beta: float,
    rng: np.random.Generator | None = None,
    frozen: dict | None = None,
):
    """Multinomial reconstruction + beta-weighted KL, with analytic gradients.

    The input is the L2-normalized row with inverted dropout; the raw
    binary row stays the multinomial target. Pass frozen={"eps": ...,
    "keep": ...} to pin the stochastic draws (gradient checking).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B = X.shape[0]
    d_z = model.d_z
    if frozen is not None:
        eps = frozen["eps"]
        keep = frozen["keep"]
    else:
        eps = rng.standard_normal((B, d_z))
        keep = (rng.random(X.shape) >= model.dropout).astype(float)
    scale = 1.0 / (1.0 - model.dropout) if model.dropout > 0 else 1.0
    x_in = _l2_normalize_rows(X) * keep * scale

    h, enc_cache = nncore.mlp_forward(model.encoder, x_in)
    h = np.atleast_2d(h)
    mu, logvar = h[:, :d_z], h[:, d_z:]
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps

    logits, dec_cache = nncore.mlp_forward(model.decoder, z)
    logits = np.atleast_2d(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + logits.max(axis=1, keepdims=True)
    log_softmax = logits - lse
    recon = -(X * log_softmax).sum() / B
    kl = -0.5 * (1.0 + logvar - mu**2 - np.exp(logvar)).sum() / B
    loss = recon + beta * kl
    if not np.isfinite(loss):
        raise TrainingError("MultiVAE loss is non-finite")

    softmax = np.exp(log_softmax)
    d_logits = (softmax * X.sum(axis=1, keepdims=True) - X) / B
    dec_grads = nncore.mlp_backward(model.decoder, dec_cache, d_logits)
    d_z_grad = np.atleast_2d(dec_grads.d_input)
    d_mu = d_z_grad + beta * mu / B
    d_logvar = d_z_grad * eps * 0.5 * sigma + beta * 0.5 * (np.exp(logvar) - 1.0) / B
    enc_grads = nncore.mlp_backward(model.encoder, enc_cache, np.hstack([d_mu, d_logvar]))
    grads = nncore.grads_as_list(enc_grads) + nncore.grads_as_list(dec_grads)
    return float(loss), grads


def fit_multivae(
    train: sparse.csr_matrix,
    d_z: int = 64,
    hidden_dims: tuple[int, ...] = (300,),
    dropout: float = 0.5,
    beta_max: float = 0.2,
    anneal_steps: int = 500,
    lr: float = 1e-3,
    epochs: int = 30,
    seed: int = 0,
    batch_size: int = 500,
) -> tuple[MultiVaeModel, list[float]]:
    """Adam-train the VAE; returns the model and the per-epoch mean loss."""
    n_items = train.shape[1]
    init = named_stream(seed, "multivae", "init")
    enc_dims = [n_items, *hidden_dims, 2 * d_z]
    dec_dims = [d_z, *reversed(hidden_dims), n_items]
    encoder = nncore.build_mlp(enc_dims, ["tanh"] * len(hidden_dims) + ["identity"], init)
    decoder = nncore.build_mlp(dec_dims, ["tanh"] * len(hidden_dims) + ["identity"], init)
    model = MultiVaeModel(encoder, decoder, d_z, dropout, beta_max)
    params = model.params()
    state = nncore.init_adam(params, lr)
    step = 0
    curve = []
    for epoch in range(epochs):
        rng = named_stream(seed, "multivae", "epoch", epoch)
        order = rng.permutation(train.shape[0])
        losses = []
        for start in range(0, len(order), batch_size):
            rows = order[start : start + batch_size]
            X = np.asarray(train[rows].todense(), dtype=float)
            beta = beta_max * min(1.0, step / anneal_steps) if anneal_steps > 0 else beta_max
            loss, grads = multivae_loss(model, X, beta, rng=rng)
            nncore.adam_update(params, grads, state)
            losses.append(loss)
            step += 1
        curve.append(float(np.mean(losses)))
    return model, curve
