"""The two small heads mapping blended features to surfel-attribute deltas.

The deform network consumes [blended feature, per-lifestage residual
embedding] and emits position/rotation/scale/opacity deltas plus a
hidden feature; the color network maps that hidden feature to SH
coefficient deltas. Output rows for the attribute deltas (and the whole
color output layer) start at zero so a fresh model deforms nothing.
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import InvalidParameterError


class MLP:
    """Plain fully-connected ReLU network; float64; explicit backward."""

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray]):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def create(cls, dims: List[int], rng: np.random.Generator) -> "MLP":
        ws, bs = [], []
        for din, dout in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / din)
            ws.append(rng.uniform(-bound, bound, (din, dout)))
            bs.append(np.zeros(dout))
        return cls(ws, bs)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: np.ndarray):
        """Returns (y, cache); hidden layers use ReLU, output is linear."""
        acts = [x]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0.0) if i < n - 1 else z)
        return acts[-1], acts

    def backward(self, cache, d_out: np.ndarray):
        """Returns (d_input, d_weights, d_biases)."""
        acts = cache
        n = len(self.weights)
        d_ws = [None] * n
        d_bs = [None] * n
        g = np.asarray(d_out, dtype=np.float64)
        for i in range(n - 1, -1, -1):
            a_in = acts[i]
            if i < n - 1:
                g = g * (acts[i + 1] > 0)
            d_ws[i] = a_in.T @ g
            d_bs[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return g, d_ws, d_bs

    def params(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


@dataclass
class DeformDeltas:
    """Per-surfel additive deltas in the unconstrained parameter domain."""

    centers: np.ndarray         # (P, 3)
    orientations: np.ndarray    # (P, 4)
    log_scales: np.ndarray      # (P, 2)
    opacity_logits: np.ndarray  # (P,)
    color_coeffs: np.ndarray    # (P, K, 3)

    @classmethod
    def zeros(cls, count: int, sh_coeffs: int) -> "DeformDeltas":
        return cls(
            np.zeros((count, 3)), np.zeros((count, 4)), np.zeros((count, 2)),
            np.zeros(count), np.zeros((count, sh_coeffs, 3)),
        )

    def scaled(self, f: float) -> "DeformDeltas":
        return DeformDeltas(
            self.centers * f, self.orientations * f, self.log_scales * f,
            self.opacity_logits * f, self.color_coeffs * f,
        )

    def flat_concat(self) -> np.ndarray:
        return np.concatenate([
            self.centers.ravel(), self.orientations.ravel(),
            self.log_scales.ravel(), self.opacity_logits.ravel(),
            self.color_coeffs.ravel(),
        ])

    @property
    def scalar_count(self) -> int:
        return (self.centers.size + self.orientations.size
                + self.log_scales.size + self.opacity_logits.size
                + self.color_coeffs.size)


ATTR_DIM = 3 + 4 + 2 + 1  # dx, dr, ds, dsigma


@dataclass
class DeformNetworks:
    deform_mlp: MLP
    color_mlp: MLP
    residual_embeddings: np.ndarray  # (num_lifestages, D_res)
    sh_coeffs_per_channel: int
    hidden_feature_dim: int = 32

    @classmethod
    def create(
        cls,
        feature_dim: int,
        num_lifestages: int,
        sh_coeffs_per_channel: int,
        rng: np.random.Generator,
        residual_dim: int = 16,
        hidden_feature_dim: int = 32,
        width: int = 64,
    ) -> "DeformNetworks":
        deform = MLP.create(
            [feature_dim + residual_dim, width, width,
             ATTR_DIM + hidden_feature_dim], rng)
        # attribute-delta columns start at zero so a fresh model emits
        # exactly zero deltas; the hidden-feature columns keep their
        # random init so gradients reach the color head immediately
        deform.weights[-1][:, :ATTR_DIM] = 0.0
        deform.biases[-1][:] = 0.0
        color = MLP.create(
            [hidden_feature_dim, width, 3 * sh_coeffs_per_channel], rng)
        color.weights[-1][:] = 0.0
        color.biases[-1][:] = 0.0
        emb = np.zeros((num_lifestages, residual_dim))
        return cls(deform, color, emb, sh_coeffs_per_channel,
                   hidden_feature_dim)

    @property
    def num_lifestages(self) -> int:
        return len(self.residual_embeddings)

    @property
    def residual_dim(self) -> int:
        return self.residual_embeddings.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.deform_mlp.in_dim - self.residual_dim


def deform_forward(networks: DeformNetworks, blended: np.ndarray,
                   lifestage=None, embedding: np.ndarray = None):
    """Map blended features (P, F) to attribute deltas.

    Exactly one of ``lifestage`` (an index into the residual embeddings)
    or ``embedding`` (an explicit residual vector, used when blending
    lifestages) must be given. Returns (DeformDeltas, cache).
    """
    blended = np.ascontiguousarray(blended, dtype=np.float64)
    if blended.ndim != 2 or blended.shape[1] != networks.feature_dim:
        raise InvalidParameterError(
            f"blended features must be (P, {networks.feature_dim})")
    if (lifestage is None) == (embedding is None):
        raise InvalidParameterError("pass exactly one of lifestage/embedding")
    if lifestage is not None:
        if not 0 <= int(lifestage) < networks.num_lifestages:
            raise InvalidParameterError(
                f"lifestage {lifestage} out of range "
                f"[0, {networks.num_lifestages})")
        embedding = networks.residual_embeddings[int(lifestage)]
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != (networks.residual_dim,):
        raise InvalidParameterError("residual embedding has the wrong size")

    P = len(blended)
    x = np.concatenate(
        [blended, np.broadcast_to(embedding, (P, networks.residual_dim))],
        axis=1)
    y, dcache = networks.deform_mlp.forward(x)
    attr, hidden = y[:, :ATTR_DIM], y[:, ATTR_DIM:]
    dc, ccache = networks.color_mlp.forward(hidden)
    k = networks.sh_coeffs_per_channel
    deltas = DeformDeltas(
        centers=attr[:, 0:3],
        orientations=attr[:, 3:7],
        log_scales=attr[:, 7:9],
        opacity_logits=attr[:, 9],
        color_coeffs=dc.reshape(P, k, 3),
    )
    cache = {"dcache": dcache, "ccache": ccache, "P": P, "k": k}
    return deltas, cache


def deform_backward(networks: DeformNetworks, cache, d_deltas: DeformDeltas):
    """Gradients of deform_forward.

    Returns (d_blended, d_embedding, d_deform_params, d_color_params)
    where the param grads are (d_weights, d_biases) lists.
    """
    P, k = cache["P"], cache["k"]
    if d_deltas.centers.shape != (P, 3):
        raise InvalidParameterError("delta gradients do not match the cache")
    d_color_out = d_deltas.color_coeffs.reshape(P, 3 * k)
    d_hidden, d_cws, d_cbs = networks.color_mlp.backward(
        cache["ccache"], d_color_out)
    d_y = np.concatenate([
        d_deltas.centers, d_deltas.orientations, d_deltas.log_scales,
        d_deltas.opacity_logits[:, None], d_hidden,
    ], axis=1)
    d_x, d_dws, d_dbs = networks.deform_mlp.backward(cache["dcache"], d_y)
    f = networks.feature_dim
    d_blended = d_x[:, :f]
    d_embedding = d_x[:, f:].sum(axis=0)
    return d_blended, d_embedding, (d_dws, d_dbs), (d_cws, d_cbs)


def encoder_forward(grid, networks: DeformNetworks, positions: np.ndarray,
                    lifestage: int):
    """Single-field encoder: hash-encode unit-cube positions and decode
    them to attribute deltas. Returns (DeformDeltas, cache)."""
    from .encoding import hash_encode

    feats = hash_encode(grid, positions)
    deltas, net_cache = deform_forward(networks, feats, lifestage=lifestage)
    cache = {"grid": grid, "positions": np.asarray(positions,
                                                   dtype=np.float64),
             "net_cache": net_cache, "networks": networks}
    return deltas, cache


def encoder_backward(cache, d_deltas: DeformDeltas):
    """Gradients of encoder_forward for table entries, network parameters,
    residual embeddings, and input positions.

    Returns a dict with keys 'tables', 'deform_params', 'color_params',
    'embedding', 'positions'.
    """
    from .encoding import hash_encode_backward
    from .errors import ContractViolationError

    if not isinstance(cache, dict) or "net_cache" not in cache:
        raise ContractViolationError("not an encoder_forward cache")
    networks: DeformNetworks = cache["networks"]
    if d_deltas.centers.shape[0] != cache["net_cache"]["P"]:
        raise ContractViolationError(
            "delta gradients do not match the encoder cache")
    d_blended, d_emb, d_deform, d_color = deform_backward(
        networks, cache["net_cache"], d_deltas)
    d_tables, d_pos = hash_encode_backward(
        cache["grid"], cache["positions"], d_blended)
    return {"tables": d_tables, "deform_params": d_deform,
            "color_params": d_color, "embedding": d_emb,
            "positions": d_pos}
