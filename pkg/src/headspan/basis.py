"""Bank of hash-encoded head-basis fields with scheduled deactivation.

A lifestage's feature field is a weighted sum of the active bases (one
learnable weight row per lifestage). At schedule checkpoints, a basis
whose weight magnitude sits below the threshold for *every* lifestage is
deactivated: frozen and excluded from blending for the rest of the run.
The bank never empties; deactivation is monotone.
"""

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .encoding import HashGrid, HashGridConfig, hash_encode, hash_encode_backward
from .errors import ContractViolationError, InvalidParameterError
from .networks import DeformDeltas
from .surfels import SurfelSet


@dataclass
class PruneSchedule:
    threshold: float = 1e-4      # kappa
    start_iteration: int = 10000  # Q
    interval: int = 10000         # q

    def __post_init__(self):
        if self.threshold <= 0:
            raise InvalidParameterError("threshold must be > 0")
        if self.interval < 1:
            raise InvalidParameterError("interval must be >= 1")

    def is_checkpoint(self, iteration: int) -> bool:
        return (iteration >= self.start_iteration
                and (iteration - self.start_iteration) % self.interval == 0)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold,
                "start_iteration": self.start_iteration,
                "interval": self.interval}

    @classmethod
    def from_dict(cls, d: dict) -> "PruneSchedule":
        return cls(threshold=float(d["threshold"]),
                   start_iteration=int(d["start_iteration"]),
                   interval=int(d["interval"]))


class BasisBank:
    def __init__(self, bases: List[HashGrid], active_mask=None):
        if not bases:
            raise InvalidParameterError("bank needs at least one basis")
        self.bases = list(bases)
        if active_mask is None:
            active_mask = np.ones(len(bases), dtype=bool)
        self.active_mask = np.asarray(active_mask, dtype=bool).copy()
        if self.active_mask.shape != (len(bases),):
            raise InvalidParameterError("mask length must match basis count")
        if not self.active_mask.any():
            raise InvalidParameterError("at least one basis must be active")

    @classmethod
    def create(cls, n: int, config: HashGridConfig,
               rng: np.random.Generator) -> "BasisBank":
        return cls([HashGrid.random_init(config, rng) for _ in range(n)])

    @property
    def size(self) -> int:
        return len(self.bases)

    @property
    def active_count(self) -> int:
        return int(self.active_mask.sum())

    @property
    def config(self) -> HashGridConfig:
        return self.bases[0].config


class BlendWeights:
    """(num_lifestages, num_bases) learnable weight matrix."""

    def __init__(self, weights: np.ndarray):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise InvalidParameterError("weights must be (lifestages, bases)")
        if not np.all(np.isfinite(self.weights)):
            raise InvalidParameterError("weights must be finite")

    @classmethod
    def create(cls, num_lifestages: int, num_bases: int,
               rng: Optional[np.random.Generator] = None,
               jitter: float = 0.0) -> "BlendWeights":
        w = np.full((num_lifestages, num_bases), 1.0 / num_bases)
        if jitter > 0:
            if rng is None:
                raise InvalidParameterError("jittered init needs an rng")
            w = w + rng.uniform(-jitter, jitter, w.shape)
        return cls(w)

    @property
    def num_lifestages(self) -> int:
        return self.weights.shape[0]

    def row(self, lifestage: int) -> np.ndarray:
        return self.weights[lifestage]


def blend_features(bank: BasisBank, weights_row: np.ndarray,
                   positions: np.ndarray):
    """Sum of weight * encoding over active bases; inactive bases
    contribute nothing regardless of their weight.

    Returns (features (P, dim), cache for blend_backward).
    """
    weights_row = np.asarray(weights_row, dtype=np.float64)
    if weights_row.shape != (bank.size,):
        raise InvalidParameterError(
            f"weights row must have length {bank.size}")
    feats = np.zeros((len(positions), bank.config.output_dim))
    encodings = [None] * bank.size
    for i in range(bank.size):
        if not bank.active_mask[i]:
            continue
        enc = hash_encode(bank.bases[i], positions)
        encodings[i] = enc
        feats += weights_row[i] * enc
    cache = {"encodings": encodings, "weights_row": weights_row.copy(),
             "positions": np.asarray(positions, dtype=np.float64)}
    return feats, cache


def blend_backward(bank: BasisBank, cache, upstream: np.ndarray):
    """Gradients of blend_features.

    Returns (d_tables: {basis index -> table gradient}, d_weights_row,
    d_positions). Inactive bases get no entries and zero weight grads.
    """
    positions = cache["positions"]
    weights_row = cache["weights_row"]
    d_weights = np.zeros(bank.size)
    d_tables = {}
    d_pos = np.zeros_like(positions)
    for i in range(bank.size):
        enc = cache["encodings"][i]
        if enc is None:
            continue
        d_weights[i] = float(np.sum(enc * upstream))
        dt, dp = hash_encode_backward(
            bank.bases[i], positions, weights_row[i] * upstream)
        d_tables[i] = dt
        d_pos += dp
    return d_tables, d_weights, d_pos


@dataclass
class PruneEvent:
    iteration: int
    basis: int
    lifestage_weights: List[float]

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "basis": self.basis,
                "lifestage_weights": self.lifestage_weights}


class PruneLog:
    """Deactivation report; one entry per pruned basis."""

    def __init__(self, events: Optional[List[PruneEvent]] = None):
        self.events = list(events or [])

    def append(self, event: PruneEvent):
        self.events.append(event)

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.events], indent=2)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PruneLog":
        with open(path) as f:
            raw = json.load(f)
        return cls([PruneEvent(int(e["iteration"]), int(e["basis"]),
                               [float(w) for w in e["lifestage_weights"]])
                    for e in raw])


def prune_step(bank: BasisBank, weights: BlendWeights, iteration: int,
               schedule: PruneSchedule,
               log: Optional[PruneLog] = None) -> np.ndarray:
    """Apply the deactivation rule at schedule checkpoints.

    A basis is deactivated iff it is active and |weight| < threshold for
    every lifestage. The largest-max-weight basis survives when the rule
    would otherwise empty the bank. Returns the updated mask.
    """
    if weights.weights.shape[1] != bank.size:
        raise ContractViolationError("weight matrix does not match the bank")
    if not schedule.is_checkpoint(iteration):
        return bank.active_mask
    maxw = np.abs(weights.weights).max(axis=0)  # (N,)
    candidates = bank.active_mask & (maxw < schedule.threshold)
    if candidates.sum() == bank.active_count:
        # keep the strongest candidate alive (first index wins ties)
        keep = int(np.argmax(np.where(candidates, maxw, -np.inf)))
        candidates[keep] = False
    for i in np.nonzero(candidates)[0]:
        bank.active_mask[i] = False
        if log is not None:
            log.append(PruneEvent(
                iteration=int(iteration), basis=int(i),
                lifestage_weights=[float(w) for w in weights.weights[:, i]],
            ))
    return bank.active_mask


def compose_moment(surfels: SurfelSet, deltas: DeformDeltas):
    """Canonical surfels + additive deltas = moment-specific surfels.

    Additions happen in the unconstrained domain; the orientation sum is
    renormalized. Returns (SurfelSet, cache for compose_backward).
    """
    n = surfels.count
    if (deltas.centers.shape != (n, 3)
            or deltas.orientations.shape != (n, 4)
            or deltas.log_scales.shape != (n, 2)
            or deltas.opacity_logits.shape != (n,)
            or deltas.color_coeffs.shape != surfels.color_coeffs.shape):
        raise ContractViolationError("delta shapes do not match the set")
    if np.any(deltas.orientations):
        q_raw = surfels.orientations + deltas.orientations
        norms = np.linalg.norm(q_raw, axis=-1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ContractViolationError(
                "orientation + delta collapsed to zero")
        q_out = q_raw / norms
    else:
        # exact identity for zero deltas (stored orientations are unit, so
        # the normalization Jacobian used in the backward pass still holds)
        q_out = surfels.orientations.copy()
        norms = np.ones((surfels.count, 1))
    out = SurfelSet(
        surfels.centers + deltas.centers,
        q_out,
        surfels.log_scales + deltas.log_scales,
        surfels.opacity_logits + deltas.opacity_logits,
        surfels.color_coeffs + deltas.color_coeffs,
    )
    cache = {"q_unit": out.orientations, "norms": norms}
    return out, cache


def compose_backward(cache, d_moment):
    """Pull gradients on the moment-specific set back to (canonical set,
    deltas). Both receive the same values; the orientation path goes
    through the normalization Jacobian."""
    q_unit = cache["q_unit"]
    norms = cache["norms"]
    g = d_moment.orientations
    d_q = (g - q_unit * np.sum(g * q_unit, axis=-1, keepdims=True)) / norms
    from .rendering import GradientBuffer

    d_canon = GradientBuffer(
        centers=d_moment.centers.copy(),
        orientations=d_q,
        log_scales=d_moment.log_scales.copy(),
        opacity_logits=d_moment.opacity_logits.copy(),
        color_coeffs=d_moment.color_coeffs.copy(),
    )
    d_deltas = DeformDeltas(
        centers=d_moment.centers.copy(),
        orientations=d_q.copy(),
        log_scales=d_moment.log_scales.copy(),
        opacity_logits=d_moment.opacity_logits.copy(),
        color_coeffs=d_moment.color_coeffs.copy(),
    )
    return d_canon, d_deltas
