"""Multi-resolution hash-grid feature fields.

Each level stores a table of learnable feature vectors; a query point is
trilinearly interpolated from the eight enclosing cell corners of every
level and the per-level results are concatenated. When a level's dense
corner grid fits in the table the lookup is an identity index, otherwise
a spatial hash (xor of coordinate-prime products masked to the
power-of-two table size).
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import InvalidParameterError


def _kernels():
    if backend.active_backend() == "numba":
        from . import _hashenc_nb as k
    else:
        from . import _hashenc_np as k
    return k


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    table_size: int = 2 ** 18
    features_per_entry: int = 8
    coarsest_resolution: int = 16
    finest_resolution: int = 2048

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidParameterError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise InvalidParameterError("table_size must be a power of two")
        if self.coarsest_resolution < 1:
            raise InvalidParameterError("coarsest_resolution must be >= 1")
        if self.finest_resolution < self.coarsest_resolution:
            raise InvalidParameterError(
                "finest_resolution must be >= coarsest_resolution")

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_entry

    def level_resolutions(self) -> np.ndarray:
        if self.levels == 1:
            return np.array([self.coarsest_resolution], dtype=np.int64)
        b = np.exp(
            (np.log(self.finest_resolution) - np.log(self.coarsest_resolution))
            / (self.levels - 1)
        )
        res = np.floor(
            self.coarsest_resolution * b ** np.arange(self.levels)
        ).astype(np.int64)
        return np.maximum(res, 1)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels, "table_size": self.table_size,
            "features_per_entry": self.features_per_entry,
            "coarsest_resolution": self.coarsest_resolution,
            "finest_resolution": self.finest_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        return cls(**{k: int(v) for k, v in d.items()})


class HashGrid:
    """One feature field: per-level tables of shape (table_size, F)."""

    def __init__(self, config: HashGridConfig, tables: np.ndarray = None):
        self.config = config
        shape = (config.levels, config.table_size, config.features_per_entry)
        if tables is None:
            tables = np.zeros(shape)
        tables = np.ascontiguousarray(tables, dtype=np.float64)
        if tables.shape != shape:
            raise InvalidParameterError(
                f"tables must have shape {shape}, got {tables.shape}")
        self.tables = tables
        self._res = config.level_resolutions()
        self._dense = (
            (self._res + 1) ** 3 <= config.table_size
        ).astype(np.bool_)

    @classmethod
    def random_init(cls, config: HashGridConfig, rng: np.random.Generator,
                    scale: float = 1e-4) -> "HashGrid":
        shape = (config.levels, config.table_size, config.features_per_entry)
        return cls(config, rng.uniform(-scale, scale, shape))

    def zero_gradient(self) -> np.ndarray:
        return np.zeros_like(self.tables)


def hash_encode(grid: HashGrid, positions: np.ndarray) -> np.ndarray:
    """Encode (P, 3) positions in the unit cube to (P, levels*F).

    Positions outside [0, 1]^3 are clamped.
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise InvalidParameterError("positions must be (P, 3)")
    out = np.zeros((len(positions), grid.config.output_dim))
    _kernels().encode_forward(
        grid.tables, grid._res, grid._dense, positions, out)
    return out


def hash_encode_backward(grid: HashGrid, positions: np.ndarray,
                         upstream: np.ndarray):
    """Gradients w.r.t. table entries and input positions.

    Recomputes the interpolation (it is cheap and deterministic) rather
    than caching forward state. Returns (d_tables, d_positions).
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (len(positions), grid.config.output_dim):
        raise InvalidParameterError(
            "upstream gradient shape does not match encoder output")
    d_tables = grid.zero_gradient()
    d_pos = np.zeros_like(positions)
    _kernels().encode_backward(
        grid.tables, grid._res, grid._dense, positions, upstream,
        d_tables, d_pos)
    return d_tables, d_pos
