"""Multiresolution hash encoding of unit-cube positions."""
import numpy as np

from virusnerf.core.utils import InvalidArgumentError, require_unit_cube
from virusnerf.models.encoding import EncodeRecord, HashGridConfig, SparseTableGrad

# Spatial-hash primes per axis
PRIMES = (1, 2654435761, 805459861)

# Corner offsets of a cell, x fastest
CORNERS = np.array(
    [[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64
)

TABLE_INIT_RANGE = 1e-4


def init_tables(config: HashGridConfig, seed: int, dtype=np.float32) -> np.ndarray:
    """Tables of shape (L, T, F), uniform in [-1e-4, 1e-4]."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-TABLE_INIT_RANGE, TABLE_INIT_RANGE, size=config.table_shape()).astype(dtype)


def cell_index(cells: np.ndarray, level_resolution: int, table_size: int) -> np.ndarray:
    """
    Row index of integer vertex coordinates.

    Dense levels, where every vertex fits into the table, use the injective
    row-major index x + y (N+1) + z (N+1)^2; finer levels XOR the
    coordinate-prime products and mask to the table size.

    Args:
        cells: Integer array (..., 3) with coordinates in [0, level_resolution]
        level_resolution: Cells per axis N of the level
        table_size: Rows T of the table (power of two)

    Returns:
        Integer array (...) of row indices in [0, table_size)
    """
    cells = np.asarray(cells, dtype=np.int64)
    side = level_resolution + 1
    if side**3 <= table_size:
        return cells[..., 0] + side * cells[..., 1] + side * side * cells[..., 2]

    u = cells.astype(np.uint64)
    hashed = (
        (u[..., 0] * np.uint64(PRIMES[0]))
        ^ (u[..., 1] * np.uint64(PRIMES[1]))
        ^ (u[..., 2] * np.uint64(PRIMES[2]))
    )
    return (hashed & np.uint64(table_size - 1)).astype(np.int64)


def encode(
    positions: np.ndarray, config: HashGridConfig, tables: np.ndarray
) -> tuple[np.ndarray, EncodeRecord]:
    """
    Encode positions (B, 3) in the unit cube into (B, L*F) features.

    Per level the 8 surrounding vertex rows are trilinearly interpolated;
    levels are concatenated coarse to fine.
    """
    require_unit_cube(positions)
    if tables.shape != config.table_shape():
        raise InvalidArgumentError(f"tables shape {tables.shape} != {config.table_shape()}")

    positions = np.asarray(positions)
    features, indices, weights = [], [], []
    for level, resolution in enumerate(config.resolutions):
        scaled = positions * resolution
        base = np.minimum(np.floor(scaled).astype(np.int64), resolution - 1)
        frac = scaled - base

        corners = base[:, None, :] + CORNERS[None, :, :]
        rows = cell_index(corners, resolution, config.table_size)

        w = np.where(CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        w = np.prod(w, axis=2)

        features.append(np.einsum("bc,bcf->bf", w, tables[level][rows]))
        indices.append(rows)
        weights.append(w)

    record = EncodeRecord(indices=indices, weights=weights, features=config.features)
    return np.concatenate(features, axis=1), record


def encode_backward(record: EncodeRecord, dfeatures: np.ndarray) -> list:
    """
    Scatter dL/dfeatures back into the touched table rows.

    Returns:
        One SparseTableGrad per level with at least one non-zero row;
        contributions of repeated rows are summed.
    """
    dfeatures = np.asarray(dfeatures)
    levels = len(record.indices)
    expected = (record.batch_size, levels * record.features)
    if dfeatures.shape != expected:
        raise InvalidArgumentError(f"dfeatures shape {dfeatures.shape} != {expected}")

    grads = []
    f = record.features
    for level in range(levels):
        g = dfeatures[:, level * f : (level + 1) * f]
        if not np.any(g):
            continue
        contrib = record.weights[level][:, :, None] * g[:, None, :]
        rows, inverse = np.unique(record.indices[level].ravel(), return_inverse=True)
        values = np.zeros((rows.shape[0], f), dtype=contrib.dtype)
        np.add.at(values, inverse, contrib.reshape(-1, f))
        keep = np.any(values != 0, axis=1)
        if np.any(keep):
            grads.append(SparseTableGrad(level=level, rows=rows[keep], values=values[keep]))
    return grads


def accumulate_table_grads(sparse: list, out: np.ndarray) -> np.ndarray:
    """Add sparse level gradients into a dense (L, T, F) accumulator."""
    for grad in sparse:
        out[grad.level][grad.rows] += grad.values.astype(out.dtype, copy=False)
    return out
