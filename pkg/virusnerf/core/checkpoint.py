"""Versioned binary checkpoint container for the full training state."""
import json
import struct
from pathlib import Path

import numpy as np

from virusnerf.core.field import RadianceField
from virusnerf.core.utils import CheckpointFormatError
from virusnerf.models.encoding import HashGridConfig
from virusnerf.models.grid import DensityGrid, DensityProjectionParams, OccupancyGrid
from virusnerf.models.network import Activation, MlpParams, OptimState

MAGIC = b"VNRF"
FORMAT_VERSION = 1

# <magic 4s><version H><sections I>, then per section
# <name length H><name><dtype length B><dtype><ndim B><shape Q*ndim><raw little-endian data>
HEADER = struct.Struct("<4sHI")


def write_container(path, sections: dict) -> Path:
    """Write name -> array sections in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [HEADER.pack(MAGIC, FORMAT_VERSION, len(sections))]
    for name, array in sections.items():
        array = np.asarray(array)
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        encoded_name = name.encode()
        dtype = array.dtype.str.encode()
        chunks.append(struct.pack("<H", len(encoded_name)) + encoded_name)
        chunks.append(struct.pack("<B", len(dtype)) + dtype)
        chunks.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def read_container(path) -> dict:
    """Read every section; refuses foreign files and other format versions."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise CheckpointFormatError(f"{path}: file too short")
    magic, version, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint container")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}"
        )

    offset = HEADER.size
    sections = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode()
            offset += name_len
            (dtype_len,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dtype = np.dtype(data[offset : offset + dtype_len].decode())
            offset += dtype_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, offset)
            offset += 8 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(data):
                raise CheckpointFormatError(f"{path}: truncated section '{name}'")
            flat = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
            sections[name] = flat.reshape(shape).copy()
            offset += nbytes
    except (struct.error, UnicodeDecodeError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt container ({e})") from e
    return sections


def _json_section(payload: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(payload, sort_keys=True).encode(), dtype=np.uint8)


def save_checkpoint(path, state, config_hash: str) -> Path:
    """
    Persist a TrainState: field, optimizer moments, grid, rng, step and config hash.
    """
    field = state.field
    grid = state.grid
    optim = state.optim

    meta = {
        "step": state.step,
        "config_hash": config_hash,
        "hash_grid": {
            "levels": field.config.levels,
            "table_size": field.config.table_size,
            "features": field.config.features,
            "min_resolution": field.config.min_resolution,
            "max_resolution": field.config.max_resolution,
        },
        "activations": {
            "density": [a.value for a in field.density_mlp.activations],
            "color": [a.value for a in field.color_mlp.activations],
        },
        "projection": {
            "zeta": state.projection.zeta,
            "sigma_t_max": state.projection.sigma_t_max,
            "sigma_t": state.projection.sigma_t,
        },
        "optim": {
            "lr": optim.lr,
            "beta1": optim.beta1,
            "beta2": optim.beta2,
            "epsilon": optim.epsilon,
            "step": optim.step,
            "rejected_steps": optim.rejected_steps,
        },
        "rng": state.rng.bit_generator.state,
    }
    if isinstance(grid, OccupancyGrid):
        meta["grid"] = {
            "variant": grid.variant.value,
            "resolution": grid.resolution,
            "threshold": grid.threshold,
            "nerf_updates": grid.nerf_updates,
            "depth_updates": grid.depth_updates,
            "anomalies": grid.anomalies,
        }
        grid_values = grid.probabilities
    else:
        meta["grid"] = {
            "variant": grid.variant.value,
            "resolution": grid.resolution,
            "decay": grid.decay,
            "density_threshold": grid.density_threshold,
            "warmup_steps": grid.warmup_steps,
            "nerf_updates": grid.nerf_updates,
        }
        grid_values = grid.densities

    sections = {"meta": _json_section(meta)}
    sections.update(field.parameters())
    for name in sorted(optim.first_moments):
        sections[f"optim.m.{name}"] = optim.first_moments[name]
        sections[f"optim.v.{name}"] = optim.second_moments[name]
    sections["grid.values"] = grid_values
    sections["consumed"] = (
        state.consumed.astype(np.uint8) if state.consumed is not None else np.zeros(0, np.uint8)
    )
    return write_container(path, sections)


def _mlp(sections: dict, prefix: str, activations: list) -> MlpParams:
    weights, biases = [], []
    i = 0
    while f"{prefix}w{i}" in sections:
        weights.append(sections[f"{prefix}w{i}"])
        biases.append(sections[f"{prefix}b{i}"])
        i += 1
    if not weights or len(activations) != len(weights):
        raise CheckpointFormatError(f"checkpoint holds no consistent '{prefix}' network")
    widths = tuple([weights[0].shape[0]] + [w.shape[1] for w in weights])
    return MlpParams(
        widths=widths,
        weights=weights,
        biases=biases,
        activations=tuple(Activation(a) for a in activations),
    )


def load_checkpoint(path):
    """
    Rebuild the TrainState saved by save_checkpoint.

    Returns:
        (state, meta dict)
    """
    from virusnerf.core.train import TrainState

    sections = read_container(path)
    if "meta" not in sections:
        raise CheckpointFormatError(f"{path}: missing meta section")
    meta = json.loads(sections["meta"].tobytes().decode())

    field = RadianceField(
        config=HashGridConfig(**meta["hash_grid"]),
        tables=sections["tables"],
        density_mlp=_mlp(sections, "density.", meta["activations"]["density"]),
        color_mlp=_mlp(sections, "color.", meta["activations"]["color"]),
    )

    o = meta["optim"]
    optim = OptimState(
        lr=o["lr"],
        beta1=o["beta1"],
        beta2=o["beta2"],
        epsilon=o["epsilon"],
        step=o["step"],
        rejected_steps=o["rejected_steps"],
    )
    for name, array in sections.items():
        if name.startswith("optim.m."):
            optim.first_moments[name[len("optim.m.") :]] = array
        elif name.startswith("optim.v."):
            optim.second_moments[name[len("optim.v.") :]] = array

    g = meta["grid"]
    if g["variant"] == OccupancyGrid.variant.value:
        grid = OccupancyGrid(
            resolution=g["resolution"],
            threshold=g["threshold"],
            probabilities=sections["grid.values"],
            nerf_updates=g["nerf_updates"],
            depth_updates=g["depth_updates"],
            anomalies=g["anomalies"],
        )
    else:
        grid = DensityGrid(
            resolution=g["resolution"],
            densities=sections["grid.values"],
            decay=g["decay"],
            density_threshold=g["density_threshold"],
            warmup_steps=g["warmup_steps"],
            nerf_updates=g["nerf_updates"],
        )

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]

    state = TrainState(
        field=field,
        grid=grid,
        optim=optim,
        projection=DensityProjectionParams(**meta["projection"]),
        rng=rng,
        step=meta["step"],
        consumed=sections["consumed"].astype(bool),
    )
    return state, meta
