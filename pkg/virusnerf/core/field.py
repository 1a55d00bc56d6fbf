"""Radiance field: hash features -> density MLP -> color MLP."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from virusnerf.core.diffnet import mlp_backward, mlp_forward, mlp_init
from virusnerf.core.hashenc import accumulate_table_grads, encode, encode_backward, init_tables
from virusnerf.core.utils import InvalidArgumentError, require_unit_vectors
from virusnerf.models.encoding import EncodeRecord, HashGridConfig
from virusnerf.models.network import GradientTape, MlpParams

DENSITY_CLAMP = 15.0
GEOMETRY_WIDTH = 16  # raw density + 15 geometry features
HIDDEN_WIDTH = 64
SH_WIDTH = 9

# Real spherical-harmonics constants, degrees 0..2
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)


def encode_directions(directions: np.ndarray) -> np.ndarray:
    """Unit directions (B, 3) -> 9 real spherical-harmonics coefficients."""
    require_unit_vectors(directions)
    d = np.asarray(directions)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    return np.stack(
        [
            np.full_like(x, _SH_C0),
            -_SH_C1 * y,
            _SH_C1 * z,
            -_SH_C1 * x,
            _SH_C2[0] * x * y,
            -_SH_C2[0] * y * z,
            _SH_C2[1] * (2.0 * z * z - x * x - y * y),
            -_SH_C2[0] * x * z,
            _SH_C2[2] * (x * x - y * y),
        ],
        axis=1,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FieldTape:
    """Cached intermediates of one density or radiance query."""

    encode_record: EncodeRecord
    density_tape: GradientTape
    raw_density: np.ndarray
    sigma: np.ndarray
    color_tape: Optional[GradientTape] = None
    rgb: Optional[np.ndarray] = None


@dataclass
class FieldGrads:
    """Gradients of every trainable array of a RadianceField."""

    tables: np.ndarray
    density: MlpParams
    color: MlpParams

    def as_dict(self) -> dict:
        grads = {"tables": self.tables}
        grads.update(self.density.named_arrays("density."))
        grads.update(self.color.named_arrays("color."))
        return grads


@dataclass
class RadianceField:
    """Hash tables plus the density and color MLPs."""

    config: HashGridConfig
    tables: np.ndarray
    density_mlp: MlpParams
    color_mlp: MlpParams
    frozen: set = field(default_factory=set)

    @property
    def dtype(self) -> np.dtype:
        return self.tables.dtype

    def parameters(self) -> dict:
        """Name -> array references used by the optimizer."""
        params = {"tables": self.tables}
        params.update(self.density_mlp.named_arrays("density."))
        params.update(self.color_mlp.named_arrays("color."))
        return params

    def density(self, positions: np.ndarray) -> tuple[np.ndarray, FieldTape]:
        return query_density(self, positions)

    def radiance(
        self, positions: np.ndarray, directions: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, FieldTape]:
        return query_radiance(self, positions, directions)

    def backward(
        self,
        tape: FieldTape,
        dsigma: Optional[np.ndarray] = None,
        drgb: Optional[np.ndarray] = None,
    ) -> FieldGrads:
        return field_backward(self, tape, dsigma, drgb)

    def __repr__(self):
        return f"<RadianceField L={self.config.levels} T={self.config.table_size} {self.dtype}>"


def create_field(
    config: Optional[HashGridConfig] = None, seed: int = 0, dtype=np.float32
) -> RadianceField:
    """Freshly initialized field; every random stream derives from `seed`."""
    config = config or HashGridConfig()
    seeds = np.random.SeedSequence(seed).generate_state(3)
    return RadianceField(
        config=config,
        tables=init_tables(config, int(seeds[0]), dtype=dtype),
        density_mlp=mlp_init([config.output_width, HIDDEN_WIDTH, GEOMETRY_WIDTH], int(seeds[1]), dtype),
        color_mlp=mlp_init(
            [GEOMETRY_WIDTH + SH_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, 3], int(seeds[2]), dtype
        ),
    )


def query_density(field: RadianceField, positions: np.ndarray) -> tuple[np.ndarray, FieldTape]:
    """
    Density sigma = exp(clamp(raw, -15, 15)) at unit-cube positions.

    Returns:
        (sigma (B,), tape)
    """
    features, record = encode(positions, field.config, field.tables)
    out, density_tape = mlp_forward(field.density_mlp, features)
    raw = out[:, 0]
    sigma = np.exp(np.clip(raw, -DENSITY_CLAMP, DENSITY_CLAMP))
    return sigma, FieldTape(
        encode_record=record, density_tape=density_tape, raw_density=raw, sigma=sigma
    )


def query_radiance(
    field: RadianceField, positions: np.ndarray, directions: np.ndarray
) -> tuple[np.ndarray, np.ndarray, FieldTape]:
    """
    Density and color; color = logistic(raw color head) in (0, 1).

    Returns:
        (sigma (B,), rgb (B, 3), tape)
    """
    directions = np.asarray(directions)
    if directions.shape != np.shape(positions):
        raise InvalidArgumentError(
            f"directions shape {directions.shape} != positions {np.shape(positions)}"
        )
    sh = encode_directions(directions).astype(field.dtype, copy=False)
    sigma, tape = query_density(field, positions)

    geometry = tape.density_tape.activations[-1]
    color_raw, color_tape = mlp_forward(field.color_mlp, np.concatenate([geometry, sh], axis=1))
    rgb = _sigmoid(color_raw)

    tape.color_tape = color_tape
    tape.rgb = rgb
    return sigma, rgb, tape


def field_backward(
    field: RadianceField,
    tape: FieldTape,
    dsigma: Optional[np.ndarray] = None,
    drgb: Optional[np.ndarray] = None,
) -> FieldGrads:
    """
    Gradients of a scalar loss given dL/dsigma (B,) and dL/drgb (B, 3).

    Frozen parts (names "color", "density", "tables" in field.frozen)
    receive zero gradients.
    """
    batch = tape.sigma.shape[0]
    dgeometry = np.zeros((batch, GEOMETRY_WIDTH), dtype=tape.density_tape.activations[-1].dtype)

    color_grads = field.color_mlp.zeros_like()
    if drgb is not None:
        if tape.color_tape is None:
            raise InvalidArgumentError("drgb given but the tape holds no color pass")
        drgb = np.asarray(drgb)
        if drgb.shape != tape.rgb.shape:
            raise InvalidArgumentError(f"drgb shape {drgb.shape} != {tape.rgb.shape}")
        dcolor_raw = drgb * tape.rgb * (1.0 - tape.rgb)
        color_grads, dcolor_in = mlp_backward(field.color_mlp, tape.color_tape, dcolor_raw)
        dgeometry = dgeometry + dcolor_in[:, :GEOMETRY_WIDTH]

    if dsigma is not None:
        dsigma = np.asarray(dsigma)
        if dsigma.shape != (batch,):
            raise InvalidArgumentError(f"dsigma shape {dsigma.shape} != ({batch},)")
        inside = np.abs(tape.raw_density) < DENSITY_CLAMP
        dgeometry[:, 0] += dsigma * tape.sigma * inside

    density_grads, dfeatures = mlp_backward(field.density_mlp, tape.density_tape, dgeometry)
    table_grads = np.zeros_like(field.tables)
    accumulate_table_grads(encode_backward(tape.encode_record, dfeatures), table_grads)

    if "color" in field.frozen:
        color_grads = field.color_mlp.zeros_like()
    if "density" in field.frozen:
        density_grads = field.density_mlp.zeros_like()
    if "tables" in field.frozen:
        table_grads[...] = 0

    return FieldGrads(tables=table_grads, density=density_grads, color=color_grads)
