"""Test the multiresolution hash encoding."""
import numpy as np
import pytest

from virusnerf.core.hashenc import cell_index, encode, encode_backward, init_tables
from virusnerf.core.utils import InvalidArgumentError
from virusnerf.models.encoding import HashGridConfig


def test_dense_index():
    """Test dense levels use the row-major vertex index."""
    assert cell_index(np.array([1, 2, 3]), 4, 2**10) == 86
    assert cell_index(np.array([0, 0, 0]), 4, 2**10) == 0


def test_hashed_index_in_range():
    """Test hashed levels always land inside the table."""
    rng = np.random.default_rng(0)
    cells = rng.integers(0, 201, size=(10**6, 3))
    rows = cell_index(cells, 200, 2**15)
    assert rows.min() >= 0
    assert rows.max() < 2**15


def test_resolutions_span_range():
    config = HashGridConfig()
    assert config.resolutions[0] == 16
    assert config.resolutions[-1] == 256
    assert config.output_width == 16


def test_config_rejects_non_power_of_two():
    with pytest.raises(InvalidArgumentError):
        HashGridConfig(table_size=1000)


def test_encode_at_vertex_returns_row(tiny_hash_config):
    """Test a position on a vertex returns exactly that row's features."""
    tables = init_tables(tiny_hash_config, seed=1, dtype=np.float64)
    position = np.array([[0.25, 0.5, 0.75]])
    features, _ = encode(position, tiny_hash_config, tables)
    row = cell_index(np.array([1, 2, 3]), 4, tiny_hash_config.table_size)
    np.testing.assert_allclose(features[0, :2], tables[0, row])


def test_encode_edge_midpoint_averages(tiny_hash_config):
    """Test the midpoint of an x-edge averages its two vertices."""
    tables = init_tables(tiny_hash_config, seed=2, dtype=np.float64)
    features, _ = encode(np.array([[0.125, 0.25, 0.5]]), tiny_hash_config, tables)
    a = cell_index(np.array([0, 1, 2]), 4, tiny_hash_config.table_size)
    b = cell_index(np.array([1, 1, 2]), 4, tiny_hash_config.table_size)
    np.testing.assert_allclose(features[0, :2], 0.5 * (tables[0, a] + tables[0, b]))


def test_encode_zero_tables(tiny_hash_config):
    tables = np.zeros(tiny_hash_config.table_shape())
    features, _ = encode(np.random.default_rng(0).random((10, 3)), tiny_hash_config, tables)
    np.testing.assert_array_equal(features, 0.0)


def test_encode_rejects_outside_cube(tiny_hash_config):
    tables = init_tables(tiny_hash_config, seed=0)
    with pytest.raises(InvalidArgumentError):
        encode(np.array([[1.5, 0.2, 0.2]]), tiny_hash_config, tables)


def test_backward_at_vertex_touches_one_row(tiny_hash_config):
    """Test a vertex position sends its whole gradient to a single row per level."""
    tables = init_tables(tiny_hash_config, seed=1, dtype=np.float64)
    _, record = encode(np.array([[0.25, 0.5, 0.75]]), tiny_hash_config, tables)
    grads = encode_backward(record, np.ones((1, tiny_hash_config.output_width)))
    assert len(grads) == tiny_hash_config.levels
    for grad in grads:
        assert grad.rows.shape == (1,)
        np.testing.assert_allclose(grad.values, [[1.0, 1.0]])


def test_backward_zero_gradient_is_empty(tiny_hash_config):
    tables = init_tables(tiny_hash_config, seed=1)
    _, record = encode(np.array([[0.3, 0.3, 0.3]]), tiny_hash_config, tables)
    assert encode_backward(record, np.zeros((1, tiny_hash_config.output_width))) == []


def test_backward_matches_finite_differences(tiny_hash_config):
    """Test table gradients against central differences of a linear readout."""
    rng = np.random.default_rng(5)
    tables = init_tables(tiny_hash_config, seed=3, dtype=np.float64)
    positions = rng.random((7, 3))
    cotangent = rng.normal(size=(7, tiny_hash_config.output_width))

    _, record = encode(positions, tiny_hash_config, tables)
    dense = np.zeros_like(tables)
    for grad in encode_backward(record, cotangent):
        dense[grad.level][grad.rows] += grad.values

    h = 1e-6
    touched = np.argwhere(dense != 0)
    for level, row, feat in touched[rng.choice(len(touched), size=8, replace=False)]:
        saved = tables[level, row, feat]
        tables[level, row, feat] = saved + h
        up = np.sum(encode(positions, tiny_hash_config, tables)[0] * cotangent)
        tables[level, row, feat] = saved - h
        down = np.sum(encode(positions, tiny_hash_config, tables)[0] * cotangent)
        tables[level, row, feat] = saved
        assert dense[level, row, feat] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)
