import math

import numpy as np
import pytest
import torch

from regdit.analysis import (
    export_map, layer_sweep, map_filename, norm_map, pca_map, read_csv_map, read_pgm, read_ppm)
from regdit.exceptions import DimensionError
from regdit.model import ModelConfig, RegisterConfig, RegisterDiT


def test_norm_map_values_and_layout():
    f = np.array([[3.0, 4.0], [0.0, 1.0], [1.0, 0.0], [6.0, 8.0], [0.0, 0.0], [2.0, 0.0]])
    m = norm_map(f, (2, 3), layer=1, t=0.5)
    assert m.grid.tolist() == [[5.0, 1.0, 1.0], [10.0, 0.0, 2.0]]
    with pytest.raises(DimensionError):
        norm_map(f, (4, 2))


def _oracle_projections(x, k):
    xc = x - x.mean(0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    return xc @ vt[:k].T, s ** 2 / len(x)


@pytest.mark.parametrize("seed", range(20))
def test_pca_matches_dense_oracle_up_to_sign(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(3, 17))
    n = 64
    x = rng.standard_normal((n, d)) * np.linspace(3.0, 0.5, d)
    m = pca_map(x, (8, 8))
    ref, var = _oracle_projections(x, 3)
    for k in range(3):
        a, b = m.projections[:, k], ref[:, k]
        sign = np.sign(a @ b)
        assert np.allclose(a, sign * b, atol=1e-9)
    assert np.allclose(m.explained, var[:3] / var.sum())
    assert m.grid.min() >= 0.0 and m.grid.max() <= 1.0


def test_pca_sign_and_scale_conventions():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 5)) * np.array([4.0, 2.0, 1.0, 0.5, 0.2])
    a = pca_map(x, (4, 4))
    b = pca_map(2.5 * x + 7.0, (4, 4))
    assert np.allclose(a.grid, b.grid)
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    c = pca_map(x @ q, (4, 4))
    # a rotation can only flip component signs, which min-max turns into 1 - grid
    for k in range(3):
        same = np.allclose(a.grid[..., k], c.grid[..., k], atol=1e-9)
        flipped = np.allclose(a.grid[..., k], 1 - c.grid[..., k], atol=1e-9)
        assert same or flipped


def test_pooled_pca_uses_batch_axes():
    rng = np.random.default_rng(5)
    batch = rng.standard_normal((4, 16, 6)) * np.linspace(3.0, 0.5, 6)
    pooled = batch.reshape(-1, 6)
    m = pca_map(batch[0], (4, 4), fit_on=batch)
    xc, vals = batch[0] - pooled.mean(0), np.linalg.eigvalsh(np.cov(pooled.T, bias=True))[::-1]
    _, _, vt = np.linalg.svd(pooled - pooled.mean(0), full_matrices=False)
    for k in range(3):
        a, b = m.projections[:, k], xc @ vt[k]
        assert np.allclose(a, np.sign(a @ b) * b, atol=1e-9)
    assert np.allclose(m.explained, vals[:3] / vals.sum())
    # fitting on the image alone is the default
    assert np.allclose(pca_map(batch[0], (4, 4), fit_on=batch[0]).grid, pca_map(batch[0], (4, 4)).grid)


def test_pca_degenerate_components_are_zero():
    x = np.zeros((9, 4))
    x[:, 0] = np.arange(9)
    m = pca_map(x, (3, 3))
    assert m.degenerate == [1, 2]
    assert np.all(m.grid[..., 1:] == 0)
    with pytest.raises(DimensionError):
        pca_map(np.zeros((2, 3)), (1, 2))


def test_csv_round_trip(tmp_path):
    grid = np.random.default_rng(0).standard_normal((4, 5))
    p = export_map(grid, str(tmp_path / "m.csv"))
    assert np.array_equal(read_csv_map(p), grid)


def test_pgm_round_trip(tmp_path):
    grid = np.random.default_rng(1).uniform(2.0, 9.0, (6, 7))
    p = export_map(grid, str(tmp_path / "m.pgm"))
    values, raw, (lo, hi) = read_pgm(p)
    assert raw.dtype == np.dtype(">u2") and raw.shape == (6, 7)
    assert lo == grid.min() and hi == grid.max()
    assert np.abs(values - grid).max() <= (hi - lo) / 65535 / 2 + 1e-12
    assert raw.min() == 0 and raw.max() == 65535
    with open(p, "rb") as fh:
        assert fh.read(2) == b"P5"


def test_constant_pgm(tmp_path):
    p = export_map(np.full((2, 2), 4.0), str(tmp_path / "c.pgm"))
    values, raw, _ = read_pgm(p)
    assert np.all(raw == 0) and np.all(values == 4.0)


def test_ppm_round_trip(tmp_path):
    grid = np.random.default_rng(2).uniform(0, 1, (4, 4, 3))
    p = export_map(grid, str(tmp_path / "m.ppm"))
    back = read_ppm(p)
    assert np.array_equal(back, np.rint(grid * 255).astype(np.uint8))
    with pytest.raises(DimensionError):
        export_map(np.zeros((4, 4)), str(tmp_path / "bad.ppm"))
    with pytest.raises(ValueError):
        export_map(grid, str(tmp_path / "m.png"))


def test_map_filenames():
    assert map_filename("denoiser", 3, 0.5, "pgm") == "denoiser_3_0.5.pgm"
    assert map_filename("encoder", 0, math.nan, "csv") == "encoder_0_na.csv"


def test_layer_sweep_denoiser_grid():
    cfg = ModelConfig(depth=4, width=16, heads=2, token_count=16, token_dim=4,
                      registers=RegisterConfig(5, 1), freq_dim=8)
    model = RegisterDiT(cfg)
    z0 = torch.randn(3, 16, 4)
    maps, report = layer_sweep(model, z0, [0.1, 0.9], [0, 2, 3])
    assert len(maps) == 6
    assert all(m.grid.shape == (4, 4) for m in maps)
    assert report.layers == [0, 2, 3] and report.samples == 3
    assert report.to_csv().splitlines()[0] == "layer,fraction"


def test_layer_sweep_encoder(ref_encoder, calib_images):
    maps, report = layer_sweep(ref_encoder, calib_images[:4], [0.0], range(4))
    assert len(maps) == 4 and maps[0].grid.shape == (8, 8)
    assert all(f == 0.0 for f in report.fractions)
    with pytest.raises(IndexError):
        layer_sweep(ref_encoder, calib_images[:2], [0.0], [4])
