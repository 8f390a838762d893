"""Token-norm maps, per-layer outlier fractions, PCA maps and their file exports."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import DimensionError
from .model import RegisterDiT, capture_activations, patch_positions
from .ttr import DEFAULT_CRITERION, OutlierCriterion, detect_outlier_tokens


@dataclass
class NormMap:
    grid: np.ndarray
    layer: int
    t: float
    source: str

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise DimensionError("norm map grid must be 2-D")


@dataclass
class OutlierReport:
    layers: list
    fractions: list
    criterion: OutlierCriterion = DEFAULT_CRITERION
    samples: int = 0

    def to_csv(self) -> str:
        rows = ["layer,fraction"] + [f"{l},{f!r}" for l, f in zip(self.layers, self.fractions)]
        return "\n".join(rows) + "\n"


@dataclass
class PCAMap:
    grid: np.ndarray                   # (h, w, 3) in [0, 1]
    explained: np.ndarray              # explained-variance ratio of each component
    degenerate: list = field(default_factory=list)  # component slots that were zero-filled
    projections: np.ndarray | None = None  # raw (N, 3) projections before min-max


def _as_numpy(features) -> np.ndarray:
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    return np.asarray(features, dtype=np.float64)


def _check_layout(n: int, layout) -> tuple:
    h, w = int(layout[0]), int(layout[1])
    if h * w != n:
        raise DimensionError(f"layout {h}x{w} does not match {n} tokens")
    return h, w


def norm_map(features, layout, layer: int = 0, t: float = float("nan"),
             source: str = "encoder") -> NormMap:
    """Row-major grid of per-token L2 norms."""
    f = _as_numpy(features)
    if f.ndim != 2:
        raise DimensionError(f"norm_map expects (N, d) features, got shape {f.shape}")
    h, w = _check_layout(f.shape[0], layout)
    return NormMap(np.sqrt((f * f).sum(axis=1)).reshape(h, w), layer, t, source)


def _encoder_hidden(encoder, inputs):
    with torch.no_grad():
        return encoder.hidden_states(torch.as_tensor(np.asarray(inputs), dtype=torch.float32))


def layer_sweep(model_or_encoder, inputs, t_list, layer_set, class_id=None,
                crit: OutlierCriterion = DEFAULT_CRITERION, generator=None):
    """Norm maps for every (layer, t) on the first input, plus averaged fractions.

    For a denoiser, ``inputs`` are clean latents (B, N, d) that get noised
    at each ``t`` with a fixed noise draw. For an encoder, ``inputs`` are
    images and ``t_list`` only labels the maps (encoders see no noise).
    Register and conditioning positions are removed before measuring.
    """
    layers = sorted(set(int(l) for l in layer_set))
    t_list = list(t_list)
    maps, sums, counts = [], {l: 0.0 for l in layers}, {l: 0 for l in layers}
    if isinstance(model_or_encoder, RegisterDiT):
        model = model_or_encoder
        side = model.side
        z0 = torch.as_tensor(inputs, dtype=torch.float32)
        if z0.ndim == 2:
            z0 = z0.unsqueeze(0)
        gen = generator or torch.Generator().manual_seed(0)
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        y = torch.full((z0.shape[0],), -1 if class_id is None else int(class_id))
        for t in t_list:
            z_t = t * z0 + (1.0 - t) * eps
            trace = capture_activations(model, z_t, torch.full((z0.shape[0],), float(t)), y, layers)
            for l in layers:
                keep = patch_positions(trace.kinds[l])
                h = trace.hidden[l][:, keep]
                maps.append(norm_map(h[0], (side, side), l, float(t), "denoiser"))
                for b in range(h.shape[0]):
                    sums[l] += detect_outlier_tokens(h[b], crit)[1]
                    counts[l] += 1
        samples = z0.shape[0]
    else:
        enc = model_or_encoder
        hidden = _encoder_hidden(enc, inputs)
        for l in layers:
            if not 0 <= l < len(hidden):
                raise IndexError(f"layer {l} outside [0, {len(hidden)})")
        side = enc.cfg.grid
        for t in t_list:
            for l in layers:
                h = hidden[l]
                maps.append(norm_map(h[0], (side, side), l, float(t), "encoder"))
                for b in range(h.shape[0]):
                    sums[l] += detect_outlier_tokens(h[b], crit)[1]
                    counts[l] += 1
        samples = hidden[0].shape[0]
    report = OutlierReport(layers, [sums[l] / max(counts[l], 1) for l in layers], crit, samples)
    return maps, report


def pca_map(features, layout, n_components: int = 3, rank_tol: float = 1e-10,
            fit_on=None) -> PCAMap:
    """Project centred tokens on their top principal axes and min-max each axis.

    By default the mean and axes come from ``features`` itself (one image).
    ``fit_on`` supplies a pooled (M, d) token set, for example every patch
    token of a batch, to fit them instead; ``features`` is then projected on
    the shared axes.

    Eigenvectors come from a dense symmetric solver, ordered by decreasing
    eigenvalue with ties broken by the lower original channel index of the
    vector's largest entry. Signs are fixed so the largest-magnitude entry
    of each eigenvector is positive. Components whose eigenvalue is below
    ``rank_tol`` times the largest are zero-filled and listed as degenerate.
    """
    f = _as_numpy(features)
    if f.ndim != 2:
        raise DimensionError(f"pca_map expects (N, d) features, got shape {f.shape}")
    n, d = f.shape
    if n < 3:
        raise DimensionError("pca_map needs at least 3 tokens")
    h, w = _check_layout(n, layout)
    basis = f if fit_on is None else _as_numpy(fit_on).reshape(-1, d)
    mean = basis.mean(axis=0, keepdims=True)
    bc = basis - mean
    cov = bc.T @ bc / len(basis)
    xc = f - mean
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    lead = np.argmax(np.abs(vecs), axis=0)
    order = sorted(range(d), key=lambda i: (-vals[i], lead[i]))
    total = vals.sum()
    proj = np.zeros((n, n_components))
    explained = np.zeros(n_components)
    degenerate = []
    top = vals[order[0]] if d else 0.0
    for k in range(n_components):
        if k >= d or top <= 0 or vals[order[k]] <= rank_tol * top:
            degenerate.append(k)
            continue
        v = vecs[:, order[k]]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        proj[:, k] = xc @ v
        explained[k] = vals[order[k]] / total
    grid = np.zeros_like(proj)
    for k in range(n_components):
        if k in degenerate:
            continue
        lo, hi = proj[:, k].min(), proj[:, k].max()
        grid[:, k] = (proj[:, k] - lo) / (hi - lo) if hi > lo else 0.0
    return PCAMap(grid.reshape(h, w, n_components), explained, degenerate, proj)


# -- exports ---------------------------------------------------------------

def _grid_of(m):
    return m.grid if isinstance(m, (NormMap, PCAMap)) else np.asarray(m, dtype=np.float64)


def _write(path: str, data: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write map to {path}: {exc.strerror or exc}") from exc


def export_map(m, path: str, fmt: str | None = None) -> str:
    """Write ``m`` as CSV, 16-bit binary PGM (norm maps) or 8-bit binary PPM (PCA maps)."""
    fmt = (fmt or os.path.splitext(path)[1].lstrip(".")).lower()
    grid = _grid_of(m)
    if fmt == "csv":
        if grid.ndim == 3:
            grid = grid.reshape(grid.shape[0], -1)
        text = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in grid)
        _write(path, text.encode("ascii"))
    elif fmt == "pgm":
        if grid.ndim != 2:
            raise DimensionError("PGM export needs a 2-D grid")
        lo, hi = float(grid.min()), float(grid.max())
        if hi > lo:
            scaled = np.rint((grid - lo) / (hi - lo) * 65535.0)
        else:
            scaled = np.zeros_like(grid)
        h, w = grid.shape
        header = f"P5\n#min={lo!r},max={hi!r}\n{w} {h}\n65535\n".encode("ascii")
        _write(path, header + scaled.astype(">u2").tobytes())
    elif fmt == "ppm":
        if grid.ndim != 3 or grid.shape[2] != 3:
            raise DimensionError("PPM export needs an (h, w, 3) grid")
        h, w, _ = grid.shape
        data = np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
        _write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
    else:
        raise ValueError(f"unknown map format {fmt!r}")
    return path


def read_csv_map(path: str) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def _netpbm_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields, comments, pos = [], [], len(magic)
    while len(fields) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1:end].decode("ascii"))
            pos = end + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    return fields, comments, pos + 1


def read_pgm(path: str):
    """(values rescaled back to [min, max], raw 16-bit array, (min, max))."""
    with open(path, "rb") as fh:
        data = fh.read()
    (w, h, maxval), comments, pos = _netpbm_header(data, b"P5")
    raw = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w)
    bounds = dict(kv.split("=") for c in comments for kv in c.split(","))
    lo, hi = float(bounds["min"]), float(bounds["max"])
    return lo + raw.astype(np.float64) / maxval * (hi - lo), raw, (lo, hi)


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    (w, h, _), _, pos = _netpbm_header(data, b"P6")
    return np.frombuffer(data[pos:pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)


def map_filename(source: str, layer: int, t: float, ext: str) -> str:
    t_text = "na" if isinstance(t, float) and math.isnan(t) else f"{t:g}"
    return f"{source}_{layer}_{t_text}.{ext}"
