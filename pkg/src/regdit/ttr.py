"""Outlier detection, test-time registers and their recursive application.

An outlier token has an L2 norm above ``factor`` times the (lower) median
token norm of its image. Outlier neurons are residual-stream channels whose
mean magnitude on outlier tokens exceeds the non-outlier mean by the same
factor. A test-time register is one extra token into which those channels
are moved for flagged tokens; the encoder weights are never touched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import ToyEncoder
from .exceptions import ContractError


@dataclass(frozen=True)
class OutlierCriterion:
    factor: float = 2.0


DEFAULT_CRITERION = OutlierCriterion()


def lower_median(values: torch.Tensor, dim: int = -1) -> torch.Tensor:
    n = values.shape[dim]
    return values.sort(dim=dim).values.select(dim, (n - 1) // 2)


def outlier_mask(features: torch.Tensor, crit: OutlierCriterion = DEFAULT_CRITERION) -> torch.Tensor:
    """Boolean mask over tokens for (N, d) or (B, N, d) features."""
    norms = torch.as_tensor(features).norm(dim=-1)
    med = lower_median(norms, dim=-1).unsqueeze(-1)
    return norms > crit.factor * med


def detect_outlier_tokens(features, crit: OutlierCriterion = DEFAULT_CRITERION):
    """Indices of outlier rows of an (N, d) feature matrix and their fraction."""
    features = torch.as_tensor(np.asarray(features) if not isinstance(features, torch.Tensor) else features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError("detect_outlier_tokens expects an (N, d) matrix with N >= 1")
    mask = outlier_mask(features, crit)
    idx = torch.nonzero(mask).reshape(-1).numpy()
    return idx, len(idx) / features.shape[0]


def outlier_fraction(features: torch.Tensor, crit: OutlierCriterion = DEFAULT_CRITERION) -> float:
    """Outlier fraction averaged over the images of a (B, N, d) batch."""
    features = torch.as_tensor(features)
    if features.ndim == 2:
        features = features.unsqueeze(0)
    return float(outlier_mask(features, crit).double().mean(dim=-1).mean())


def detect_outlier_neurons(calib_activations, crit: OutlierCriterion = DEFAULT_CRITERION,
                           top_k: int = 3, exclude=()) -> list[int]:
    """Channels carrying the excess norm of outlier tokens.

    ``calib_activations`` is a list of (N, C) tensors or one (B, N, C)
    tensor. Returns at most ``top_k`` channel ids (sorted), possibly none.
    Channels in ``exclude`` are skipped before ranking.
    """
    if isinstance(calib_activations, (list, tuple)):
        if not calib_activations:
            raise ContractError("calibration set is empty")
        acts = torch.stack([torch.as_tensor(a) for a in calib_activations])
    else:
        acts = torch.as_tensor(calib_activations)
        if acts.ndim == 2:
            acts = acts.unsqueeze(0)
    if acts.shape[0] == 0:
        raise ContractError("calibration set is empty")
    mask = outlier_mask(acts, crit)
    if not bool(mask.any()) or bool(mask.all()):
        return []
    a = acts.abs().double()
    on = a[mask].mean(0)
    off = a[~mask].mean(0).clamp_min(1e-12)
    ratio = (on / off).tolist()
    skip = set(exclude)
    order = sorted((c for c in range(len(ratio)) if c not in skip), key=lambda c: (-ratio[c], c))
    return sorted(c for c in order[:top_k] if ratio[c] > crit.factor)


@dataclass(frozen=True)
class TTRPatch:
    """Descriptor of one test-time register patch."""

    neuron_ids: tuple
    active_layers: tuple  # (first, last) inclusive, contiguous
    register_slot: int
    criterion: OutlierCriterion = DEFAULT_CRITERION

    @property
    def layers(self) -> range:
        return range(self.active_layers[0], self.active_layers[1] + 1)

    def to_text(self) -> str:
        return "\n".join([
            f"neuron_ids={','.join(map(str, self.neuron_ids))}",
            f"active_layers={self.active_layers[0]}-{self.active_layers[1]}",
            f"register_slot={self.register_slot}",
            f"factor={self.criterion.factor!r}",
            "accumulation=sum",
        ]) + "\n"


@dataclass
class MoveEvent:
    sample: int
    layer: int
    tokens: list
    removed: torch.Tensor     # (k, |ids|) values taken from patch positions
    register_gain: torch.Tensor  # increase of the register at the moved channels


class PatchedEncoder:
    """A frozen encoder run with one appended test-time register.

    Tokens are flagged by the outlier criterion on the hidden state after
    each block of the active range (a flag persists once set). For flagged
    tokens the patched channels are added to the register token and zeroed
    at the patch position. The register joins the sequence when it first
    receives mass; until then the forward pass is the unpatched one, which
    is the same as an appended register that is masked out of attention
    while empty. The register is dropped from every output.
    """

    def __init__(self, base: ToyEncoder, patch: TTRPatch):
        self.base = base
        self.patch = patch
        self.cfg = base.cfg
        self.events: list[MoveEvent] = []
        self.record_events = False

    def _run_one(self, x: torch.Tensor, sample: int):
        enc, p = self.base, self.patch
        ids = list(p.neuron_ids)
        n = x.shape[1]
        reg = None
        flags = torch.zeros(n, dtype=torch.bool)
        hidden = []
        for i in range(enc.cfg.depth):
            if reg is None:
                x = enc.block(i, x)
            else:
                full = enc.block(i, torch.cat([x, reg], dim=1))
                x, reg = full[:, :n], full[:, n:]
            if i in p.layers:
                flags = flags | outlier_mask(x[0], p.criterion)
                if bool(flags.any()):
                    if reg is None:
                        reg = torch.zeros(1, 1, x.shape[2], dtype=x.dtype)
                    rows = torch.nonzero(flags).reshape(-1)
                    removed = x[0][rows][:, ids]
                    before = reg[0, 0, ids].clone()
                    x = x.clone()
                    reg = reg.clone()
                    reg[0, 0, ids] = reg[0, 0, ids] + removed.sum(0)
                    x[0, rows.unsqueeze(1), torch.tensor(ids).unsqueeze(0)] = 0.0
                    if self.record_events:
                        self.events.append(MoveEvent(sample, i, rows.tolist(), removed,
                                                     reg[0, 0, ids] - before))
            hidden.append((x, reg))
        return hidden

    @torch.no_grad()
    def run(self, images):
        """Per-block (patch hidden (B, N, C), register hidden (B, C) or NaN rows)."""
        emb = self.base.embed(images)
        per_sample = [self._run_one(emb[b:b + 1], b) for b in range(emb.shape[0])]
        out = []
        for i in range(self.base.cfg.depth):
            xs = torch.cat([s[i][0] for s in per_sample], dim=0)
            regs = torch.stack([
                s[i][1][0, 0] if s[i][1] is not None
                else torch.full((xs.shape[2],), float("nan"), dtype=xs.dtype)
                for s in per_sample])
            out.append((xs, regs))
        return out

    def hidden_states(self, images) -> list:
        return [x for x, _ in self.run(images)]

    def __call__(self, images, normalize: bool = False):
        with torch.no_grad():
            z = self.base.head(self.hidden_states(images)[-1])
        return self.base.normalize(z) if normalize else z

    def remove(self) -> ToyEncoder:
        return self.base


def apply_ttr(enc: ToyEncoder, neuron_ids, layer_range,
              crit: OutlierCriterion = DEFAULT_CRITERION):
    """Patch ``enc`` with a test-time register over ``layer_range`` (first, last)."""
    ids = tuple(sorted({int(c) for c in neuron_ids}))
    if not ids:
        raise ContractError("apply_ttr needs a non-empty neuron set")
    if isinstance(enc, PatchedEncoder):
        enc = enc.base
    first, last = (layer_range.start, layer_range.stop - 1) if isinstance(layer_range, range) \
        else (int(layer_range[0]), int(layer_range[1]))
    if not 0 <= first <= last < enc.cfg.depth:
        raise IndexError(f"layer range {first}-{last} outside [0, {enc.cfg.depth})")
    bad = [c for c in ids if not 0 <= c < enc.cfg.width]
    if bad:
        raise IndexError(f"neuron ids {bad} outside [0, {enc.cfg.width})")
    patch = TTRPatch(ids, (first, last), enc.cfg.n_tokens, crit)
    return PatchedEncoder(enc, patch), patch


@dataclass
class PassRecord:
    index: int
    detected: list
    applied: list
    fraction_before: float
    fraction_after: float


@dataclass
class RecursionReport:
    passes: list = field(default_factory=list)
    stop_reason: str = ""
    layer_range: tuple | None = None

    @property
    def pass_count(self) -> int:
        return len(self.passes)

    @property
    def neuron_sets(self) -> list:
        return [p.detected for p in self.passes]

    @property
    def fractions(self) -> list:
        return [self.passes[0].fraction_before] + [p.fraction_after for p in self.passes]

    def to_text(self) -> str:
        lines = [f"pass_count={self.pass_count}", f"stop_reason={self.stop_reason}"]
        if self.layer_range is not None:
            lines.append(f"active_layers={self.layer_range[0]}-{self.layer_range[1]}")
        lines.append("accumulation=sum")
        for p in self.passes:
            lines.append(f"pass.{p.index}.detected={','.join(map(str, p.detected))}")
            lines.append(f"pass.{p.index}.fraction_before={p.fraction_before!r}")
            lines.append(f"pass.{p.index}.fraction_after={p.fraction_after!r}")
        return "\n".join(lines) + "\n"


def localize_start_layer(enc: ToyEncoder, images, neuron_ids, crit=DEFAULT_CRITERION,
                         top_k: int = 3) -> int:
    """Earliest block whose hidden state already shows any of ``neuron_ids`` as outlier neurons."""
    wanted = set(neuron_ids)
    with torch.no_grad():
        hidden = enc.hidden_states(images)
    for i, h in enumerate(hidden):
        if wanted & set(detect_outlier_neurons(h, crit, top_k=enc.cfg.width)):
            return i
    return 0


def recursive_ttr(enc: ToyEncoder, calib_images, crit: OutlierCriterion = DEFAULT_CRITERION,
                  max_iters: int = 4, top_k: int = 3, layer_range=None):
    """Detect, filter jointly, re-detect on the patched encoder; repeat.

    Returns the final (possibly unpatched) encoder and a :class:`RecursionReport`.
    """
    if max_iters < 1:
        raise ContractError("max_iters must be >= 1")
    images = torch.as_tensor(np.asarray(calib_images), dtype=torch.float32)
    with torch.no_grad():
        out = enc.hidden_states(images)[-1]
    report = RecursionReport()
    current = enc
    accumulated: set = set()
    fraction = outlier_fraction(out, crit)
    detected = detect_outlier_neurons(out, crit, top_k)
    k = 0
    while True:
        k += 1
        if not detected:
            report.passes.append(PassRecord(k, [], sorted(accumulated), fraction, fraction))
            report.stop_reason = "converged"
            break
        accumulated |= set(detected)
        if layer_range is None:
            first = localize_start_layer(enc, images, accumulated, crit)
            rng = (first, enc.cfg.depth - 1)
        else:
            rng = tuple(layer_range)
        current, _ = apply_ttr(enc, accumulated, rng, crit)
        report.layer_range = rng
        out = current.hidden_states(images)[-1]
        after = outlier_fraction(out, crit)
        report.passes.append(PassRecord(k, sorted(detected), sorted(accumulated), fraction, after))
        fraction = after
        detected = detect_outlier_neurons(out, crit, top_k, exclude=accumulated)
        if not detected:
            report.stop_reason = "converged"
            break
        if k >= max_iters:
            report.stop_reason = "max_iters"
            break
    return current, report
