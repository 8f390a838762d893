"""Deterministic outlier fixtures built on a calibrated toy encoder.

Channels are picked by their calibration band width at the target block,
so the same rule applies to any pretrained encoder: the widest bands give
the strongest injected population.
"""
from __future__ import annotations

from dataclasses import dataclass

from .encoder import OutlierInjection, ToyEncoder, inject_outliers

SINGLE_GAIN = 300.0
DOMINANT_GAIN = 1000.0
SECONDARY_GAIN = 150.0
SECONDARY_RANKS = (6, 9)


def band_order(enc: ToyEncoder, layer: int) -> list:
    """Channel ids of block ``layer`` ordered by decreasing band width (ties by id)."""
    band = enc.mlp_band[layer].tolist()
    return sorted(range(len(band)), key=lambda c: (-band[c], c))


@dataclass(frozen=True)
class Fixture:
    encoder: ToyEncoder
    injections: tuple

    @property
    def neuron_sets(self) -> list:
        return [sorted(inj.neuron_ids) for inj in self.injections]


def single_cluster(enc: ToyEncoder, layer: int | None = None, gain: float = SINGLE_GAIN) -> Fixture:
    """Three widest-band channels of ``layer`` (default: second-to-last block)."""
    layer = enc.cfg.depth - 2 if layer is None else layer
    inj = OutlierInjection(layer, tuple(sorted(band_order(enc, layer)[:3])), gain)
    return Fixture(inject_outliers(enc, inj), (inj,))


def two_cluster(enc: ToyEncoder) -> Fixture:
    """A dominant and a secondary channel cluster in the last block.

    The dominant cluster uses the three widest bands at a high gain, the
    secondary one the band ranks ``SECONDARY_RANKS`` at a lower gain, so a
    single detection pass only sees the dominant one.
    """
    layer = enc.cfg.depth - 1
    order = band_order(enc, layer)
    lo, hi = SECONDARY_RANKS
    first = OutlierInjection(layer, tuple(sorted(order[:3])), DOMINANT_GAIN)
    second = OutlierInjection(layer, tuple(sorted(order[lo:hi])), SECONDARY_GAIN)
    return Fixture(inject_outliers(inject_outliers(enc, first), second), (first, second))


def two_layer(enc: ToyEncoder, gains=(SINGLE_GAIN, SINGLE_GAIN)) -> Fixture:
    """Injections at the last two blocks, each on its own widest-band channels."""
    last = enc.cfg.depth - 1
    injs = []
    out = enc
    for layer, gain in zip((last - 1, last), gains):
        inj = OutlierInjection(layer, tuple(sorted(band_order(enc, layer)[:3])), gain)
        out = inject_outliers(out, inj)
        injs.append(inj)
    return Fixture(out, tuple(injs))
