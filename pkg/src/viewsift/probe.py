"""Layer-wise clean/distractor separation analysis.

Given one manifest per probed layer, computes the anchor's mean score over
clean context views and over distractor views at each layer, and their gap.
The layer with the largest gap is the one worth filtering on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scoring import MODE_MINMAX, PROBE_ATTENTION, PROBE_FEATURE, score_matrix
from .tensorstore import LABEL_CLEAN, LABEL_DISTRACTOR, ViewManifest


@dataclass
class LayerGapCurve:
    """(layer, clean mean, distractor mean, gap) per probed layer."""

    probe: str
    per_layer: list[tuple[int, float, float, float]]

    def to_csv(self, path: str | Path, config: dict | None = None) -> None:
        lines = []
        if config is not None:
            lines.append("# config: " + json.dumps(config, sort_keys=True))
        lines.append("layer,clean_mean,distractor_mean,gap")
        for layer, clean, distractor, gap in self.per_layer:
            lines.append(f"{layer},{clean!r},{distractor!r},{gap!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def layer_gap_curve(
    manifests_per_layer: list[ViewManifest],
    labels: dict[str, str] | None = None,
    probe: str = PROBE_FEATURE,
    mode: str = MODE_MINMAX,
    anchor: str | None = None,
) -> LayerGapCurve:
    """Score each layer's manifest and reduce to clean/distractor means.

    Means are over the anchor's context views only (the anchor's self-score is
    excluded). The anchor must be labeled clean and every layer must cover the
    same views.
    """
    if not manifests_per_layer:
        raise ValueError("need at least one per-layer manifest")
    if probe not in (PROBE_ATTENTION, PROBE_FEATURE):
        raise ValueError(f"probe must be attention or feature, got {probe!r}")
    ids = manifests_per_layer[0].ids()
    for m in manifests_per_layer[1:]:
        if m.ids() != ids:
            raise ValueError(
                f"layer manifests cover different views: {m.set_id!r} vs {manifests_per_layer[0].set_id!r}"
            )
    if labels is None:
        labels = manifests_per_layer[0].labels()
    anchor = anchor if anchor is not None else ids[0]
    if labels.get(anchor) != LABEL_CLEAN:
        raise ValueError(f"anchor {anchor!r} must be a clean view, got label {labels.get(anchor)!r}")
    clean_ctx = [v for v in ids if v != anchor and labels.get(v) == LABEL_CLEAN]
    distractors = [v for v in ids if labels.get(v) == LABEL_DISTRACTOR]
    if not distractors:
        raise ValueError("no distractor-labeled views: the gap is undefined")

    entries = []
    for manifest in manifests_per_layer:
        row = score_matrix(manifest, probe, mode=mode).row(anchor)
        clean_mean = float(np.mean([row[v] for v in clean_ctx])) if clean_ctx else float("nan")
        distractor_mean = float(np.mean([row[v] for v in distractors]))
        entries.append(
            (manifest.layer_of_interest, clean_mean, distractor_mean, clean_mean - distractor_mean)
        )
    entries.sort(key=lambda e: e[0])
    return LayerGapCurve(probe=probe, per_layer=entries)


def best_layer(curve: LayerGapCurve) -> int:
    """The layer index with the largest gap; ties go to the smallest index."""
    if not curve.per_layer:
        raise ValueError("empty layer gap curve")
    best = curve.per_layer[0]
    for entry in curve.per_layer[1:]:
        if entry[3] > best[3]:
            best = entry
    return best[0]


def aggregate_curves(curves: list[LayerGapCurve]) -> LayerGapCurve:
    """Mean the per-layer stats of several trials' curves (same layers, same probe)."""
    if not curves:
        raise ValueError("no curves to aggregate")
    probe = curves[0].probe
    layers = [e[0] for e in curves[0].per_layer]
    for c in curves[1:]:
        if c.probe != probe or [e[0] for e in c.per_layer] != layers:
            raise ValueError("curves disagree on probe or layer coverage")
    merged = []
    for i, layer in enumerate(layers):
        clean = float(np.mean([c.per_layer[i][1] for c in curves]))
        distractor = float(np.mean([c.per_layer[i][2] for c in curves]))
        merged.append((layer, clean, distractor, clean - distractor))
    return LayerGapCurve(probe=probe, per_layer=merged)
