"""Fixed-threshold view selection, plus the blended attention+feature variant.

A view j joins the kept set when it is the anchor itself or its relevance
score clears the threshold. One global threshold is shared across sets; the
shipped defaults come straight from the method's published operating point
and are config, not logic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import DegenerateInputError
from .tensorstore import LABEL_UNKNOWN, ViewManifest

# Published operating point: one threshold per probe, shared across datasets.
DEFAULT_TAU_FEATURE = 0.65
DEFAULT_TAU_ATTENTION = 0.05
DEFAULT_TAU_FUSED = 0.4
DEFAULT_ALPHA = 0.5

DEFAULT_TAU = {
    "feature": DEFAULT_TAU_FEATURE,
    "attention": DEFAULT_TAU_ATTENTION,
    "fused": DEFAULT_TAU_FUSED,
}

VERDICT_KEPT = "kept"
VERDICT_REJECTED = "rejected"


@dataclass(frozen=True)
class FusionConfig:
    """Blend weight and threshold for the fused attention+feature score."""

    alpha: float = DEFAULT_ALPHA
    tau_agg: float = DEFAULT_TAU_FUSED

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class Selection:
    """The kept-view set for one anchor, with per-view verdicts."""

    anchor: str
    kept: list[str]
    threshold: float
    probe: str
    per_view: dict[str, tuple[float, str]]


def select_views(
    scores: Mapping[str, float],
    anchor: str,
    tau: float,
    probe: str = "feature",
) -> Selection:
    """Keep the anchor plus every view whose score is >= tau (ties kept).

    ``scores`` is one anchor's score row in set order; order is preserved in
    the kept list.
    """
    if anchor not in scores:
        raise ValueError(f"anchor {anchor!r} missing from score row")
    kept: list[str] = []
    per_view: dict[str, tuple[float, str]] = {}
    for vid, s in scores.items():
        s = float(s)
        keep = vid == anchor or s >= tau
        per_view[vid] = (s, VERDICT_KEPT if keep else VERDICT_REJECTED)
        if keep:
            kept.append(vid)
    return Selection(anchor=anchor, kept=kept, threshold=float(tau), probe=probe, per_view=per_view)


def normalize_for_fusion(scores: Mapping[str, float]) -> dict[str, float]:
    """Min-max rescale a score row to [0, 1]; order-preserving.

    A constant row is degenerate (callers may fall back to single-probe
    selection) and raises DegenerateInputError.
    """
    vals = [float(v) for v in scores.values()]
    if len(vals) < 2:
        raise ValueError("need at least 2 scores to normalize")
    lo, hi = min(vals), max(vals)
    if hi == lo:
        raise DegenerateInputError(f"constant score row (all {hi!r}): min-max rescale is undefined")
    return {vid: (float(v) - lo) / (hi - lo) for vid, v in scores.items()}


def fuse_scores(
    att_row: Mapping[str, float],
    feat_row: Mapping[str, float],
    cfg: FusionConfig,
) -> dict[str, float]:
    """Convex combination alpha*attention + (1-alpha)*feature of normalized rows."""
    if list(att_row.keys()) != list(feat_row.keys()):
        raise ValueError("attention and feature rows index different views")
    a = cfg.alpha
    return {vid: a * float(att_row[vid]) + (1.0 - a) * float(feat_row[vid]) for vid in att_row}


@dataclass
class SelectionReport:
    """Kept/rejected counts by label, plus the second-pass work order."""

    selection: Selection
    kept_by_label: dict[str, int]
    rejected_by_label: dict[str, int]
    work_order: dict

    @property
    def clean_kept(self) -> int:
        return self.kept_by_label.get("clean", 0)

    @property
    def distractors_rejected(self) -> int:
        return self.rejected_by_label.get("distractor", 0)


def selection_report(sel: Selection, manifest: ViewManifest) -> SelectionReport:
    """Tally the selection against the manifest labels and emit a work order.

    Unknown labels are counted under "unknown" rather than rejected as input
    errors; the work order lists the kept views for re-inference.
    """
    labels = manifest.labels()
    kept = set(sel.kept)
    kept_by: dict[str, int] = {}
    rejected_by: dict[str, int] = {}
    for vid in manifest.ids():
        label = labels.get(vid, LABEL_UNKNOWN)
        bucket = kept_by if vid in kept else rejected_by
        bucket[label] = bucket.get(label, 0) + 1
    order = {
        "set_id": manifest.set_id,
        "anchor": sel.anchor,
        "kept": list(sel.kept),
        "probe": sel.probe,
        "tau": sel.threshold,
    }
    return SelectionReport(
        selection=sel, kept_by_label=kept_by, rejected_by_label=rejected_by, work_order=order
    )


def write_work_orders(orders: list[dict], path: str | Path) -> None:
    """Persist work orders as a JSON list for the exporter's second pass."""
    Path(path).write_text(json.dumps(orders, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def multi_anchor_select(
    rows: Mapping[str, Mapping[str, float]],
    tau: float,
    combine: str = "union",
    probe: str = "feature",
) -> tuple[dict[str, Selection], list[str]]:
    """Run selection with every view as anchor and combine the kept sets.

    combine="union" keeps a view accepted by any anchor; "intersection" keeps
    only views accepted by all. Returns per-anchor selections plus the
    combined kept list in row order.
    """
    if combine not in ("union", "intersection"):
        raise ValueError(f"combine must be union or intersection, got {combine!r}")
    selections = {
        anchor: select_views(row, anchor, tau, probe=probe) for anchor, row in rows.items()
    }
    kept_sets = [set(sel.kept) for sel in selections.values()]
    if combine == "union":
        merged = set().union(*kept_sets) if kept_sets else set()
    else:
        merged = set.intersection(*kept_sets) if kept_sets else set()
    order = list(rows.keys())
    return selections, [vid for vid in order if vid in merged]
