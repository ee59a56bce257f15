"""Per-view relevance scores from a backbone's internal representations.

Two probes are implemented. The attention probe rebuilds softmax rows from
exported query/key projections (scaled dot product over all views' tokens),
averages over heads and the anchor's patch-token queries, and reduces each
context view's patch-token slice to one scalar. The feature probe reduces the
dense cosine-correlation map between two views' L2-normalized feature maps to
its mean.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ManifestError
from .tensorstore import (
    ROLE_ATTENTION_ROWS,
    ROLE_FEATURES,
    ROLE_KEYS,
    ROLE_QUERIES,
    TensorBlob,
    TokenGrid,
    ViewManifest,
    validate_set,
)

PROBE_ATTENTION = "attention"
PROBE_FEATURE = "feature"
PROBE_FUSED = "fused"

MODE_RAW = "raw_mean"
MODE_MINMAX = "minmax_normalized"
_MODE_ALIASES = {"raw": MODE_RAW, "minmax": MODE_MINMAX, MODE_RAW: MODE_RAW, MODE_MINMAX: MODE_MINMAX}

# Attention rows sum to 1 over *all* key tokens; patch tokens are a subset,
# so view scores scaled back by their token counts can never exceed 1.
_RAW_MASS_TOL = 1e-4


def canonical_mode(mode: str) -> str:
    if mode not in _MODE_ALIASES:
        raise ValueError(f"unknown attention mode {mode!r}; use raw_mean or minmax_normalized")
    return _MODE_ALIASES[mode]


@dataclass
class AttentionScores:
    """One anchor's attention score per context view."""

    anchor: str | None
    scores: dict[str, float]
    mode: str
    layer_index: int | None = None


def _as_array(x: TensorBlob | np.ndarray) -> np.ndarray:
    if isinstance(x, TensorBlob):
        return x.array
    return np.asarray(x)


def attention_matrix_from_qk(
    q_anchor: TensorBlob | np.ndarray,
    k_all: TensorBlob | np.ndarray,
    d_head: int,
) -> np.ndarray:
    """Softmax(Q Kᵀ / sqrt(d_head)) over all key tokens.

    q_anchor: (heads, N_q, d_head): the anchor's patch-token queries.
    k_all:    (heads, T_k, d_head): keys of every view, concatenated in set order.
    Returns (heads, N_q, T_k); every row is a probability distribution.
    """
    q = np.asarray(_as_array(q_anchor), dtype=np.float64)
    k = np.asarray(_as_array(k_all), dtype=np.float64)
    if q.ndim != 3 or k.ndim != 3:
        raise ValueError(f"expected 3-D q/k, got q{q.shape} k{k.shape}")
    if q.shape[2] != d_head or k.shape[2] != d_head:
        raise ValueError(f"d_head mismatch: q has {q.shape[2]}, k has {k.shape[2]}, expected {d_head}")
    if q.shape[0] != k.shape[0]:
        raise ValueError(f"head count mismatch: q has {q.shape[0]}, k has {k.shape[0]}")
    logits = np.einsum("hqd,hkd->hqk", q, k) / np.sqrt(float(d_head))
    logits -= logits.max(axis=2, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=2, keepdims=True)
    return logits


def attention_view_scores(
    attn: np.ndarray,
    grid: TokenGrid,
    n_views: int,
    mode: str = MODE_MINMAX,
    view_ids: list[str] | None = None,
    anchor: str | None = None,
    layer_index: int | None = None,
) -> AttentionScores:
    """Collapse attention rows to one score per context view.

    Averages over heads and query tokens, slices each view's patch tokens out
    of the key axis, and reduces the resulting H_p x W_p map to its mean. In
    minmax mode all maps are first rescaled jointly to [0, 1] over the whole
    set, so the per-view means are comparable across sets of any size.
    """
    mode = canonical_mode(mode)
    attn = np.asarray(_as_array(attn), dtype=np.float64)
    if attn.ndim != 3:
        raise ValueError(f"expected attention rows (heads, N_q, T_k), got shape {attn.shape}")
    t_k = attn.shape[2]
    if t_k != n_views * grid.tokens_per_image:
        raise ValueError(
            f"attention covers {t_k} key tokens but {n_views} views x {grid.tokens_per_image} "
            f"tokens/view = {n_views * grid.tokens_per_image}"
        )
    if view_ids is None:
        view_ids = [str(i) for i in range(n_views)]
    if len(view_ids) != n_views:
        raise ValueError(f"got {len(view_ids)} view ids for {n_views} views")

    per_token = attn.mean(axis=0).mean(axis=0)  # (T_k,)
    hw = grid.n_patches
    maps = np.empty((n_views, hw), dtype=np.float64)
    for j in range(n_views):
        start = j * grid.tokens_per_image + grid.patch_start_idx
        maps[j] = per_token[start : start + hw]

    if mode == MODE_RAW:
        scores = maps.mean(axis=1)
        mass = float((scores * hw).sum())
        if mass > 1.0 + _RAW_MASS_TOL:
            raise ValueError(f"raw patch-token mass {mass:.6f} exceeds 1; token slicing is off")
    else:
        lo, hi = float(maps.min()), float(maps.max())
        if hi == lo:
            raise DegenerateInputError(
                f"cannot min-max normalize: constant attention maps (max == min == {hi!r})"
            )
        scores = ((maps - lo) / (hi - lo)).mean(axis=1)

    return AttentionScores(
        anchor=anchor,
        scores={vid: float(s) for vid, s in zip(view_ids, scores)},
        mode=mode,
        layer_index=layer_index,
    )


def _normalized_positions(feat: TensorBlob | np.ndarray, name: str) -> np.ndarray:
    """(HW, d) rows normalized to unit length; rejects zero-norm positions."""
    arr = np.asarray(_as_array(feat), dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected features [H_p, W_p, d], got shape {arr.shape}")
    flat = arr.reshape(-1, arr.shape[2])
    norms = np.linalg.norm(flat, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        vid = feat.view_id if isinstance(feat, TensorBlob) else "?"
        raise ValueError(f"{name} (view {vid!r}): zero-norm feature vector at position {int(bad[0])}")
    return flat / norms[:, None]


def feature_correlation_map(
    f_i: TensorBlob | np.ndarray, f_j: TensorBlob | np.ndarray
) -> np.ndarray:
    """Dense cosine map between all position pairs of two feature maps.

    Entry (u, v) is the cosine of the normalized feature vectors at position u
    of f_i and position v of f_j; shape (H_p*W_p, H_p*W_p), entries in [-1, 1].
    """
    a = _as_array(f_i)
    b = _as_array(f_j)
    if a.shape != b.shape:
        raise ValueError(f"feature maps must share grid and dim, got {a.shape} vs {b.shape}")
    na = _normalized_positions(f_i, "first input")
    nb = _normalized_positions(f_j, "second input")
    return na @ nb.T


def feature_view_score(c: np.ndarray) -> float:
    """Mean over all entries of a correlation map: one scalar in [-1, 1]."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"expected a 2-D correlation map, got shape {c.shape}")
    return float(c.mean())


@dataclass(eq=False)
class ScoreMatrix:
    """Anchor x context relevance scores for one probe over one set."""

    view_ids: list[str]
    values: np.ndarray  # (N, N) float64; rows are anchors
    probe: str
    mode: str | None = None
    layer_index: int | None = None
    set_id: str | None = None

    def row(self, anchor: str) -> dict[str, float]:
        """One anchor's scores, keyed by view id in set order."""
        try:
            i = self.view_ids.index(anchor)
        except ValueError:
            raise KeyError(f"anchor {anchor!r} not in score matrix") from None
        return {vid: float(s) for vid, s in zip(self.view_ids, self.values[i])}

    def validate(self) -> None:
        n = len(self.view_ids)
        if self.values.shape != (n, n):
            raise ValueError(f"score matrix is {self.values.shape}, expected ({n}, {n})")
        if self.probe == PROBE_FEATURE:
            if np.abs(self.values - self.values.T).max() > 1e-6:
                raise ValueError("feature score matrix is not symmetric")
            if self.values.min() < -1 - 1e-6 or self.values.max() > 1 + 1e-6:
                raise ValueError("feature scores outside [-1, 1]")

    def to_csv(self, path: str | Path, config: dict | None = None) -> None:
        """Write the matrix as CSV plus a .meta.json sidecar with probe/mode/layer."""
        path = Path(path)
        lines = ["anchor," + ",".join(self.view_ids)]
        for vid, row in zip(self.view_ids, self.values):
            lines.append(vid + "," + ",".join(repr(float(x)) for x in row))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta = {
            "probe": self.probe,
            "mode": self.mode,
            "layer": self.layer_index,
            "set_id": self.set_id,
        }
        if config:
            meta["config"] = config
        sidecar = path.with_suffix(path.suffix + ".meta.json")
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def default_threads() -> int:
    """Worker cap: VIEWSIFT_THREADS, defaulting to 1 (results never depend on it)."""
    raw = os.environ.get("VIEWSIFT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VIEWSIFT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def score_matrix(
    manifest: ViewManifest,
    probe: str,
    mode: str = MODE_MINMAX,
    threads: int | None = None,
) -> ScoreMatrix:
    """Full anchor x context score matrix for one probe.

    Feature probe needs the features role on every view; attention needs
    either precomputed attention_rows (preferred when present, they are the
    backbone's own softmax) or queries + keys.
    """
    if probe == PROBE_FEATURE:
        return _feature_matrix(manifest, threads)
    if probe == PROBE_ATTENTION:
        return _attention_matrix(manifest, canonical_mode(mode), threads)
    raise ValueError(f"unknown probe {probe!r}; score_matrix handles attention or feature")


def _feature_matrix(manifest: ViewManifest, threads: int | None) -> ScoreMatrix:
    report = validate_set(manifest, {ROLE_FEATURES})
    if not report.ok:
        raise ManifestError(f"feature probe needs features on every view: {report.describe()}")
    ids = manifest.ids()
    n = len(ids)
    # The mean of the full HWxHW cosine map factors into a dot product of
    # per-view mean normalized features, turning an O((HW)^2 d) reduction
    # into O(HW d) per pair. Tests pin this against the dense map.
    means = [
        _normalized_positions(manifest.views[i].tensors[ROLE_FEATURES], "features").mean(axis=0)
        for i in range(n)
    ]
    values = np.empty((n, n), dtype=np.float64)

    def fill(i: int) -> None:
        for j in range(n):
            values[i, j] = float(means[i] @ means[j])

    _run_over(range(n), fill, threads)
    out = ScoreMatrix(
        view_ids=ids,
        values=values,
        probe=PROBE_FEATURE,
        mode=None,
        layer_index=manifest.layer_of_interest,
        set_id=manifest.set_id,
    )
    out.validate()
    return out


def _attention_matrix(manifest: ViewManifest, mode: str, threads: int | None) -> ScoreMatrix:
    ids = manifest.ids()
    n = len(ids)
    grid = manifest.grid
    have_rows = validate_set(manifest, {ROLE_ATTENTION_ROWS}).ok
    if not have_rows:
        report = validate_set(manifest, {ROLE_QUERIES, ROLE_KEYS})
        if not report.ok:
            raise ManifestError(
                f"attention probe needs attention_rows or queries+keys: {report.describe()}"
            )
    k_all = None
    d_head = None
    if not have_rows:
        keys = [rec.tensors[ROLE_KEYS].array for rec in manifest.views]
        d_head = keys[0].shape[2]
        heads = keys[0].shape[0]
        for vid, k in zip(ids, keys):
            if k.shape[0] != heads or k.shape[2] != d_head:
                raise ValueError(
                    f"view {vid!r}: keys shape {k.shape} disagrees with ({heads}, *, {d_head})"
                )
        k_all = np.concatenate(keys, axis=1)

    values = np.empty((n, n), dtype=np.float64)

    def fill(i: int) -> None:
        rec = manifest.views[i]
        if have_rows:
            attn = rec.tensors[ROLE_ATTENTION_ROWS].array
        else:
            q = rec.tensors[ROLE_QUERIES].array
            if q.shape[2] != d_head:
                raise ValueError(f"view {rec.view_id!r}: queries d_head {q.shape[2]} != keys {d_head}")
            q_patch = q[:, grid.patch_start_idx : grid.patch_start_idx + grid.n_patches, :]
            attn = attention_matrix_from_qk(q_patch, k_all, d_head)
        row = attention_view_scores(
            attn, grid, n, mode=mode, view_ids=ids, anchor=rec.view_id,
            layer_index=manifest.layer_of_interest,
        )
        values[i] = [row.scores[vid] for vid in ids]

    _run_over(range(n), fill, threads)
    return ScoreMatrix(
        view_ids=ids,
        values=values,
        probe=PROBE_ATTENTION,
        mode=mode,
        layer_index=manifest.layer_of_interest,
        set_id=manifest.set_id,
    )


def _run_over(indices, fn, threads: int | None) -> None:
    n_workers = default_threads() if threads is None else max(1, threads)
    if n_workers == 1:
        for i in indices:
            fn(i)
        return
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        # Each index writes a disjoint row, so scheduling cannot change results.
        list(pool.map(fn, indices))
