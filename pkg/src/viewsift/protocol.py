"""Controlled noise-injection evaluation: seeded trial sampling, selection
success rates, and multi-trial aggregation.

Sampling runs on a self-contained SplitMix64 generator with rejection-sampled
bounds and Fisher-Yates shuffles (documented in the README), so identical
seeds give byte-identical trials on any platform and stay stable across
library upgrades. That determinism is a contract, not an implementation
detail.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ViewsiftError
from .evalmetrics import MetricSummary, evaluate_predictions
from .scoring import MODE_MINMAX, PROBE_ATTENTION, PROBE_FEATURE, PROBE_FUSED, score_matrix
from .selection import (
    DEFAULT_TAU,
    FusionConfig,
    Selection,
    fuse_scores,
    normalize_for_fusion,
    select_views,
)
from .tensorstore import LABEL_CLEAN, LABEL_DISTRACTOR, ViewManifest, load_manifest

PROFILES: dict[str, dict[str, tuple[int, int]]] = {
    "default": {"small": (30, 10), "medium": (30, 30), "large": (30, 50)},
    "eth3d": {"small": (14, 5), "medium": (14, 14), "large": (14, 30)},
}

LEVEL_NAMES = ("small", "medium", "large")


@dataclass(frozen=True)
class NoiseLevel:
    """How many clean and distractor views one trial mixes."""

    name: str
    n_clean: int
    n_noise: int


def noise_level(name: str, profile: str = "default") -> NoiseLevel:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    if name not in PROFILES[profile]:
        raise ValueError(f"unknown noise level {name!r}; choose from {LEVEL_NAMES}")
    n_clean, n_noise = PROFILES[profile][name]
    return NoiseLevel(name=name, n_clean=n_clean, n_noise=n_noise)


_MASK64 = (1 << 64) - 1


class SeededSampler:
    """SplitMix64 stream with unbiased randrange and Fisher-Yates sampling.

    Pure-integer arithmetic: the stream for a given seed is identical on every
    platform and Python version.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"randrange bound must be positive, got {n}")
        limit = ((1 << 64) // n) * n  # rejection keeps the draw unbiased
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def sample(self, pool: list, k: int) -> list:
        """k distinct items, uniform without replacement (partial Fisher-Yates)."""
        if k > len(pool):
            raise ValueError(f"cannot sample {k} items from a pool of {len(pool)}")
        items = list(pool)
        for i in range(k):
            j = i + self.randrange(len(items) - i)
            items[i], items[j] = items[j], items[i]
        return items[:k]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]


@dataclass
class Trial:
    """One sampled evaluation set: who is in it and in what order."""

    seed: int
    level: NoiseLevel
    clean_ids: list[str]
    distractor_ids: list[str]
    combined: list[str]


def sample_trial(
    clean_pool: list[str],
    distractor_pool: list[str],
    level: NoiseLevel,
    seed: int,
) -> Trial:
    """Sample one trial: clean block, distractor block, then a seeded shuffle."""
    overlap = set(clean_pool) & set(distractor_pool)
    if overlap:
        raise ValueError(f"clean and distractor pools overlap: {sorted(overlap)[:5]}")
    if len(clean_pool) < level.n_clean:
        raise ValueError(
            f"clean pool has {len(clean_pool)} views, level {level.name!r} needs {level.n_clean}"
        )
    if len(distractor_pool) < level.n_noise:
        raise ValueError(
            f"distractor pool has {len(distractor_pool)} views, level {level.name!r} needs {level.n_noise}"
        )
    sampler = SeededSampler(seed)
    clean = sampler.sample(clean_pool, level.n_clean)
    noise = sampler.sample(distractor_pool, level.n_noise)
    combined = clean + noise
    sampler.shuffle(combined)
    return Trial(seed=seed, level=level, clean_ids=clean, distractor_ids=noise, combined=combined)


@dataclass
class RejectionStats:
    """Distractor recall plus the clean-retention companion that exposes
    reject-everything filters."""

    success_rate: float
    clean_retention: float
    n_distractors: int
    n_distractors_rejected: int
    n_clean_context: int
    n_clean_kept: int


def success_rate(sel: Selection, labels: dict[str, str]) -> RejectionStats:
    """Fraction of distractors excluded from the kept set (ties broken by label)."""
    kept = set(sel.kept)
    distractors = [v for v in sel.per_view if labels.get(v) == LABEL_DISTRACTOR]
    if not distractors:
        raise ValueError("success rate needs at least one distractor-labeled view")
    clean_ctx = [v for v in sel.per_view if labels.get(v) == LABEL_CLEAN and v != sel.anchor]
    rejected = sum(1 for v in distractors if v not in kept)
    clean_kept = sum(1 for v in clean_ctx if v in kept)
    return RejectionStats(
        success_rate=rejected / len(distractors),
        clean_retention=clean_kept / len(clean_ctx) if clean_ctx else float("nan"),
        n_distractors=len(distractors),
        n_distractors_rejected=rejected,
        n_clean_context=len(clean_ctx),
        n_clean_kept=clean_kept,
    )


@dataclass
class RunConfig:
    """One protocol run: pools, levels, trial count, and the method to score with."""

    manifest_path: str | None = None
    clean_pool: list[str] | None = None
    distractor_pool: list[str] | None = None
    profile: str = "default"
    levels: list[str] = field(default_factory=lambda: list(LEVEL_NAMES))
    n_trials: int = 10
    base_seed: int = 0
    probe: str = PROBE_FEATURE
    mode: str = MODE_MINMAX
    tau: float | None = None
    alpha: float = 0.5
    predictions: dict[str, str] = field(default_factory=dict)

    def resolved_tau(self) -> float:
        return DEFAULT_TAU[self.probe] if self.tau is None else self.tau

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        pools = doc.get("pools") or {}
        return cls(
            manifest_path=doc.get("manifest"),
            clean_pool=pools.get("clean"),
            distractor_pool=pools.get("distractor"),
            profile=doc.get("profile", "default"),
            levels=doc.get("levels", list(LEVEL_NAMES)),
            n_trials=int(doc.get("n_trials", 10)),
            base_seed=int(doc.get("base_seed", 0)),
            probe=doc.get("probe", PROBE_FEATURE),
            mode=doc.get("mode", MODE_MINMAX),
            tau=doc.get("tau"),
            alpha=float(doc.get("alpha", 0.5)),
            predictions=doc.get("predictions") or {},
        )

    def describe(self) -> dict:
        return {
            "manifest": self.manifest_path,
            "profile": self.profile,
            "levels": list(self.levels),
            "n_trials": self.n_trials,
            "base_seed": self.base_seed,
            "probe": self.probe,
            "mode": self.mode,
            "tau": self.resolved_tau(),
            "alpha": self.alpha,
        }


@dataclass
class TrialReport:
    """Everything one trial produced, serializable byte-identically."""

    trial_index: int
    seed: int
    level: str
    n_clean: int
    n_noise: int
    set_id: str
    anchor: str
    combined: list[str]
    kept: list[str]
    probe: str
    tau: float
    success_rate: float
    clean_retention: float
    metrics: dict | None = None
    config: dict | None = None

    def to_json(self) -> str:
        doc = {
            "trial_index": self.trial_index,
            "seed": self.seed,
            "level": self.level,
            "n_clean": self.n_clean,
            "n_noise": self.n_noise,
            "set_id": self.set_id,
            "anchor": self.anchor,
            "combined": self.combined,
            "kept": self.kept,
            "probe": self.probe,
            "tau": self.tau,
            "success_rate": self.success_rate,
            "clean_retention": self.clean_retention,
            "metrics": self.metrics,
            "config": self.config,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _first_clean(trial: Trial) -> str:
    clean = set(trial.clean_ids)
    for vid in trial.combined:
        if vid in clean:
            return vid
    raise ValueError("trial has no clean view to anchor on")


def _select_for_trial(manifest: ViewManifest, cfg: RunConfig, anchor: str) -> Selection:
    tau = cfg.resolved_tau()
    if cfg.probe == PROBE_FUSED:
        att_row = score_matrix(manifest, PROBE_ATTENTION, mode=cfg.mode).row(anchor)
        feat_row = score_matrix(manifest, PROBE_FEATURE).row(anchor)
        fused = fuse_scores(
            normalize_for_fusion(att_row),
            normalize_for_fusion(feat_row),
            FusionConfig(alpha=cfg.alpha, tau_agg=tau),
        )
        return select_views(fused, anchor, tau, probe=PROBE_FUSED)
    row = score_matrix(manifest, cfg.probe, mode=cfg.mode).row(anchor)
    return select_views(row, anchor, tau, probe=cfg.probe)


def run_trials(cfg: RunConfig, manifest: ViewManifest | None = None) -> list[TrialReport]:
    """Execute the full protocol: sample, score, select, rate, (maybe) evaluate.

    Pools default to the manifest's clean/distractor labels. Trial t uses seed
    base_seed + t. Component failures are re-raised tagged with the trial id;
    missing predictions for a trial just leave its metrics empty.
    """
    if manifest is None:
        if cfg.manifest_path is None:
            raise ValueError("run config needs a manifest")
        manifest = load_manifest(cfg.manifest_path)
    labels = manifest.labels()
    clean_pool = cfg.clean_pool or [v for v in manifest.ids() if labels[v] == LABEL_CLEAN]
    distractor_pool = cfg.distractor_pool or [
        v for v in manifest.ids() if labels[v] == LABEL_DISTRACTOR
    ]
    reports: list[TrialReport] = []
    config_echo = cfg.describe()
    for level_name in cfg.levels:
        level = noise_level(level_name, cfg.profile)
        for t in range(cfg.n_trials):
            seed = cfg.base_seed + t
            trial = sample_trial(clean_pool, distractor_pool, level, seed)
            set_id = f"{manifest.set_id}/{level.name}/trial{t:02d}"
            try:
                sub = manifest.subset(trial.combined, set_id=set_id)
                anchor = _first_clean(trial)
                sel = _select_for_trial(sub, cfg, anchor)
                stats = success_rate(sel, labels)
            except (ValueError, ViewsiftError) as exc:
                raise type(exc)(f"trial {set_id}: {exc}") from exc
            metrics = None
            pred_key = f"{level.name}/{t}"
            if pred_key in cfg.predictions:
                pred_manifest = load_manifest(cfg.predictions[pred_key])
                summary = evaluate_predictions(sub, pred_manifest)
                metrics = _metrics_dict(summary)
            reports.append(
                TrialReport(
                    trial_index=t,
                    seed=seed,
                    level=level.name,
                    n_clean=level.n_clean,
                    n_noise=level.n_noise,
                    set_id=set_id,
                    anchor=anchor,
                    combined=trial.combined,
                    kept=sel.kept,
                    probe=cfg.probe,
                    tau=cfg.resolved_tau(),
                    success_rate=stats.success_rate,
                    clean_retention=stats.clean_retention,
                    metrics=metrics,
                    config=config_echo,
                )
            )
    return reports


def _metrics_dict(summary: MetricSummary) -> dict:
    return {
        "ate": summary.ate,
        "rpe_trans": summary.rpe_trans,
        "rpe_rot": summary.rpe_rot,
        "absrel": summary.absrel,
        "delta125": summary.delta125,
        "coverage": summary.coverage,
    }


_AGG_FIELDS = ("success_rate", "clean_retention")
_AGG_METRICS = ("ate", "rpe_trans", "rpe_rot", "absrel", "delta125", "coverage")


def aggregate_reports(reports: list[TrialReport]) -> list[dict]:
    """Per-level means over trials, sorted by level then reduced in trial order."""
    by_level: dict[str, list[TrialReport]] = {}
    for r in reports:
        by_level.setdefault(r.level, []).append(r)
    rows = []
    for level in sorted(by_level):
        group = sorted(by_level[level], key=lambda r: r.trial_index)
        row: dict = {"level": level, "n_trials": len(group)}
        for name in _AGG_FIELDS:
            row[name] = float(np.mean([getattr(r, name) for r in group]))
        for name in _AGG_METRICS:
            vals = [r.metrics[name] for r in group if r.metrics and r.metrics.get(name) is not None]
            row[name] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows


def aggregate_csv(rows: list[dict], path: str | Path, config: dict | None = None) -> None:
    cols = ["level", "n_trials", *_AGG_FIELDS, *_AGG_METRICS]
    lines = []
    if config is not None:
        lines.append("# config: " + json.dumps(config, sort_keys=True))
    lines.append(",".join(cols))
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c)
            cells.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
