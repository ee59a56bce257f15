"""Synthetic internal representations and trajectories with known ground truth.

Every generator is deterministic per seed and hits its analytic values exactly
in the noiseless limit, so the scoring, selection, and metric paths can be
verified end to end without a pretrained backbone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evalmetrics import DepthPair, Sim3, Trajectory
from .tensorstore import (
    LABEL_CLEAN,
    LABEL_DISTRACTOR,
    POSE_WORLD_FROM_CAMERA,
    ROLE_FEATURES,
    ROLE_KEYS,
    ROLE_QUERIES,
    TokenGrid,
    ViewManifest,
    ViewRecord,
    make_blob,
    save_set,
)


@dataclass(frozen=True)
class SynthSpec:
    """Shape and noise parameters for a synthetic view set.

    noise_sigma is the RMS norm of the per-position perturbation relative to
    the unit directions (per-coordinate std sigma/sqrt(d)), so sigma=0.1 means
    positions stay within a few degrees of their planted direction.
    """

    n_clean: int
    n_distractor: int
    grid: TokenGrid
    clean_axis_count: int = 1
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_clean < 1:
            raise ValueError("need at least one clean view (the anchor)")
        if self.clean_axis_count < 1:
            raise ValueError("clean direction needs at least one axis")


def _view_ids(spec: SynthSpec) -> tuple[list[str], list[str]]:
    clean = [f"clean_{i:03d}" for i in range(spec.n_clean)]
    noise = [f"distractor_{i:03d}" for i in range(spec.n_distractor)]
    return clean, noise


def _noisy_unit_rows(direction: np.ndarray, count: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    d = direction.shape[0]
    rows = np.tile(direction, (count, 1))
    if sigma > 0:
        rows = rows + rng.normal(0.0, sigma / np.sqrt(d), size=(count, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows


def gen_feature_set(spec: SynthSpec, out_dir: str | Path | None = None) -> ViewManifest:
    """Feature-role set: clean views share one scene direction, distractors
    each sit on their own orthogonal axis.

    With sigma=0 the clean-pair feature score is exactly 1.0 and every
    clean-distractor score is exactly 0.0.
    """
    grid = spec.grid
    grid.validate()
    d = grid.feature_dim
    if spec.clean_axis_count + spec.n_distractor > d:
        raise ValueError(
            f"feature_dim={d} too small for {spec.n_distractor} orthogonal distractor "
            f"directions on top of a {spec.clean_axis_count}-axis clean direction"
        )
    rng = np.random.default_rng(spec.seed)
    clean_dir = np.zeros(d)
    clean_dir[: spec.clean_axis_count] = 1.0 / np.sqrt(spec.clean_axis_count)
    clean_ids, noise_ids = _view_ids(spec)
    hw = grid.n_patches
    records = []
    for vid in clean_ids:
        rows = _noisy_unit_rows(clean_dir, hw, spec.noise_sigma, rng)
        feat = rows.reshape(grid.h_patches, grid.w_patches, d)
        records.append(
            ViewRecord(
                view_id=vid,
                label=LABEL_CLEAN,
                tensors={ROLE_FEATURES: make_blob(ROLE_FEATURES, feat, vid, layer_index=0)},
            )
        )
    for k, vid in enumerate(noise_ids):
        direction = np.zeros(d)
        direction[spec.clean_axis_count + k] = 1.0
        rows = _noisy_unit_rows(direction, hw, spec.noise_sigma, rng)
        feat = rows.reshape(grid.h_patches, grid.w_patches, d)
        records.append(
            ViewRecord(
                view_id=vid,
                label=LABEL_DISTRACTOR,
                tensors={ROLE_FEATURES: make_blob(ROLE_FEATURES, feat, vid, layer_index=0)},
            )
        )
    manifest = ViewManifest(
        set_id=f"synth-feat-s{spec.seed}", grid=grid, layer_of_interest=0, views=records
    )
    if out_dir is not None:
        save_set(manifest, out_dir)
    return manifest


def planted_attention_masses(
    spec: SynthSpec, planted_mass: float, n_views: int | None = None
) -> dict[str, float]:
    """Analytic per-view patch-token attention mass for gen_qk_set's layout.

    The target mass spreads uniformly over the clean context views' patch
    tokens; the anchor, distractors, and register tokens share the remainder
    uniformly.
    """
    clean_ids, noise_ids = _view_ids(spec)
    grid = spec.grid
    n = len(clean_ids) + len(noise_ids) if n_views is None else n_views
    hw = grid.n_patches
    hot = (len(clean_ids) - 1) * hw  # clean context patch tokens; anchor keys stay cold
    total = n * grid.tokens_per_image
    cold = total - hot
    if hot == 0:
        per_hot = 0.0
        per_cold = 1.0 / cold
    else:
        per_hot = planted_mass / hot
        per_cold = (1.0 - planted_mass) / cold
    masses = {}
    for i, vid in enumerate(clean_ids):
        masses[vid] = hw * (per_cold if i == 0 else per_hot)
    for vid in noise_ids:
        masses[vid] = hw * per_cold
    return masses


def gen_qk_set(
    spec: SynthSpec,
    planted_mass: float = 0.9,
    heads: int = 2,
    d_head: int = 16,
    out_dir: str | Path | None = None,
) -> ViewManifest:
    """Query/key set whose softmax mass on clean context views is planted.

    Keys of clean context views align with the anchor's patch queries; the
    anchor's own keys, all register-token keys, and distractor keys are
    mutually cold. Register-token queries point along a third axis, so any
    slicing bug that lets them in shifts the scores and fails the oracle.
    When out_dir is given, the planted per-view masses are written next to the
    set as attention_oracle.json.
    """
    grid = spec.grid
    grid.validate()
    if d_head < 3:
        raise ValueError(f"d_head={d_head} too small for the three planted axes")
    if not 0.0 < planted_mass < 1.0:
        raise ValueError(f"planted_mass must be in (0, 1), got {planted_mass}")
    rng = np.random.default_rng(spec.seed)
    clean_ids, noise_ids = _view_ids(spec)
    n = len(clean_ids) + len(noise_ids)
    hw = grid.n_patches
    hot = (len(clean_ids) - 1) * hw
    total = n * grid.tokens_per_image
    if hot > 0:
        # softmax(L vs 0) over hot/cold token counts reproduces the target mass
        logit = float(np.log(planted_mass * (total - hot) / ((1.0 - planted_mass) * hot)))
    else:
        logit = 0.0

    q_patch_dir = np.zeros(d_head)
    q_patch_dir[0] = 1.0
    k_cold_dir = np.zeros(d_head)
    k_cold_dir[1] = 1.0
    q_reg_dir = np.zeros(d_head)
    q_reg_dir[2] = 1.0
    # q.k_hot / sqrt(d_head) must equal the planted logit
    k_hot_dir = q_patch_dir * logit * np.sqrt(float(d_head))

    def token_block(patch_dir: np.ndarray, reg_dir: np.ndarray) -> np.ndarray:
        block = np.empty((grid.tokens_per_image, d_head))
        block[: grid.patch_start_idx] = reg_dir
        block[grid.patch_start_idx :] = patch_dir
        if spec.noise_sigma > 0:
            block = block + rng.normal(
                0.0, spec.noise_sigma / np.sqrt(d_head), size=block.shape
            )
        return block

    records = []
    for idx, vid in enumerate(clean_ids + noise_ids):
        is_clean_context = idx != 0 and idx < len(clean_ids)
        k_block = token_block(k_hot_dir if is_clean_context else k_cold_dir, k_cold_dir)
        q_block = token_block(q_patch_dir, q_reg_dir)
        k_arr = np.stack([k_block] * heads)
        q_arr = np.stack([q_block] * heads)
        records.append(
            ViewRecord(
                view_id=vid,
                label=LABEL_CLEAN if idx < len(clean_ids) else LABEL_DISTRACTOR,
                tensors={
                    ROLE_QUERIES: make_blob(ROLE_QUERIES, q_arr, vid, layer_index=0),
                    ROLE_KEYS: make_blob(ROLE_KEYS, k_arr, vid, layer_index=0),
                },
            )
        )
    manifest = ViewManifest(
        set_id=f"synth-qk-s{spec.seed}", grid=grid, layer_of_interest=0, views=records
    )
    if out_dir is not None:
        save_set(manifest, out_dir)
        oracle = planted_attention_masses(spec, planted_mass)
        (Path(out_dir) / "attention_oracle.json").write_text(
            json.dumps(oracle, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return manifest


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    kx, ky, kz = axis
    k_mat = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]])
    return np.eye(3) + np.sin(angle_rad) * k_mat + (1 - np.cos(angle_rad)) * (k_mat @ k_mat)


@dataclass
class PlantedTrajectory:
    """What gen_trajectory applied to turn gt into pred."""

    sim3: Sim3
    center_noise_radius: float
    rot_perturb_deg: float


def gen_trajectory(
    n: int,
    seed: int = 0,
    scale: float | None = None,
    center_noise_radius: float = 0.0,
    rot_perturb_deg: float = 0.0,
) -> tuple[Trajectory, Trajectory, PlantedTrajectory]:
    """A ground-truth trajectory and a prediction related to it by a known Sim(3).

    Optional center noise is bounded by center_noise_radius, so ATE <= radius
    by construction. A rotation perturbation of rot_perturb_deg applied to the
    last pose hits exactly one relative motion, contributing
    rot_perturb_deg / sqrt(n-1) to RPE_rot.
    """
    if n < 3:
        raise ValueError(f"trajectory needs n >= 3 poses, got {n}")
    rng = np.random.default_rng(seed)
    gt_rots = np.stack([_random_rotation(rng) for _ in range(n)])
    gt_centers = rng.uniform(-2.0, 2.0, size=(n, 3))
    gt = Trajectory(
        view_ids=[f"v{i:03d}" for i in range(n)],
        rotations=gt_rots,
        translations=gt_centers,
        convention=POSE_WORLD_FROM_CAMERA,
    )
    s = float(rng.uniform(0.5, 2.0)) if scale is None else float(scale)
    rot = _random_rotation(rng)
    trans = rng.uniform(-1.0, 1.0, size=3)
    planted = Sim3(scale=s, rotation=rot, translation=trans)
    pred_centers = planted.apply(gt_centers)
    if center_noise_radius > 0:
        direction = rng.normal(size=(n, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radii = rng.uniform(0.0, center_noise_radius, size=(n, 1))
        pred_centers = pred_centers + direction * radii
    pred_rots = np.einsum("ij,njk->nik", rot, gt_rots)
    if rot_perturb_deg != 0.0:
        # right-multiply the last pose: only the final relative motion moves
        perturb = _axis_angle(rng.normal(size=3), np.radians(rot_perturb_deg))
        pred_rots[-1] = pred_rots[-1] @ perturb
    pred = Trajectory(
        view_ids=list(gt.view_ids),
        rotations=pred_rots,
        translations=pred_centers,
        convention=POSE_WORLD_FROM_CAMERA,
    )
    return gt, pred, PlantedTrajectory(
        sim3=planted,
        center_noise_radius=center_noise_radius,
        rot_perturb_deg=rot_perturb_deg,
    )


def gen_depth_pair(
    h: int,
    w: int,
    affine: tuple[float, float] = (1.0, 0.0),
    seed: int = 0,
    mask_fraction: float = 0.0,
) -> DepthPair:
    """Random positive gt depth and pred = a*gt + b, with optional mask holes."""
    a, b = affine
    if a <= 0:
        raise ValueError(f"affine scale must be positive, got {a}")
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1.0, 10.0, size=(h, w))
    pred = a * gt + b
    valid = np.ones((h, w), dtype=bool)
    if mask_fraction > 0:
        valid = rng.random((h, w)) >= mask_fraction
    return DepthPair(pred=pred, gt=gt, valid=valid)
