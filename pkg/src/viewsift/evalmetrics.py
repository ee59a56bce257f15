"""Trajectory and depth metrics: Sim(3)-aligned ATE, consecutive-frame RPE,
and scale/shift-aligned AbsRel and delta<1.25.

All metrics are convention-covariant: poses may be stored camera-from-world
or world-from-camera as long as the trajectory declares which, and every
alignment step (Sim(3) for poses, affine for depth) happens inside the metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorstore import (
    POSE_CAMERA_FROM_WORLD,
    POSE_CONVENTIONS,
    POSE_WORLD_FROM_CAMERA,
    ROLE_DEPTH,
    ROLE_DEPTH_MASK,
    ROLE_POSE,
    ViewManifest,
)

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Sim3:
    """Similarity transform y = scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


@dataclass(eq=False)
class Trajectory:
    """An ordered camera trajectory with a declared pose convention.

    camera_from_world: x_cam = R x_world + t, camera center = -Rᵀ t.
    world_from_camera: x_world = R x_cam + t, camera center = t.
    """

    view_ids: list[str]
    rotations: np.ndarray  # (N, 3, 3)
    translations: np.ndarray  # (N, 3)
    convention: str = POSE_CAMERA_FROM_WORLD

    def __post_init__(self) -> None:
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        n = len(self.view_ids)
        if self.rotations.shape != (n, 3, 3) or self.translations.shape != (n, 3):
            raise ValueError(
                f"trajectory of {n} views needs rotations (N,3,3) and translations (N,3), "
                f"got {self.rotations.shape} and {self.translations.shape}"
            )
        if self.convention not in POSE_CONVENTIONS:
            raise ValueError(f"unknown pose convention {self.convention!r}")
        eye = np.eye(3)
        for vid, rot in zip(self.view_ids, self.rotations):
            if np.abs(rot.T @ rot - eye).max() > _ORTHO_TOL:
                raise ValueError(f"view {vid!r}: rotation is not orthonormal within {_ORTHO_TOL}")
            if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
                raise ValueError(f"view {vid!r}: rotation determinant is not +1 within {_ORTHO_TOL}")

    def __len__(self) -> int:
        return len(self.view_ids)

    def centers(self) -> np.ndarray:
        """(N, 3) camera centers in world coordinates."""
        if self.convention == POSE_WORLD_FROM_CAMERA:
            return self.translations.copy()
        return -np.einsum("nji,nj->ni", self.rotations, self.translations)

    def matrices_c2w(self) -> np.ndarray:
        """(N, 4, 4) canonical world-from-camera matrices."""
        out = np.tile(np.eye(4), (len(self), 1, 1))
        if self.convention == POSE_WORLD_FROM_CAMERA:
            out[:, :3, :3] = self.rotations
            out[:, :3, 3] = self.translations
        else:
            out[:, :3, :3] = np.transpose(self.rotations, (0, 2, 1))
            out[:, :3, 3] = -np.einsum("nji,nj->ni", self.rotations, self.translations)
        return out

    def restricted(self, view_ids: list[str]) -> "Trajectory":
        index = {vid: i for i, vid in enumerate(self.view_ids)}
        rows = [index[v] for v in view_ids]
        return Trajectory(
            view_ids=list(view_ids),
            rotations=self.rotations[rows],
            translations=self.translations[rows],
            convention=self.convention,
        )


@dataclass(eq=False)
class DepthPair:
    """Predicted and ground-truth depth with a validity mask."""

    pred: np.ndarray
    gt: np.ndarray
    valid: np.ndarray

    def effective_mask(self) -> np.ndarray:
        # Metrics only ever see valid pixels with positive ground truth.
        return np.asarray(self.valid, dtype=bool) & (np.asarray(self.gt) > 0)


def umeyama_sim3(source: np.ndarray, target: np.ndarray) -> Sim3:
    """Closed-form least-squares Sim(3): minimizes sum ||s R x + t - y||^2.

    Includes the determinant sign fix so reflections are never returned.
    Needs N >= 3 non-collinear point pairs.
    """
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) point sets, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"Sim(3) alignment needs at least 3 points, got {n}")
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    var_x = float((xc * xc).sum()) / n
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    if d[0] <= 0.0 or d[1] <= 1e-12 * d[0] or var_x <= 0.0:
        raise ValueError("rank-deficient covariance: points are collinear or coincident")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    scale = float(np.trace(np.diag(d) @ s_fix)) / var_x
    if scale <= 0:
        raise ValueError(f"alignment produced non-positive scale {scale}")
    trans = mu_y - scale * rot @ mu_x
    return Sim3(scale=scale, rotation=rot, translation=trans)


def _shared_ids(pred: Trajectory, gt: Trajectory, minimum: int) -> list[str]:
    pred_ids = set(pred.view_ids)
    shared = [vid for vid in gt.view_ids if vid in pred_ids]  # gt (manifest) order
    if len(shared) < minimum:
        raise ValueError(
            f"trajectories share {len(shared)} view ids, need at least {minimum}"
        )
    return shared


def ate(pred: Trajectory, gt: Trajectory) -> float:
    """Sim(3)-aligned RMSE of camera centers, in scene units."""
    shared = _shared_ids(pred, gt, 3)
    p = pred.restricted(shared).centers()
    g = gt.restricted(shared).centers()
    sim = umeyama_sim3(p, g)
    residual = sim.apply(p) - g
    return float(np.sqrt((residual * residual).sum(axis=1).mean()))


def rpe(pred: Trajectory, gt: Trajectory) -> tuple[float, float]:
    """Consecutive-frame relative pose error: (translation RMSE, rotation RMSE in degrees).

    Consecutive means adjacent in trajectory order restricted to the shared
    ids. The Sim(3) scale from the ATE alignment is applied to the predicted
    relative translations first, so RPE_trans is scale-consistent with ATE.
    """
    shared = _shared_ids(pred, gt, 2)
    tp = pred.restricted(shared)
    tg = gt.restricted(shared)
    if len(shared) >= 3:
        scale = umeyama_sim3(tp.centers(), tg.centers()).scale
    else:
        scale = 1.0
    mp = tp.matrices_c2w()
    mg = tg.matrices_c2w()
    trans_sq = []
    rot_sq = []
    for k in range(len(shared) - 1):
        dp = np.linalg.inv(mp[k]) @ mp[k + 1]
        dg = np.linalg.inv(mg[k]) @ mg[k + 1]
        trans_err = scale * dp[:3, 3] - dg[:3, 3]
        trans_sq.append(float(trans_err @ trans_err))
        rot_sq.append(_geodesic_deg(dp[:3, :3], dg[:3, :3]) ** 2)
    return float(np.sqrt(np.mean(trans_sq))), float(np.sqrt(np.mean(rot_sq)))


def _geodesic_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    # atan2(sin, cos) stays well-conditioned near 0 and pi, unlike arccos(trace)
    rel = r_a @ r_b.T
    sin_vec = 0.5 * np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    cos = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arctan2(np.linalg.norm(sin_vec), cos)))


def align_depth(pair: DepthPair) -> tuple[float, float]:
    """Least-squares (scale, shift) mapping pred onto gt over valid pixels."""
    mask = pair.effective_mask()
    p = np.asarray(pair.pred, dtype=np.float64)[mask]
    g = np.asarray(pair.gt, dtype=np.float64)[mask]
    if p.size < 2:
        raise ValueError(f"depth alignment needs at least 2 valid pixels, got {p.size}")
    # 2x2 normal equations for min_s,b sum (s*p + b - g)^2
    spp = float(p @ p)
    sp = float(p.sum())
    n = float(p.size)
    det = spp * n - sp * sp
    if det <= 1e-12 * max(spp * n, 1.0):
        raise ValueError("depth alignment is singular: prediction is constant over valid pixels")
    spg = float(p @ g)
    sg = float(g.sum())
    scale = (n * spg - sp * sg) / det
    shift = (spp * sg - sp * spg) / det
    return float(scale), float(shift)


def aligned_depth_errors(
    pred_aligned: np.ndarray, gt: np.ndarray, valid: np.ndarray
) -> tuple[float, float]:
    """AbsRel and delta<1.25 of an already-aligned prediction.

    Non-positive aligned predictions at valid pixels fail the ratio test and
    still contribute |p - g| / g to AbsRel; they never crash the metric.
    """
    mask = np.asarray(valid, dtype=bool) & (np.asarray(gt) > 0)
    p = np.asarray(pred_aligned, dtype=np.float64)[mask]
    g = np.asarray(gt, dtype=np.float64)[mask]
    if p.size == 0:
        raise ValueError("no valid pixels with positive ground truth")
    absrel = float(np.mean(np.abs(p - g) / g))
    pos = p > 0
    ratio = np.full(p.shape, np.inf)
    ratio[pos] = np.maximum(p[pos] / g[pos], g[pos] / p[pos])
    delta = float(np.mean(ratio < 1.25))
    return absrel, delta


def depth_metrics(pair: DepthPair, align: bool = True) -> tuple[float, float]:
    """(AbsRel, delta<1.25) over valid pixels, after scale/shift alignment."""
    if align:
        scale, shift = align_depth(pair)
        pred = scale * np.asarray(pair.pred, dtype=np.float64) + shift
    else:
        pred = np.asarray(pair.pred, dtype=np.float64)
    return aligned_depth_errors(pred, pair.gt, pair.effective_mask())


def trajectory_from_manifest(manifest: ViewManifest, source: str = "gt") -> Trajectory:
    """Assemble a trajectory from pose blobs, in manifest order.

    source="gt" reads each view's gt_pose; source="pred" reads the pose role
    from the view's tensors. Views without a pose are skipped.
    """
    ids: list[str] = []
    rots = []
    trans = []
    for rec in manifest.views:
        if source == "gt":
            blob = rec.gt_pose
        elif source == "pred":
            blob = rec.tensors.get(ROLE_POSE)
        else:
            raise ValueError(f"source must be gt or pred, got {source!r}")
        if blob is None:
            continue
        mat = np.asarray(blob.array, dtype=np.float64)
        ids.append(rec.view_id)
        rots.append(mat[:3, :3])
        trans.append(mat[:3, 3])
    if not ids:
        raise ValueError(f"manifest {manifest.set_id!r} has no {source} poses")
    return Trajectory(
        view_ids=ids,
        rotations=np.stack(rots),
        translations=np.stack(trans),
        convention=manifest.pose_convention,
    )


def depth_pairs_from_manifests(
    gt_manifest: ViewManifest, pred_manifest: ViewManifest
) -> dict[str, DepthPair]:
    """Match predicted depth blobs to gt depths (and optional gt-side masks)."""
    pairs: dict[str, DepthPair] = {}
    pred_by_id = {rec.view_id: rec for rec in pred_manifest.views}
    for rec in gt_manifest.views:
        if rec.gt_depth is None or rec.view_id not in pred_by_id:
            continue
        pred_rec = pred_by_id[rec.view_id]
        if ROLE_DEPTH not in pred_rec.tensors:
            continue
        gt_arr = rec.gt_depth.array
        pred_arr = pred_rec.tensors[ROLE_DEPTH].array
        if pred_arr.shape != gt_arr.shape:
            raise ValueError(
                f"view {rec.view_id!r}: predicted depth {pred_arr.shape} vs gt {gt_arr.shape}"
            )
        if ROLE_DEPTH_MASK in rec.tensors:
            valid = rec.tensors[ROLE_DEPTH_MASK].array != 0
        else:
            valid = np.ones(gt_arr.shape, dtype=bool)
        pairs[rec.view_id] = DepthPair(pred=pred_arr, gt=gt_arr, valid=valid)
    return pairs


@dataclass
class MetricSummary:
    """One evaluation's pose/depth metrics plus GT coverage."""

    ate: float | None = None
    rpe_trans: float | None = None
    rpe_rot: float | None = None
    absrel: float | None = None
    delta125: float | None = None
    coverage: float | None = None


def evaluate_predictions(gt_manifest: ViewManifest, pred_manifest: ViewManifest) -> MetricSummary:
    """All metrics over the intersection of predicted and GT views.

    Coverage is the fraction of GT-posed views the prediction actually covers,
    so aggressive filtering cannot silently inflate the pose metrics.
    """
    out = MetricSummary()
    gt_ids = [rec.view_id for rec in gt_manifest.views if rec.gt_pose is not None]
    if gt_ids:
        gt_traj = trajectory_from_manifest(gt_manifest, "gt")
        pred_traj = trajectory_from_manifest(pred_manifest, "pred")
        shared = [vid for vid in gt_traj.view_ids if vid in set(pred_traj.view_ids)]
        out.coverage = len(shared) / len(gt_ids)
        if len(shared) >= 3:
            out.ate = ate(pred_traj, gt_traj)
            out.rpe_trans, out.rpe_rot = rpe(pred_traj, gt_traj)
    pairs = depth_pairs_from_manifests(gt_manifest, pred_manifest)
    if pairs:
        per_view = [depth_metrics(pair) for pair in pairs.values()]
        out.absrel = float(np.mean([m[0] for m in per_view]))
        out.delta125 = float(np.mean([m[1] for m in per_view]))
    return out
