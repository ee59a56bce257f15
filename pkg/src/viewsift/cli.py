"""Command-line entry point: score -> select -> (optionally) evaluate.

Every subcommand is deterministic given its inputs and seeds, and every
output file embeds (or sidecars) the config that produced it. Failures exit
nonzero with a single machine-parseable line on stderr:
``error: <ExceptionType>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ViewsiftError
from .evalmetrics import evaluate_predictions
from .probe import layer_gap_curve
from .protocol import (
    LEVEL_NAMES,
    PROFILES,
    RunConfig,
    aggregate_csv,
    aggregate_reports,
    run_trials,
)
from .scoring import (
    MODE_MINMAX,
    PROBE_ATTENTION,
    PROBE_FEATURE,
    PROBE_FUSED,
    canonical_mode,
    score_matrix,
)
from .selection import (
    DEFAULT_ALPHA,
    DEFAULT_TAU,
    FusionConfig,
    fuse_scores,
    normalize_for_fusion,
    select_views,
    selection_report,
    write_work_orders,
)
from .synth import SynthSpec, gen_depth_pair, gen_feature_set, gen_qk_set, gen_trajectory
from .tensorstore import (
    ROLE_DEPTH,
    ROLE_DEPTH_MASK,
    ROLE_POSE,
    TokenGrid,
    ViewManifest,
    ViewRecord,
    load_manifest,
    make_blob,
    save_set,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewsift",
        description="Score candidate views, reject distractors, and evaluate the effect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_score = sub.add_parser("score", help="write the anchor x context score matrix as CSV")
    _manifest_arg(p_score)
    p_score.add_argument("--probe", choices=[PROBE_ATTENTION, PROBE_FEATURE], default=PROBE_FEATURE)
    _mode_arg(p_score)
    p_score.add_argument("--out", required=True, help="CSV output path (sidecar .meta.json added)")

    p_sel = sub.add_parser("select", help="threshold one anchor's scores into a kept-view set")
    _manifest_arg(p_sel)
    p_sel.add_argument(
        "--probe", choices=[PROBE_ATTENTION, PROBE_FEATURE, PROBE_FUSED], default=PROBE_FEATURE
    )
    _mode_arg(p_sel)
    p_sel.add_argument("--tau", type=float, default=None, help="threshold (default: probe's published value)")
    p_sel.add_argument("--alpha", type=float, default=None, help="fusion weight, only with --probe fused")
    p_sel.add_argument("--anchor", default=None, help="anchor view id (default: first view)")
    p_sel.add_argument("--out", required=True, help="output directory")

    p_probe = sub.add_parser("probe", help="layer-wise clean/distractor gap curve")
    p_probe.add_argument("--manifest", action="append", required=True, dest="manifests",
                         help="one manifest per probed layer (repeatable)")
    p_probe.add_argument("--probe", choices=[PROBE_ATTENTION, PROBE_FEATURE], default=PROBE_FEATURE)
    _mode_arg(p_probe)
    p_probe.add_argument("--anchor", default=None)
    p_probe.add_argument("--out", required=True, help="curve CSV path")

    p_eval = sub.add_parser("eval", help="pose/depth metrics of a prediction manifest against GT")
    p_eval.add_argument("--manifest", required=True, help="manifest carrying gt_pose/gt_depth refs")
    p_eval.add_argument("--pred", required=True, help="prediction manifest (pose/depth tensors)")
    p_eval.add_argument("--method", default="viewsift", help="method column in the report")
    p_eval.add_argument("--out", required=True, help="metrics CSV path")

    p_trials = sub.add_parser("trials", help="run the noise-injection protocol")
    p_trials.add_argument("--run-spec", default=None, help="JSON run spec (overrides other flags)")
    p_trials.add_argument("--manifest", default=None)
    p_trials.add_argument("--profile", choices=sorted(PROFILES), default="default")
    p_trials.add_argument("--level", choices=LEVEL_NAMES, action="append", dest="levels")
    p_trials.add_argument("--trials", type=int, default=10)
    p_trials.add_argument("--seed", type=int, default=0)
    p_trials.add_argument(
        "--probe", choices=[PROBE_ATTENTION, PROBE_FEATURE, PROBE_FUSED], default=PROBE_FEATURE
    )
    _mode_arg(p_trials)
    p_trials.add_argument("--tau", type=float, default=None)
    p_trials.add_argument("--alpha", type=float, default=None)
    p_trials.add_argument("--out", required=True, help="output directory")

    p_synth = sub.add_parser("synth", help="generate synthetic sets with known ground truth")
    synth_sub = p_synth.add_subparsers(dest="generator", required=True)
    for name in ("features", "qk"):
        g = synth_sub.add_parser(name)
        g.add_argument("--clean", type=int, default=30)
        g.add_argument("--distractors", type=int, default=10)
        g.add_argument("--grid", default="4x4", help="patch grid, e.g. 4x4")
        g.add_argument("--registers", type=int, default=1, help="special tokens per view")
        g.add_argument("--dim", type=int, default=64, help="feature dim (features) / d_head (qk)")
        g.add_argument("--sigma", type=float, default=0.0)
        g.add_argument("--seed", type=int, default=0)
        g.add_argument("--out", required=True)
        if name == "qk":
            g.add_argument("--heads", type=int, default=2)
            g.add_argument("--mass", type=float, default=0.9, help="planted clean attention mass")
    g = synth_sub.add_parser("trajectory")
    g.add_argument("--poses", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scale", type=float, default=None)
    g.add_argument("--center-noise", type=float, default=0.0)
    g.add_argument("--rot-perturb", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g = synth_sub.add_parser("depth")
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--affine", default="1,0", help="a,b with pred = a*gt + b")
    g.add_argument("--mask-fraction", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    return parser


def _manifest_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="set manifest JSON")


def _mode_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["raw", "minmax"], default="minmax",
                   help="attention score mode (ignored by the feature probe)")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ViewsiftError, ValueError, OSError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "score":
        return _cmd_score(args)
    if args.command == "select":
        return _cmd_select(args)
    if args.command == "probe":
        return _cmd_probe(args)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "trials":
        return _cmd_trials(args)
    if args.command == "synth":
        return _cmd_synth(args)
    raise ValueError(f"unknown command {args.command!r}")


def _cmd_score(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    mode = canonical_mode(args.mode)
    matrix = score_matrix(manifest, args.probe, mode=mode)
    config = {"command": "score", "manifest": str(args.manifest), "probe": args.probe, "mode": mode}
    matrix.to_csv(args.out, config=config)
    print(f"wrote {args.out}")
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    if args.alpha is not None and args.probe != PROBE_FUSED:
        raise ValueError(f"--alpha only applies to --probe fused, not {args.probe!r}")
    manifest = load_manifest(args.manifest)
    anchor = args.anchor if args.anchor is not None else manifest.ids()[0]
    mode = canonical_mode(args.mode)
    tau = DEFAULT_TAU[args.probe] if args.tau is None else args.tau
    if args.probe == PROBE_FUSED:
        alpha = DEFAULT_ALPHA if args.alpha is None else args.alpha
        att_row = score_matrix(manifest, PROBE_ATTENTION, mode=mode).row(anchor)
        feat_row = score_matrix(manifest, PROBE_FEATURE).row(anchor)
        fused = fuse_scores(
            normalize_for_fusion(att_row),
            normalize_for_fusion(feat_row),
            FusionConfig(alpha=alpha, tau_agg=tau),
        )
        sel = select_views(fused, anchor, tau, probe=PROBE_FUSED)
    else:
        row = score_matrix(manifest, args.probe, mode=mode).row(anchor)
        sel = select_views(row, anchor, tau, probe=args.probe)
    report = selection_report(sel, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "command": "select",
        "manifest": str(args.manifest),
        "probe": args.probe,
        "mode": mode,
        "tau": tau,
        "alpha": args.alpha,
        "anchor": anchor,
    }
    sel_doc = {
        "anchor": sel.anchor,
        "kept": sel.kept,
        "threshold": sel.threshold,
        "probe": sel.probe,
        "per_view": {vid: {"score": s, "verdict": v} for vid, (s, v) in sel.per_view.items()},
        "kept_by_label": report.kept_by_label,
        "rejected_by_label": report.rejected_by_label,
        "config": config,
    }
    (out / "selection.json").write_text(
        json.dumps(sel_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    write_work_orders([report.work_order], out / "work_order.json")
    print(f"kept {len(sel.kept)}/{len(manifest.views)} views; wrote {out}/selection.json")
    return 0


def _cmd_probe(args: argparse.Namespace) -> int:
    manifests = [load_manifest(p) for p in args.manifests]
    curve = layer_gap_curve(
        manifests, probe=args.probe, mode=canonical_mode(args.mode), anchor=args.anchor
    )
    config = {
        "command": "probe",
        "manifests": [str(p) for p in args.manifests],
        "probe": args.probe,
        "mode": canonical_mode(args.mode),
    }
    curve.to_csv(args.out, config=config)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    gt_manifest = load_manifest(args.manifest)
    pred_manifest = load_manifest(args.pred)
    summary = evaluate_predictions(gt_manifest, pred_manifest)
    config = {
        "command": "eval",
        "manifest": str(args.manifest),
        "pred": str(args.pred),
        "method": args.method,
    }
    cols = ["set_id", "trial", "noise_level", "method", "ate", "rpe_trans", "rpe_rot",
            "absrel", "delta125", "coverage"]
    vals = [gt_manifest.set_id, "", "", args.method]
    for name in ("ate", "rpe_trans", "rpe_rot", "absrel", "delta125", "coverage"):
        v = getattr(summary, name)
        vals.append("" if v is None else repr(float(v)))
    text = "# config: " + json.dumps(config, sort_keys=True) + "\n"
    text += ",".join(cols) + "\n" + ",".join(vals) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def _cmd_trials(args: argparse.Namespace) -> int:
    if args.alpha is not None and args.probe != PROBE_FUSED:
        raise ValueError(f"--alpha only applies to --probe fused, not {args.probe!r}")
    if args.run_spec:
        cfg = RunConfig.from_json(args.run_spec)
    else:
        if not args.manifest:
            raise ValueError("trials needs --run-spec or --manifest")
        cfg = RunConfig(
            manifest_path=args.manifest,
            profile=args.profile,
            levels=args.levels or list(LEVEL_NAMES),
            n_trials=args.trials,
            base_seed=args.seed,
            probe=args.probe,
            mode=canonical_mode(args.mode),
            tau=args.tau,
            alpha=DEFAULT_ALPHA if args.alpha is None else args.alpha,
        )
    reports = run_trials(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (out / f"trial_{r.level}_{r.trial_index:02d}.json").write_text(r.to_json(), encoding="utf-8")
    rows = aggregate_reports(reports)
    aggregate_csv(rows, out / "aggregate.csv", config=cfg.describe())
    for row in rows:
        print(
            f"{row['level']}: success_rate={row['success_rate']:.3f} "
            f"clean_retention={row['clean_retention']:.3f} over {row['n_trials']} trials"
        )
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.generator in ("features", "qk"):
        try:
            h, w = (int(tok) for tok in args.grid.lower().split("x"))
        except ValueError:
            raise ValueError(f"--grid must look like 4x4, got {args.grid!r}") from None
        feature_dim = args.dim if args.generator == "features" else 1
        grid = TokenGrid(
            h_patches=h,
            w_patches=w,
            patch_start_idx=args.registers,
            tokens_per_image=args.registers + h * w,
            feature_dim=feature_dim,
        )
        spec = SynthSpec(
            n_clean=args.clean,
            n_distractor=args.distractors,
            grid=grid,
            noise_sigma=args.sigma,
            seed=args.seed,
        )
        if args.generator == "features":
            gen_feature_set(spec, out_dir=args.out)
        else:
            gen_qk_set(spec, planted_mass=args.mass, heads=args.heads, d_head=args.dim,
                       out_dir=args.out)
    elif args.generator == "trajectory":
        gt, pred, planted = gen_trajectory(
            args.poses,
            seed=args.seed,
            scale=args.scale,
            center_noise_radius=args.center_noise,
            rot_perturb_deg=args.rot_perturb,
        )
        _save_trajectory_set(gt, pred, planted, Path(args.out), args)
    elif args.generator == "depth":
        try:
            a, b = (float(tok) for tok in args.affine.split(","))
        except ValueError:
            raise ValueError(f"--affine must look like 2,5 got {args.affine!r}") from None
        pair = gen_depth_pair(args.height, args.width, affine=(a, b), seed=args.seed,
                              mask_fraction=args.mask_fraction)
        _save_depth_set(pair, Path(args.out), args)
    config = {k: v for k, v in vars(args).items() if k != "command"}
    (Path(args.out) / "synth_config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8"
    )
    print(f"wrote synthetic set to {args.out}")
    return 0


_TRIVIAL_GRID = TokenGrid(
    h_patches=1, w_patches=1, patch_start_idx=0, tokens_per_image=1, feature_dim=1
)


def _save_trajectory_set(gt, pred, planted, out: Path, args: argparse.Namespace) -> None:
    import numpy as np

    records = []
    for i, vid in enumerate(gt.view_ids):
        pred_mat = np.eye(4, dtype=np.float32)
        pred_mat[:3, :3] = pred.rotations[i]
        pred_mat[:3, 3] = pred.translations[i]
        gt_mat = np.eye(4, dtype=np.float32)
        gt_mat[:3, :3] = gt.rotations[i]
        gt_mat[:3, 3] = gt.translations[i]
        records.append(
            ViewRecord(
                view_id=vid,
                tensors={ROLE_POSE: make_blob(ROLE_POSE, pred_mat, vid)},
                gt_pose=make_blob(ROLE_POSE, gt_mat, vid),
            )
        )
    manifest = ViewManifest(
        set_id=f"synth-traj-s{args.seed}",
        grid=_TRIVIAL_GRID,
        layer_of_interest=0,
        views=records,
        pose_convention=gt.convention,
    )
    save_set(manifest, out)
    oracle = {
        "scale": planted.sim3.scale,
        "rotation": planted.sim3.rotation.tolist(),
        "translation": planted.sim3.translation.tolist(),
        "center_noise_radius": planted.center_noise_radius,
        "rot_perturb_deg": planted.rot_perturb_deg,
    }
    (out / "trajectory_oracle.json").write_text(
        json.dumps(oracle, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _save_depth_set(pair, out: Path, args: argparse.Namespace) -> None:
    vid = "view_000"
    rec = ViewRecord(
        view_id=vid,
        tensors={
            ROLE_DEPTH: make_blob(ROLE_DEPTH, pair.pred, vid),
            ROLE_DEPTH_MASK: make_blob(ROLE_DEPTH_MASK, pair.valid.astype("float32"), vid),
        },
        gt_depth=make_blob(ROLE_DEPTH, pair.gt, vid),
    )
    manifest = ViewManifest(
        set_id=f"synth-depth-s{args.seed}", grid=_TRIVIAL_GRID, layer_of_interest=0, views=[rec]
    )
    save_set(manifest, out)


if __name__ == "__main__":
    sys.exit(main())
