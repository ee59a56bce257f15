import numpy as np
import pytest

from viewsift.protocol import (
    RunConfig,
    SeededSampler,
    aggregate_csv,
    aggregate_reports,
    noise_level,
    run_trials,
    sample_trial,
    success_rate,
)
from viewsift.selection import select_views
from viewsift.synth import SynthSpec, gen_feature_set
from viewsift.tensorstore import TokenGrid


def pools(n_clean=60, n_noise=80):
    return [f"c{i}" for i in range(n_clean)], [f"d{i}" for i in range(n_noise)]


def test_level_profiles():
    assert (noise_level("small").n_clean, noise_level("small").n_noise) == (30, 10)
    assert (noise_level("medium").n_clean, noise_level("medium").n_noise) == (30, 30)
    assert (noise_level("large").n_clean, noise_level("large").n_noise) == (30, 50)
    eth = [noise_level(n, "eth3d") for n in ("small", "medium", "large")]
    assert [(l.n_clean, l.n_noise) for l in eth] == [(14, 5), (14, 14), (14, 30)]
    with pytest.raises(ValueError, match="profile"):
        noise_level("small", "imaginary")


def test_trial_sizes_per_level():
    clean, noise = pools()
    for name, size in (("small", 40), ("medium", 60), ("large", 80)):
        trial = sample_trial(clean, noise, noise_level(name), seed=5)
        assert len(trial.combined) == size
        assert len(trial.clean_ids) == noise_level(name).n_clean
    for name, size in (("small", 19), ("medium", 28), ("large", 44)):
        trial = sample_trial(clean, noise, noise_level(name, "eth3d"), seed=5)
        assert len(trial.combined) == size


def test_same_seed_identical_trial():
    clean, noise = pools()
    t1 = sample_trial(clean, noise, noise_level("medium"), seed=123)
    t2 = sample_trial(clean, noise, noise_level("medium"), seed=123)
    assert t1 == t2
    t3 = sample_trial(clean, noise, noise_level("medium"), seed=124)
    assert t3.combined != t1.combined


def test_trial_disjointness_and_membership():
    clean, noise = pools()
    for seed in range(25):
        trial = sample_trial(clean, noise, noise_level("large"), seed=seed)
        assert not set(trial.clean_ids) & set(trial.distractor_ids)
        assert set(trial.combined) == set(trial.clean_ids) | set(trial.distractor_ids)
        assert len(set(trial.combined)) == len(trial.combined)


def test_overlapping_pools_rejected():
    with pytest.raises(ValueError, match="overlap"):
        sample_trial(["a", "b"], ["b", "c"], noise_level("small"), seed=0)


def test_pool_too_small():
    with pytest.raises(ValueError, match="pool has"):
        sample_trial(["a"], ["b"], noise_level("small"), seed=0)


def test_splitmix_stream_is_pinned():
    # frozen reference values: the sampling stream is a compatibility contract
    s = SeededSampler(0)
    assert [s.next_u64() for _ in range(3)] == [
        16294208416658607535,
        7960286522194355700,
        487617019471545679,
    ]
    s42 = SeededSampler(42)
    assert s42.next_u64() == 13679457532755275413


def test_sampler_uniformity_smoke():
    counts = {x: 0 for x in "abcd"}
    for seed in range(4000):
        pick = SeededSampler(seed).sample(list("abcd"), 1)[0]
        counts[pick] += 1
    for c in counts.values():
        assert 850 <= c <= 1150


def _selection(scores, anchor, tau):
    return select_views(scores, anchor, tau)


def test_success_rate_basic():
    labels = {f"c{i}": "clean" for i in range(5)} | {f"d{i}": "distractor" for i in range(10)}
    scores = {vid: (1.0 if vid.startswith("c") else 0.0) for vid in labels}
    for i in range(2):  # two distractors sneak over the threshold
        scores[f"d{i}"] = 0.9
    stats = success_rate(_selection(scores, "c0", 0.65), labels)
    assert stats.success_rate == pytest.approx(0.8)
    assert stats.clean_retention == 1.0


def test_success_rate_all_kept():
    labels = {"c0": "clean", "d0": "distractor", "d1": "distractor"}
    stats = success_rate(_selection({"c0": 1.0, "d0": 1.0, "d1": 1.0}, "c0", 0.5), labels)
    assert stats.success_rate == 0.0


def test_success_rate_anchor_only_exposes_degenerate_filter():
    labels = {f"c{i}": "clean" for i in range(30)} | {f"d{i}": "distractor" for i in range(10)}
    scores = {vid: 0.0 for vid in labels}
    stats = success_rate(_selection(scores, "c0", 0.5), labels)
    assert stats.success_rate == 1.0
    assert stats.clean_retention == 0.0


def test_success_rate_needs_distractors():
    with pytest.raises(ValueError, match="distractor"):
        success_rate(_selection({"c0": 1.0}, "c0", 0.5), {"c0": "clean"})


def big_synth_manifest(seed=0, n_clean=35, n_distractor=55):
    grid = TokenGrid(4, 4, 1, 17, 64)
    spec = SynthSpec(n_clean=n_clean, n_distractor=n_distractor, grid=grid,
                     noise_sigma=0.1, seed=seed)
    return gen_feature_set(spec)


def test_run_trials_end_to_end():
    manifest = big_synth_manifest()
    cfg = RunConfig(levels=["small"], n_trials=3, base_seed=7, probe="feature", tau=0.65)
    reports = run_trials(cfg, manifest=manifest)
    assert len(reports) == 3
    for r in reports:
        assert len(r.combined) == 40
        assert r.success_rate == 1.0
        assert r.clean_retention == 1.0
        assert r.anchor in r.kept
        assert r.metrics is None


def test_run_trials_reports_byte_identical():
    manifest = big_synth_manifest()
    cfg = RunConfig(levels=["small", "medium"], n_trials=2, base_seed=11, tau=0.65)
    r1 = run_trials(cfg, manifest=manifest)
    r2 = run_trials(cfg, manifest=manifest)
    blob1 = "".join(r.to_json() for r in r1).encode()
    blob2 = "".join(r.to_json() for r in r2).encode()
    assert blob1 == blob2


def test_run_trials_seed_schedule():
    manifest = big_synth_manifest()
    cfg = RunConfig(levels=["small"], n_trials=3, base_seed=100, tau=0.65)
    reports = run_trials(cfg, manifest=manifest)
    assert [r.seed for r in reports] == [100, 101, 102]


def test_aggregate_mean_matches_brute_force():
    manifest = big_synth_manifest()
    cfg = RunConfig(levels=["small"], n_trials=4, base_seed=3, tau=0.99)
    reports = run_trials(cfg, manifest=manifest)
    rows = aggregate_reports(reports)
    assert len(rows) == 1
    brute = sum(r.success_rate for r in reports) / len(reports)
    assert abs(rows[0]["success_rate"] - brute) < 1e-12


def test_aggregate_csv_layout(tmp_path):
    manifest = big_synth_manifest()
    cfg = RunConfig(levels=["small"], n_trials=2, base_seed=0, tau=0.65)
    rows = aggregate_reports(run_trials(cfg, manifest=manifest))
    path = tmp_path / "agg.csv"
    aggregate_csv(rows, path, config=cfg.describe())
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config:")
    assert lines[1].startswith("level,n_trials,success_rate,clean_retention,ate")
    assert lines[2].startswith("small,2,")


def test_run_config_from_json(tmp_path):
    spec = {
        "manifest": "m.json",
        "profile": "eth3d",
        "levels": ["large"],
        "n_trials": 4,
        "base_seed": 9,
        "probe": "attention",
        "tau": 0.05,
    }
    import json

    path = tmp_path / "run.json"
    path.write_text(json.dumps(spec))
    cfg = RunConfig.from_json(path)
    assert cfg.profile == "eth3d"
    assert cfg.levels == ["large"]
    assert cfg.resolved_tau() == 0.05
    assert cfg.n_trials == 4


def test_error_tagged_with_trial():
    manifest = big_synth_manifest(n_clean=35, n_distractor=55)
    # distractor pool below the level requirement -> failure names the trial? no:
    # pool checks happen before the sub-manifest exists, so pass a scoring failure
    cfg = RunConfig(levels=["small"], n_trials=1, base_seed=0, probe="fused", tau=0.4)
    with pytest.raises(Exception, match="trial"):
        run_trials(cfg, manifest=manifest)  # fused needs Q/K, synth set has features only


def test_predictions_for_some_trials_only(tmp_path):
    import numpy as np

    from viewsift.synth import gen_trajectory
    from viewsift.tensorstore import (
        ROLE_POSE,
        ViewManifest,
        ViewRecord,
        make_blob,
        save_set,
    )

    base = big_synth_manifest(n_clean=35, n_distractor=55)
    gt, _, _ = gen_trajectory(len(base.views), seed=9)
    for rec, rot, trans in zip(base.views, gt.rotations, gt.translations):
        mat = np.eye(4, dtype=np.float32)
        mat[:3, :3] = rot
        mat[:3, 3] = trans
        rec.gt_pose = make_blob(ROLE_POSE, mat, rec.view_id)
    base.pose_convention = "world_from_camera"

    cfg = RunConfig(levels=["small"], n_trials=2, base_seed=4, tau=0.65)
    dry = run_trials(cfg, manifest=base)

    # build a perfect prediction manifest for trial 0's kept views only
    kept = dry[0].kept
    pred_views = []
    for vid in kept:
        blob = base.get(vid).gt_pose
        pred_views.append(ViewRecord(view_id=vid, tensors={ROLE_POSE: blob}))
    pred_manifest = ViewManifest(
        set_id="pred", grid=base.grid, layer_of_interest=0, views=pred_views,
        pose_convention="world_from_camera",
    )
    pred_path = save_set(pred_manifest, tmp_path / "pred0")

    cfg.predictions = {"small/0": str(pred_path)}
    reports = run_trials(cfg, manifest=base)
    assert reports[0].metrics is not None
    assert reports[0].metrics["ate"] == pytest.approx(0.0, abs=1e-9)
    assert reports[0].metrics["coverage"] == pytest.approx(len(kept) / 40)
    assert reports[1].metrics is None  # selection-only fields, no crash
