import math

import numpy as np
import pytest

from viewsift.errors import DegenerateInputError, ManifestError
from viewsift.scoring import (
    MODE_MINMAX,
    MODE_RAW,
    ScoreMatrix,
    attention_matrix_from_qk,
    attention_view_scores,
    feature_correlation_map,
    feature_view_score,
    score_matrix,
)
from viewsift.tensorstore import TokenGrid, ViewManifest, ViewRecord, make_blob


# ---- independent oracles -------------------------------------------------

def brute_softmax_qk(q, k, d_head):
    """Row-by-row softmax(QK^T / sqrt(d)) with explicit loops."""
    heads, n_q, _ = q.shape
    t_k = k.shape[1]
    out = np.zeros((heads, n_q, t_k))
    for h in range(heads):
        for i in range(n_q):
            logits = [float(np.dot(q[h, i], k[h, j])) / math.sqrt(d_head) for j in range(t_k)]
            m = max(logits)
            exps = [math.exp(v - m) for v in logits]
            z = sum(exps)
            for j in range(t_k):
                out[h, i, j] = exps[j] / z
    return out


def brute_view_means(attn, grid, n_views):
    """Per-view patch-slice means via explicit index arithmetic."""
    per_token = attn.mean(axis=0).mean(axis=0)
    means = []
    for j in range(n_views):
        total = 0.0
        for p in range(grid.n_patches):
            total += per_token[j * grid.tokens_per_image + grid.patch_start_idx + p]
        means.append(total / grid.n_patches)
    return means


def brute_correlation(f_i, f_j):
    h, w, d = f_i.shape
    flat_i = f_i.reshape(-1, d).astype(np.float64)
    flat_j = f_j.reshape(-1, d).astype(np.float64)
    hw = h * w
    out = np.zeros((hw, hw))
    for u in range(hw):
        for v in range(hw):
            a = flat_i[u] / np.linalg.norm(flat_i[u])
            b = flat_j[v] / np.linalg.norm(flat_j[v])
            out[u, v] = float(np.dot(a, b))
    return out


# ---- attention_matrix_from_qk --------------------------------------------

def test_uniform_logits_give_uniform_row():
    q = np.ones((1, 1, 4), dtype=np.float32)
    k = np.ones((1, 2, 4), dtype=np.float32)
    attn = attention_matrix_from_qk(q, k, 4)
    np.testing.assert_allclose(attn[0, 0], [0.5, 0.5], atol=1e-12)


def test_qk_matches_brute_force_softmax():
    rng = np.random.default_rng(7)
    q = rng.normal(size=(2, 4, 8)).astype(np.float32)
    k = rng.normal(size=(2, 20, 8)).astype(np.float32)
    attn = attention_matrix_from_qk(q, k, 8)
    oracle = brute_softmax_qk(q.astype(np.float64), k.astype(np.float64), 8)
    np.testing.assert_allclose(attn, oracle, atol=1e-6)


def test_rows_sum_to_one():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(3, 5, 8)) * 10  # large logits, still stable
    k = rng.normal(size=(3, 30, 8)) * 10
    attn = attention_matrix_from_qk(q, k, 8)
    np.testing.assert_allclose(attn.sum(axis=2), 1.0, atol=1e-5)


def test_d_head_mismatch():
    with pytest.raises(ValueError, match="d_head"):
        attention_matrix_from_qk(np.zeros((1, 2, 8)), np.zeros((1, 4, 16)), 8)


# ---- attention_view_scores -----------------------------------------------

def grid_no_registers(hw_side=2):
    n = hw_side * hw_side
    return TokenGrid(hw_side, hw_side, 0, n, 1)


def test_uniform_attention_two_views():
    grid = grid_no_registers(2)
    hw = grid.n_patches
    t_k = 2 * grid.tokens_per_image
    attn = np.full((1, hw, t_k), 1.0 / t_k)
    scores = attention_view_scores(attn, grid, 2, mode=MODE_RAW)
    assert scores.scores["0"] == pytest.approx(1.0 / (2 * hw), abs=1e-12)
    assert scores.scores["1"] == pytest.approx(1.0 / (2 * hw), abs=1e-12)


def test_one_hot_mass_on_view0():
    grid = grid_no_registers(2)
    hw = grid.n_patches
    t_k = 2 * grid.tokens_per_image
    attn = np.zeros((1, hw, t_k))
    attn[:, :, :hw] = 1.0 / hw  # all mass uniformly on view 0's patch tokens
    raw = attention_view_scores(attn, grid, 2, mode=MODE_RAW)
    assert raw.scores["0"] == pytest.approx(1.0 / hw, abs=1e-12)
    assert raw.scores["1"] == 0.0
    norm = attention_view_scores(attn, grid, 2, mode=MODE_MINMAX)
    assert norm.scores["0"] == pytest.approx(1.0, abs=1e-12)
    assert norm.scores["1"] == 0.0


def test_view_scores_match_index_oracle():
    grid = TokenGrid(2, 2, 2, 6, 1)  # two register tokens per view
    rng = np.random.default_rng(11)
    n_views = 3
    t_k = n_views * grid.tokens_per_image
    logits = rng.normal(size=(2, grid.n_patches, t_k))
    attn = np.exp(logits)
    attn /= attn.sum(axis=2, keepdims=True)
    scores = attention_view_scores(attn, grid, n_views, mode=MODE_RAW)
    oracle = brute_view_means(attn, grid, n_views)
    for j in range(n_views):
        assert scores.scores[str(j)] == pytest.approx(oracle[j], abs=1e-6)


def test_token_count_mismatch():
    grid = grid_no_registers(2)
    with pytest.raises(ValueError, match="key tokens"):
        attention_view_scores(np.zeros((1, 4, 9)), grid, 2)


def test_minmax_degenerate_constant():
    grid = grid_no_registers(2)
    t_k = 2 * grid.tokens_per_image
    attn = np.full((1, 4, t_k), 1.0 / t_k)
    with pytest.raises(DegenerateInputError, match="max == min"):
        attention_view_scores(attn, grid, 2, mode=MODE_MINMAX)


def test_minmax_preserves_raw_ordering():
    grid = grid_no_registers(2)
    rng = np.random.default_rng(5)
    n_views = 4
    t_k = n_views * grid.tokens_per_image
    attn = rng.dirichlet(np.ones(t_k), size=(2, grid.n_patches))
    raw = attention_view_scores(attn, grid, n_views, mode=MODE_RAW)
    norm = attention_view_scores(attn, grid, n_views, mode=MODE_MINMAX)
    raw_order = sorted(raw.scores, key=raw.scores.get)
    norm_order = sorted(norm.scores, key=norm.scores.get)
    assert raw_order == norm_order


# ---- feature correlation --------------------------------------------------

def test_constant_unit_vector_maps():
    f = np.zeros((2, 2, 4), dtype=np.float32)
    f[..., 0] = 1.0
    c = feature_correlation_map(f, f)
    np.testing.assert_allclose(c, 1.0, atol=1e-12)
    assert feature_view_score(c) == pytest.approx(1.0)


def test_orthogonal_maps_are_zero():
    f_i = np.zeros((2, 2, 4), dtype=np.float32)
    f_j = np.zeros((2, 2, 4), dtype=np.float32)
    f_i[..., 0] = 1.0
    f_j[..., 1] = 1.0
    c = feature_correlation_map(f_i, f_j)
    np.testing.assert_allclose(c, 0.0, atol=1e-12)


def test_correlation_matches_double_loop():
    rng = np.random.default_rng(13)
    f_i = rng.normal(size=(4, 4, 8)).astype(np.float32)
    f_j = rng.normal(size=(4, 4, 8)).astype(np.float32)
    c = feature_correlation_map(f_i, f_j)
    np.testing.assert_allclose(c, brute_correlation(f_i, f_j), atol=1e-6)
    assert c.min() >= -1 - 1e-9 and c.max() <= 1 + 1e-9


def test_zero_norm_position_identified():
    f = np.zeros((2, 2, 4), dtype=np.float32)
    f[..., 0] = 1.0
    f[1, 0, :] = 0.0  # position 2 in row-major order
    with pytest.raises(ValueError, match="position 2"):
        feature_correlation_map(f, f)


def test_view_score_is_plain_mean():
    rng = np.random.default_rng(17)
    c = rng.uniform(-1, 1, size=(9, 9))
    assert feature_view_score(c) == pytest.approx(c.sum() / 81.0, abs=1e-9)
    half = np.concatenate([np.ones(8), -np.ones(8)]).reshape(4, 4)
    assert feature_view_score(half) == 0.0


# ---- score_matrix ----------------------------------------------------------

def feature_manifest(features_by_id, grid, labels=None, layer=0):
    records = []
    for i, (vid, feat) in enumerate(features_by_id.items()):
        label = labels[i] if labels else "unknown"
        records.append(
            ViewRecord(view_id=vid, label=label, tensors={"features": make_blob("features", feat, vid)})
        )
    return ViewManifest(set_id="t", grid=grid, layer_of_interest=layer, views=records)


def random_feature_manifest(seed, n_views=3, side=2, d=8):
    rng = np.random.default_rng(seed)
    grid = TokenGrid(side, side, 0, side * side, d)
    feats = {f"v{i}": rng.normal(size=(side, side, d)).astype(np.float32) for i in range(n_views)}
    return feature_manifest(feats, grid)


def test_identical_views_score_one():
    grid = TokenGrid(2, 2, 0, 4, 4)
    f = np.zeros((2, 2, 4), dtype=np.float32)
    f[..., 0] = 1.0
    m = feature_manifest({"a": f, "b": f.copy()}, grid)
    sm = score_matrix(m, "feature")
    np.testing.assert_allclose(sm.values, 1.0, atol=1e-12)


def test_feature_matrix_matches_dense_map_oracle():
    manifest = random_feature_manifest(23)
    sm = score_matrix(manifest, "feature")
    for i, vi in enumerate(manifest.ids()):
        for j, vj in enumerate(manifest.ids()):
            dense = feature_correlation_map(
                manifest.blob(vi, "features"), manifest.blob(vj, "features")
            )
            assert sm.values[i, j] == pytest.approx(feature_view_score(dense), abs=1e-9)


def test_feature_matrix_symmetric():
    sm = score_matrix(random_feature_manifest(29, n_views=4), "feature")
    assert np.abs(sm.values - sm.values.T).max() <= 1e-6


def test_feature_scale_invariance():
    manifest = random_feature_manifest(31)
    sm = score_matrix(manifest, "feature")
    rng = np.random.default_rng(99)
    scaled = {}
    for vid in manifest.ids():
        feat = manifest.blob(vid, "features").array.astype(np.float64)
        gains = rng.uniform(0.1, 10.0, size=feat.shape[:2] + (1,))
        scaled[vid] = (feat * gains).astype(np.float32)
    m2 = feature_manifest(scaled, manifest.grid)
    sm2 = score_matrix(m2, "feature")
    np.testing.assert_allclose(sm.values, sm2.values, atol=1e-6)


def test_permutation_equivariance_feature():
    manifest = random_feature_manifest(37, n_views=4)
    sm = score_matrix(manifest, "feature")
    perm = [2, 0, 3, 1]
    permuted = ViewManifest(
        set_id="t",
        grid=manifest.grid,
        layer_of_interest=0,
        views=[manifest.views[i] for i in perm],
    )
    sm_p = score_matrix(permuted, "feature")
    for a, ia in enumerate(perm):
        for b, jb in enumerate(perm):
            assert sm_p.values[a, b] == pytest.approx(sm.values[ia, jb], abs=1e-12)


def qk_manifest(seed, n_views=3, heads=2, d_head=8, side=2, registers=1):
    rng = np.random.default_rng(seed)
    tpi = registers + side * side
    grid = TokenGrid(side, side, registers, tpi, 1)
    records = []
    for i in range(n_views):
        vid = f"v{i}"
        q = rng.normal(size=(heads, tpi, d_head)).astype(np.float32)
        k = rng.normal(size=(heads, tpi, d_head)).astype(np.float32)
        records.append(
            ViewRecord(
                view_id=vid,
                tensors={
                    "queries": make_blob("queries", q, vid),
                    "keys": make_blob("keys", k, vid),
                },
            )
        )
    return ViewManifest(set_id="qk", grid=grid, layer_of_interest=0, views=records)


def test_attention_matrix_from_qk_manifest_matches_oracle():
    manifest = qk_manifest(41)
    grid = manifest.grid
    sm = score_matrix(manifest, "attention", mode=MODE_RAW)
    k_all = np.concatenate([manifest.blob(v, "keys").array for v in manifest.ids()], axis=1)
    for i, vid in enumerate(manifest.ids()):
        q = manifest.blob(vid, "queries").array[:, grid.patch_start_idx :, :]
        attn = brute_softmax_qk(q.astype(np.float64), k_all.astype(np.float64), q.shape[2])
        oracle = brute_view_means(attn, grid, len(manifest.ids()))
        np.testing.assert_allclose(sm.values[i], oracle, atol=1e-6)


def test_attention_permutation_equivariance():
    manifest = qk_manifest(43, n_views=4)
    sm = score_matrix(manifest, "attention", mode=MODE_MINMAX)
    perm = [3, 1, 0, 2]
    permuted = ViewManifest(
        set_id="qk", grid=manifest.grid, layer_of_interest=0,
        views=[manifest.views[i] for i in perm],
    )
    sm_p = score_matrix(permuted, "attention", mode=MODE_MINMAX)
    for a, ia in enumerate(perm):
        for b, jb in enumerate(perm):
            assert sm_p.values[a, b] == pytest.approx(sm.values[ia, jb], abs=1e-12)


def test_attention_rows_win_over_qk():
    manifest = qk_manifest(47, n_views=2)
    grid = manifest.grid
    n = len(manifest.views)
    t_k = n * grid.tokens_per_image
    # planted rows put all mass on view 1, regardless of what Q/K would say
    rows = np.zeros((1, grid.n_patches, t_k), dtype=np.float32)
    start = grid.tokens_per_image + grid.patch_start_idx
    rows[:, :, start : start + grid.n_patches] = 1.0 / grid.n_patches
    for rec in manifest.views:
        rec.tensors["attention_rows"] = make_blob("attention_rows", rows, rec.view_id)
    sm = score_matrix(manifest, "attention", mode=MODE_RAW)
    np.testing.assert_allclose(sm.values[:, 1], 1.0 / grid.n_patches, atol=1e-12)
    np.testing.assert_allclose(sm.values[:, 0], 0.0, atol=1e-12)


def test_missing_roles_raise():
    manifest = random_feature_manifest(53)
    with pytest.raises(ManifestError, match="attention probe needs"):
        score_matrix(manifest, "attention")


def test_parallel_equals_sequential():
    manifest = random_feature_manifest(59, n_views=5)
    seq = score_matrix(manifest, "feature", threads=1)
    par = score_matrix(manifest, "feature", threads=4)
    assert seq.values.tobytes() == par.values.tobytes()
    qk = qk_manifest(61, n_views=4)
    seq_a = score_matrix(qk, "attention", threads=1)
    par_a = score_matrix(qk, "attention", threads=4)
    assert seq_a.values.tobytes() == par_a.values.tobytes()


def test_score_csv_deterministic(tmp_path):
    manifest = random_feature_manifest(67)
    sm = score_matrix(manifest, "feature")
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    sm.to_csv(p1, config={"probe": "feature"})
    sm.to_csv(p2, config={"probe": "feature"})
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.csv.meta.json").exists()


def test_viewsift_threads_env_controls_workers(monkeypatch):
    from viewsift.scoring import default_threads

    monkeypatch.delenv("VIEWSIFT_THREADS", raising=False)
    assert default_threads() == 1
    monkeypatch.setenv("VIEWSIFT_THREADS", "3")
    assert default_threads() == 3
    manifest = random_feature_manifest(71, n_views=4)
    env_run = score_matrix(manifest, "feature")  # picks up the env cap
    monkeypatch.setenv("VIEWSIFT_THREADS", "1")
    serial = score_matrix(manifest, "feature")
    assert env_run.values.tobytes() == serial.values.tobytes()
    monkeypatch.setenv("VIEWSIFT_THREADS", "soon")
    with pytest.raises(ValueError, match="VIEWSIFT_THREADS"):
        default_threads()
