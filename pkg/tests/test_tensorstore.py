import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewsift.errors import FormatError, ManifestError
from viewsift.tensorstore import (
    MAGIC,
    TensorBlob,
    TokenGrid,
    ViewManifest,
    ViewRecord,
    load_manifest,
    make_blob,
    read_tensor,
    save_set,
    validate_set,
    write_tensor,
)


def small_grid(d=8):
    return TokenGrid(h_patches=2, w_patches=2, patch_start_idx=1, tokens_per_image=5, feature_dim=d)


def test_zero_tensor_roundtrip(tmp_path):
    blob = make_blob("depth", np.zeros((2, 2)), "v0")
    path = tmp_path / "zero.vsf"
    write_tensor(blob, path)
    # payload is exactly 16 bytes after magic + header
    raw = path.read_bytes()
    header_len = struct.unpack("<I", raw[4:8])[0]
    assert len(raw) - 8 - header_len == 16
    assert read_tensor(path) == blob


def test_roundtrip_bit_exact(tmp_path):
    blob = make_blob("features", np.array([[[1.5, -2.0, 0.25]]]), "view a", layer_index=23)
    path = tmp_path / "t.vsf"
    write_tensor(blob, path)
    back = read_tensor(path)
    assert back == blob
    assert back.data.tobytes() == blob.data.tobytes()
    assert back.layer_index == 23


def test_shape_data_mismatch_rejected(tmp_path):
    blob = TensorBlob(role="depth", shape=(2,), view_id="v0", data=np.zeros(3, dtype=np.float32))
    with pytest.raises(FormatError, match="scalars"):
        write_tensor(blob, tmp_path / "bad.vsf")


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.vsf"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.vsf"
    write_tensor(make_blob("depth", np.ones((2, 2)), "v0"), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])  # drop one float
    with pytest.raises(FormatError, match="truncated payload"):
        read_tensor(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.vsf"
    write_tensor(make_blob("depth", np.ones((2, 2)), "v0"), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_tensor(path)


def test_header_shape_lie_rejected(tmp_path):
    # header says pose but the shape is not 4x4 or 3x4
    path = tmp_path / "t.vsf"
    header = b"role=pose\ndtype=f32\nshape=2,2\nlayer=\nview_id=v0\n"
    payload = np.zeros(4, dtype="<f4").tobytes()
    path.write_bytes(MAGIC + struct.pack("<I", len(header)) + header + payload)
    with pytest.raises(FormatError, match="pose"):
        read_tensor(path)


def test_unknown_role_rejected(tmp_path):
    with pytest.raises(FormatError, match="role"):
        write_tensor(make_blob("wavelets", np.zeros((2, 2)), "v0"), tmp_path / "x.vsf")


def test_newline_in_view_id_rejected(tmp_path):
    with pytest.raises(FormatError, match="view_id"):
        write_tensor(make_blob("depth", np.zeros((2, 2)), "a\nb"), tmp_path / "x.vsf")


@settings(max_examples=200, deadline=None)
@given(
    role=st.sampled_from(["depth", "depth_mask"]),
    h=st.integers(1, 5),
    w=st.integers(1, 5),
    layer=st.one_of(st.none(), st.integers(0, 40)),
    data=st.data(),
)
def test_roundtrip_property(tmp_path_factory, role, h, w, layer, data):
    values = data.draw(
        st.lists(
            st.floats(width=32, allow_nan=True, allow_infinity=True),
            min_size=h * w,
            max_size=h * w,
        )
    )
    arr = np.array(values, dtype=np.float32).reshape(h, w)
    blob = make_blob(role, arr, "v0", layer_index=layer)
    path = tmp_path_factory.mktemp("rt") / "b.vsf"
    write_tensor(blob, path)
    assert read_tensor(path) == blob


def make_feature_manifest(tmp_path, n_views=3, d=8, labels=None):
    grid = small_grid(d)
    records = []
    for i in range(n_views):
        vid = f"v{i}"
        feat = np.full((2, 2, d), float(i + 1), dtype=np.float32)
        label = labels[i] if labels else "unknown"
        records.append(
            ViewRecord(view_id=vid, label=label, tensors={"features": make_blob("features", feat, vid)})
        )
    manifest = ViewManifest(set_id="m", grid=grid, layer_of_interest=3, views=records)
    return save_set(manifest, tmp_path)


def test_load_manifest_order_and_idempotence(tmp_path):
    mpath = make_feature_manifest(tmp_path)
    m1 = load_manifest(mpath)
    m2 = load_manifest(mpath)
    assert m1.ids() == ["v0", "v1", "v2"]
    assert m1.ids() == m2.ids()
    assert m1.layer_of_interest == 3
    for vid in m1.ids():
        assert m1.blob(vid, "features") == m2.blob(vid, "features")


def test_manifest_grid_mismatch(tmp_path):
    mpath = make_feature_manifest(tmp_path)
    doc = json.loads(mpath.read_text())
    doc["grid"]["feature_dim"] = 1024  # files on disk are d=8
    mpath.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="does not match grid"):
        load_manifest(mpath)


def test_manifest_duplicate_id(tmp_path):
    mpath = make_feature_manifest(tmp_path)
    doc = json.loads(mpath.read_text())
    doc["views"].append(dict(doc["views"][0]))
    mpath.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(mpath)


def test_manifest_missing_file(tmp_path):
    mpath = make_feature_manifest(tmp_path)
    (tmp_path / "v1_features.vsf").unlink()
    with pytest.raises(ManifestError, match="missing tensor file"):
        load_manifest(mpath)


def test_validate_set_reports_missing_roles(tmp_path):
    mpath = make_feature_manifest(tmp_path)
    manifest = load_manifest(mpath)
    ok = validate_set(manifest, {"features"})
    assert ok.ok
    bad = validate_set(manifest, {"queries", "keys"})
    assert not bad.ok
    assert bad.missing["v1"] == ["keys", "queries"]
    assert validate_set(manifest, set()).ok  # vacuous


def test_token_grid_invariant():
    with pytest.raises(ManifestError, match="tokens_per_image"):
        TokenGrid(2, 2, 1, 99, 8).validate()


def test_subset_preserves_order_and_drops_attention_rows(tmp_path):
    mpath = make_feature_manifest(tmp_path)
    manifest = load_manifest(mpath)
    sub = manifest.subset(["v2", "v0"])
    assert sub.ids() == ["v2", "v0"]
    assert sub.grid == manifest.grid
