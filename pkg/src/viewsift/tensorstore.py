"""Bit-exact tensor container ("VSF1") and per-set manifests.

Every array the toolkit consumes travels through this module: dense feature
maps, query/key projections, precomputed attention rows, camera poses and
depth maps. All payloads are little-endian float32, so a file written on one
machine reads back bit-for-bit on any other.

Wire format (one tensor per file)::

    magic "VSF1" | header_len: u32 LE | header (UTF-8) | payload f32 LE row-major

The header is five ``key=value`` lines in fixed order: role, dtype, shape,
layer, view_id. ``shape`` is comma-separated positive ints, ``layer`` may be
empty. ``view_id`` must not contain newlines.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError

MAGIC = b"VSF1"

ROLE_FEATURES = "features"
ROLE_QUERIES = "queries"
ROLE_KEYS = "keys"
ROLE_ATTENTION_ROWS = "attention_rows"
ROLE_POSE = "pose"
ROLE_DEPTH = "depth"
ROLE_DEPTH_MASK = "depth_mask"

ROLES = (
    ROLE_FEATURES,
    ROLE_QUERIES,
    ROLE_KEYS,
    ROLE_ATTENTION_ROWS,
    ROLE_POSE,
    ROLE_DEPTH,
    ROLE_DEPTH_MASK,
)

LABEL_CLEAN = "clean"
LABEL_DISTRACTOR = "distractor"
LABEL_UNKNOWN = "unknown"
LABELS = (LABEL_CLEAN, LABEL_DISTRACTOR, LABEL_UNKNOWN)

POSE_CAMERA_FROM_WORLD = "camera_from_world"
POSE_WORLD_FROM_CAMERA = "world_from_camera"
POSE_CONVENTIONS = (POSE_CAMERA_FROM_WORLD, POSE_WORLD_FROM_CAMERA)

_HEADER_KEYS = ("role", "dtype", "shape", "layer", "view_id")


@dataclass(eq=False)
class TensorBlob:
    """One named float32 tensor plus the metadata the pipeline needs to route it."""

    role: str
    shape: tuple[int, ...]
    view_id: str
    data: np.ndarray
    layer_index: int | None = None
    dtype: str = "f32"

    def validate(self) -> None:
        """Raise FormatError unless every container invariant holds."""
        if self.role not in ROLES:
            raise FormatError(f"unknown role {self.role!r}")
        if self.dtype != "f32":
            raise FormatError(f"unsupported dtype {self.dtype!r}; payloads are 32-bit float")
        if not self.shape or any(int(d) <= 0 for d in self.shape):
            raise FormatError(f"shape must be non-empty positive ints, got {self.shape}")
        n = 1
        for d in self.shape:
            n *= int(d)
        if int(self.data.size) != n:
            raise FormatError(
                f"shape {tuple(self.shape)} implies {n} scalars but data holds {self.data.size}"
            )
        if self.data.dtype != np.float32:
            raise FormatError(f"data dtype must be float32, got {self.data.dtype}")
        if self.layer_index is not None and int(self.layer_index) < 0:
            raise FormatError(f"layer_index must be non-negative, got {self.layer_index}")
        if "\n" in self.view_id or "\r" in self.view_id or "\x00" in self.view_id:
            raise FormatError("view_id must not contain newlines or NUL")
        ndim = len(self.shape)
        if self.role == ROLE_FEATURES and ndim != 3:
            raise FormatError(f"features must be [H_p, W_p, d], got shape {self.shape}")
        if self.role in (ROLE_QUERIES, ROLE_KEYS) and ndim != 3:
            raise FormatError(f"{self.role} must be [heads, tokens, d_head], got shape {self.shape}")
        if self.role == ROLE_POSE and tuple(self.shape) not in ((4, 4), (3, 4)):
            raise FormatError(f"pose must be [4,4] or [3,4], got shape {self.shape}")
        if self.role in (ROLE_DEPTH, ROLE_DEPTH_MASK) and ndim != 2:
            raise FormatError(f"{self.role} must be [H, W], got shape {self.shape}")

    @property
    def array(self) -> np.ndarray:
        """The payload in its declared shape (row-major)."""
        return self.data.reshape(self.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorBlob):
            return NotImplemented
        return (
            self.role == other.role
            and tuple(self.shape) == tuple(other.shape)
            and self.view_id == other.view_id
            and self.layer_index == other.layer_index
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )


def make_blob(
    role: str,
    array: np.ndarray,
    view_id: str,
    layer_index: int | None = None,
) -> TensorBlob:
    """Build a TensorBlob from any array-like, coercing to contiguous float32."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    return TensorBlob(role=role, shape=tuple(arr.shape), view_id=view_id, data=arr, layer_index=layer_index)


def write_tensor(blob: TensorBlob, path: str | Path) -> None:
    """Serialize one blob; read_tensor reconstructs it bit-exactly."""
    blob.validate()
    shape_txt = ",".join(str(int(d)) for d in blob.shape)
    layer_txt = "" if blob.layer_index is None else str(int(blob.layer_index))
    header = (
        f"role={blob.role}\n"
        f"dtype={blob.dtype}\n"
        f"shape={shape_txt}\n"
        f"layer={layer_txt}\n"
        f"view_id={blob.view_id}\n"
    ).encode("utf-8")
    payload = np.ascontiguousarray(blob.array, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_tensor(path: str | Path) -> TensorBlob:
    """Parse a VSF1 file, rejecting wrong magic, truncation, and header lies."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) < 4 or magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise FormatError(f"{path}: truncated before header length")
        (header_len,) = struct.unpack("<I", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) < header_len:
            raise FormatError(f"{path}: truncated header ({len(header_bytes)} of {header_len} bytes)")
        fields = _parse_header(header_bytes, path)
        shape = fields["shape"]
        n = 1
        for d in shape:
            n *= d
        expected = n * 4
        payload = fh.read(expected)
        if len(payload) < expected:
            raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {expected}-byte payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32, copy=True).reshape(shape)
    data.flags.writeable = False
    blob = TensorBlob(
        role=fields["role"],
        shape=shape,
        view_id=fields["view_id"],
        data=data,
        layer_index=fields["layer"],
        dtype=fields["dtype"],
    )
    blob.validate()
    return blob


def _parse_header(header_bytes: bytes, path: str | Path) -> dict:
    try:
        text = header_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not valid UTF-8: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    if len(lines) != len(_HEADER_KEYS):
        raise FormatError(f"{path}: header must have {len(_HEADER_KEYS)} lines, got {len(lines)}")
    values = {}
    for key, line in zip(_HEADER_KEYS, lines):
        prefix = key + "="
        if not line.startswith(prefix):
            raise FormatError(f"{path}: expected header line {prefix!r}..., got {line!r}")
        values[key] = line[len(prefix):]
    try:
        shape = tuple(int(tok) for tok in values["shape"].split(","))
    except ValueError as exc:
        raise FormatError(f"{path}: unparseable shape {values['shape']!r}") from exc
    if not shape or any(d <= 0 for d in shape):
        raise FormatError(f"{path}: shape entries must be positive, got {shape}")
    layer_txt = values["layer"]
    if layer_txt == "":
        layer = None
    else:
        try:
            layer = int(layer_txt)
        except ValueError as exc:
            raise FormatError(f"{path}: unparseable layer {layer_txt!r}") from exc
    return {
        "role": values["role"],
        "dtype": values["dtype"],
        "shape": shape,
        "layer": layer,
        "view_id": values["view_id"],
    }


@dataclass(frozen=True)
class TokenGrid:
    """Patch-token geometry shared by every view of a set."""

    h_patches: int
    w_patches: int
    patch_start_idx: int
    tokens_per_image: int
    feature_dim: int

    def validate(self) -> None:
        if self.h_patches <= 0 or self.w_patches <= 0:
            raise ManifestError(f"patch grid must be positive, got {self.h_patches}x{self.w_patches}")
        if self.patch_start_idx < 0:
            raise ManifestError(f"patch_start_idx must be non-negative, got {self.patch_start_idx}")
        if self.feature_dim <= 0:
            raise ManifestError(f"feature_dim must be positive, got {self.feature_dim}")
        expected = self.patch_start_idx + self.h_patches * self.w_patches
        if self.tokens_per_image != expected:
            raise ManifestError(
                f"tokens_per_image={self.tokens_per_image} but patch_start_idx + H_p*W_p = {expected}"
            )

    @property
    def n_patches(self) -> int:
        return self.h_patches * self.w_patches


@dataclass(eq=False)
class ViewRecord:
    """One view of a set: its label and the tensors exported for it."""

    view_id: str
    label: str = LABEL_UNKNOWN
    tensors: dict[str, TensorBlob] = field(default_factory=dict)
    gt_pose: TensorBlob | None = None
    gt_depth: TensorBlob | None = None


@dataclass(eq=False)
class ViewManifest:
    """An ordered, validated set of views sharing one TokenGrid.

    Records and blobs are immutable after construction; manifests can be
    shared read-only across parallel workers.
    """

    set_id: str
    grid: TokenGrid
    layer_of_interest: int
    views: list[ViewRecord]
    pose_convention: str = POSE_CAMERA_FROM_WORLD

    def ids(self) -> list[str]:
        return [v.view_id for v in self.views]

    def get(self, view_id: str) -> ViewRecord:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(view_id)

    def blob(self, view_id: str, role: str) -> TensorBlob:
        rec = self.get(view_id)
        if role not in rec.tensors:
            raise ManifestError(f"view {view_id!r} has no {role!r} tensor")
        return rec.tensors[role]

    def labels(self) -> dict[str, str]:
        return {v.view_id: v.label for v in self.views}

    def subset(self, view_ids: list[str], set_id: str | None = None) -> "ViewManifest":
        """A manifest over the given views, in the given order.

        Precomputed attention_rows are dropped: they are anchored to the full
        set's token layout and do not survive re-slicing.
        """
        records = []
        for vid in view_ids:
            src = self.get(vid)
            tensors = {r: b for r, b in src.tensors.items() if r != ROLE_ATTENTION_ROWS}
            records.append(
                ViewRecord(
                    view_id=src.view_id,
                    label=src.label,
                    tensors=tensors,
                    gt_pose=src.gt_pose,
                    gt_depth=src.gt_depth,
                )
            )
        return ViewManifest(
            set_id=set_id if set_id is not None else self.set_id,
            grid=self.grid,
            layer_of_interest=self.layer_of_interest,
            views=records,
            pose_convention=self.pose_convention,
        )


def load_manifest(path: str | Path) -> ViewManifest:
    """Load a manifest JSON, eagerly reading and validating every referenced tensor."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: cannot parse manifest: {exc}") from exc
    for key in ("set_id", "grid", "layer", "views"):
        if key not in doc:
            raise ManifestError(f"{path}: manifest missing field {key!r}")
    gdoc = doc["grid"]
    try:
        grid = TokenGrid(
            h_patches=int(gdoc["h_patches"]),
            w_patches=int(gdoc["w_patches"]),
            patch_start_idx=int(gdoc["patch_start_idx"]),
            tokens_per_image=int(gdoc["tokens_per_image"]),
            feature_dim=int(gdoc["feature_dim"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed grid record: {exc}") from exc
    grid.validate()
    convention = doc.get("pose_convention", POSE_CAMERA_FROM_WORLD)
    if convention not in POSE_CONVENTIONS:
        raise ManifestError(f"{path}: unknown pose_convention {convention!r}")
    base = path.parent
    n_views = len(doc["views"])
    seen: set[str] = set()
    records: list[ViewRecord] = []
    for vdoc in doc["views"]:
        vid = vdoc["id"]
        if vid in seen:
            raise ManifestError(f"{path}: duplicate view id {vid!r}")
        seen.add(vid)
        label = vdoc.get("label", LABEL_UNKNOWN)
        if label not in LABELS:
            raise ManifestError(f"{path}: view {vid!r} has unknown label {label!r}")
        tensors: dict[str, TensorBlob] = {}
        for role, rel in (vdoc.get("tensors") or {}).items():
            if role not in ROLES:
                raise ManifestError(f"{path}: view {vid!r} references unknown role {role!r}")
            tensors[role] = _load_ref(base, rel, role, vid)
        gt_pose = gt_depth = None
        if vdoc.get("gt_pose"):
            gt_pose = _load_ref(base, vdoc["gt_pose"], ROLE_POSE, vid)
        if vdoc.get("gt_depth"):
            gt_depth = _load_ref(base, vdoc["gt_depth"], ROLE_DEPTH, vid)
        rec = ViewRecord(view_id=vid, label=label, tensors=tensors, gt_pose=gt_pose, gt_depth=gt_depth)
        _check_against_grid(rec, grid, n_views)
        records.append(rec)
    return ViewManifest(
        set_id=doc["set_id"],
        grid=grid,
        layer_of_interest=int(doc["layer"]),
        views=records,
        pose_convention=convention,
    )


def _load_ref(base: Path, rel: str, expected_role: str, view_id: str) -> TensorBlob:
    target = base / rel
    if not target.exists():
        raise ManifestError(f"view {view_id!r}: missing tensor file {target}")
    blob = read_tensor(target)
    if blob.role != expected_role:
        raise ManifestError(
            f"view {view_id!r}: {target} declares role {blob.role!r}, manifest expects {expected_role!r}"
        )
    if blob.view_id != view_id:
        raise ManifestError(
            f"view {view_id!r}: {target} is stamped for view {blob.view_id!r}"
        )
    return blob


def _check_against_grid(rec: ViewRecord, grid: TokenGrid, n_views: int) -> None:
    for role, blob in rec.tensors.items():
        shape = tuple(blob.shape)
        if role == ROLE_FEATURES:
            want = (grid.h_patches, grid.w_patches, grid.feature_dim)
            if shape != want:
                raise ManifestError(
                    f"view {rec.view_id!r}: features shape {shape} does not match grid {want}"
                )
        elif role in (ROLE_QUERIES, ROLE_KEYS):
            if shape[1] != grid.tokens_per_image:
                raise ManifestError(
                    f"view {rec.view_id!r}: {role} has {shape[1]} tokens, grid says {grid.tokens_per_image}"
                )
        elif role == ROLE_ATTENTION_ROWS:
            want = (grid.n_patches, n_views * grid.tokens_per_image)
            if shape[1:] != want:
                raise ManifestError(
                    f"view {rec.view_id!r}: attention_rows shape {shape} does not match "
                    f"(heads, {want[0]}, {want[1]})"
                )


@dataclass
class ValidationReport:
    """Per-view role coverage; ok iff nothing is missing."""

    ok: bool
    missing: dict[str, list[str]]

    def describe(self) -> str:
        if self.ok:
            return "ok"
        parts = [f"{vid}: missing {', '.join(roles)}" for vid, roles in self.missing.items()]
        return "; ".join(parts)


def validate_set(manifest: ViewManifest, required_roles: set[str]) -> ValidationReport:
    """Report which views lack which required roles. Never raises."""
    missing: dict[str, list[str]] = {}
    for rec in manifest.views:
        absent = sorted(r for r in required_roles if r not in rec.tensors)
        if absent:
            missing[rec.view_id] = absent
    return ValidationReport(ok=not missing, missing=missing)


def save_set(manifest: ViewManifest, out_dir: str | Path) -> Path:
    """Write every blob plus the manifest JSON into out_dir; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views_doc = []
    for rec in manifest.views:
        tensors_doc = {}
        for role, blob in rec.tensors.items():
            fname = f"{rec.view_id}_{role}.vsf"
            write_tensor(blob, out / fname)
            tensors_doc[role] = fname
        vdoc = {"id": rec.view_id, "label": rec.label, "tensors": tensors_doc}
        if rec.gt_pose is not None:
            fname = f"{rec.view_id}_gt_pose.vsf"
            write_tensor(rec.gt_pose, out / fname)
            vdoc["gt_pose"] = fname
        if rec.gt_depth is not None:
            fname = f"{rec.view_id}_gt_depth.vsf"
            write_tensor(rec.gt_depth, out / fname)
            vdoc["gt_depth"] = fname
        views_doc.append(vdoc)
    doc = {
        "set_id": manifest.set_id,
        "grid": {
            "h_patches": manifest.grid.h_patches,
            "w_patches": manifest.grid.w_patches,
            "patch_start_idx": manifest.grid.patch_start_idx,
            "tokens_per_image": manifest.grid.tokens_per_image,
            "feature_dim": manifest.grid.feature_dim,
        },
        "layer": manifest.layer_of_interest,
        "pose_convention": manifest.pose_convention,
        "views": views_doc,
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return mpath
