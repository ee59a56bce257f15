"""Two-pass export pipeline.

Pass 1 (representations): forward the full view set, dump per-layer features
(patch tokens only) plus the query/key projections at the layer of interest,
and optionally the anchor's softmax attention rows. Pass 2 (predictions):
forward only the views a work order kept, dump poses and depths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneOutputs, load_backbone
from .vsf import write_manifest, write_tensor


@dataclass
class ExportConfig:
    model_id: str = "tiny"
    layers: list[int] = field(default_factory=list)  # empty -> all layers
    layer_of_interest: int | None = None  # default: last exported layer
    feature_slice_start: int | None = None  # channel slice rule, e.g. half the dim
    rows: str = "anchor"  # none | anchor | all
    images: list[str] = field(default_factory=list)  # .npy paths
    synthetic: int = 0  # generate this many random views instead
    image_size: int = 32
    seed: int = 0
    out_dir: str = "export"


def _load_images(cfg: ExportConfig) -> tuple[list[str], torch.Tensor]:
    if cfg.synthetic and cfg.images:
        raise ValueError("give either --images or --synthetic, not both")
    if cfg.synthetic:
        rng = np.random.default_rng(cfg.seed)
        arr = rng.uniform(0, 1, size=(cfg.synthetic, 3, cfg.image_size, cfg.image_size))
        ids = [f"img_{i:03d}" for i in range(cfg.synthetic)]
        return ids, torch.from_numpy(arr.astype(np.float32))
    if not cfg.images:
        raise ValueError("no input images: pass image paths or a synthetic count")
    ids, stacks = [], []
    for path in cfg.images:
        p = Path(path)
        arr = np.load(p)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"{p}: expected a (3, H, W) array, got {arr.shape}")
        ids.append(p.stem)
        stacks.append(arr.astype(np.float32))
    return ids, torch.from_numpy(np.stack(stacks))


def _resolve_layers(cfg: ExportConfig, depth: int) -> tuple[list[int], int]:
    layers = cfg.layers or list(range(depth))
    for idx in layers:
        if not 0 <= idx < depth:
            raise ValueError(f"layer {idx} out of range for a {depth}-layer backbone")
    interest = cfg.layer_of_interest if cfg.layer_of_interest is not None else layers[-1]
    if interest not in layers:
        raise ValueError(f"layer of interest {interest} is not among exported layers {layers}")
    return layers, interest


def export_representations(cfg: ExportConfig) -> Path:
    """Pass 1: dump features and Q/K for every view; returns the manifest path."""
    backbone = load_backbone(cfg.model_id, seed=cfg.seed)
    ids, images = _load_images(cfg)
    if cfg.rows not in ("none", "anchor", "all"):
        raise ValueError(f"rows must be none/anchor/all, got {cfg.rows!r}")
    layers, interest = _resolve_layers(cfg, backbone.depth)
    outputs = backbone.run(images)
    grid = backbone.grid_for(images.shape[2], images.shape[3])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    n = len(ids)
    t = grid["tokens_per_image"]
    h_p, w_p = grid["h_patches"], grid["w_patches"]
    start = grid["patch_start_idx"]
    slice_from = cfg.feature_slice_start or 0
    feat_dim = grid["feature_dim"] - slice_from
    grid_doc = dict(grid, feature_dim=feat_dim)

    views = []
    for i, vid in enumerate(ids):
        tensors = {}
        for layer in layers:
            tokens = outputs.tokens_per_layer[layer][i]  # (T, D)
            feat = tokens[start:, slice_from:].reshape(h_p, w_p, feat_dim)
            suffix = f"_L{layer}" if layer != interest else ""
            fname = f"{vid}_features{suffix}.vsf"
            write_tensor(out / fname, "features", feat, vid, layer_index=layer)
            if layer == interest:
                tensors["features"] = fname
        q = outputs.queries_per_layer[interest][:, i * t : (i + 1) * t, :]
        k = outputs.keys_per_layer[interest][:, i * t : (i + 1) * t, :]
        write_tensor(out / f"{vid}_queries.vsf", "queries", q, vid, layer_index=interest)
        write_tensor(out / f"{vid}_keys.vsf", "keys", k, vid, layer_index=interest)
        tensors["queries"] = f"{vid}_queries.vsf"
        tensors["keys"] = f"{vid}_keys.vsf"
        views.append({"id": vid, "label": "unknown", "tensors": tensors})

    if cfg.rows != "none":
        anchors = range(n) if cfg.rows == "all" else [0]
        q_all = outputs.queries_per_layer[interest]
        k_all = outputs.keys_per_layer[interest]
        d_head = q_all.shape[2]
        for i in anchors:
            q_patch = q_all[:, i * t + start : (i + 1) * t, :]
            logits = np.einsum("hqd,hkd->hqk", q_patch, k_all) / np.sqrt(d_head)
            logits -= logits.max(axis=2, keepdims=True)
            rows = np.exp(logits)
            rows /= rows.sum(axis=2, keepdims=True)
            vid = ids[i]
            fname = f"{vid}_attention_rows.vsf"
            write_tensor(out / fname, "attention_rows", rows, vid, layer_index=interest)
            views[i]["tensors"]["attention_rows"] = fname

    write_manifest(
        out / "manifest.json",
        set_id=f"{cfg.model_id}-export-s{cfg.seed}",
        grid=grid_doc,
        layer=interest,
        views=views,
    )
    _write_run_log(out, cfg, layers, interest, n)
    return out / "manifest.json"


def export_predictions(work_order_path: str | Path, cfg: ExportConfig) -> Path:
    """Pass 2: re-run the backbone on the kept views only; dump poses + depths."""
    orders = json.loads(Path(work_order_path).read_text(encoding="utf-8"))
    if isinstance(orders, dict):
        orders = [orders]
    if not orders:
        raise ValueError(f"{work_order_path}: empty work order")
    order = orders[0]
    kept = list(order["kept"])
    ids, images = _load_images(cfg)
    index = {vid: i for i, vid in enumerate(ids)}
    missing = [vid for vid in kept if vid not in index]
    if missing:
        raise ValueError(f"work order keeps unknown view ids: {missing}")
    backbone = load_backbone(cfg.model_id, seed=cfg.seed)
    picked = torch.stack([images[index[vid]] for vid in kept])
    outputs = backbone.run(picked)
    grid = backbone.grid_for(images.shape[2], images.shape[3])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    for j, vid in enumerate(kept):
        pose_name = f"{vid}_pose.vsf"
        depth_name = f"{vid}_depth.vsf"
        write_tensor(out / pose_name, "pose", outputs.poses[j], vid)
        write_tensor(out / depth_name, "depth", outputs.depths[j], vid)
        views.append(
            {"id": vid, "label": "unknown", "tensors": {"pose": pose_name, "depth": depth_name}}
        )
    write_manifest(
        out / "manifest.json",
        set_id=f"{order.get('set_id', 'set')}-pass2",
        grid=grid,
        layer=0,
        views=views,
    )
    return out / "manifest.json"


def _write_run_log(out: Path, cfg: ExportConfig, layers: list[int], interest: int, n: int) -> None:
    log = {
        "model": cfg.model_id,
        "layers": layers,
        "layer_of_interest": interest,
        "feature_slice_start": cfg.feature_slice_start,
        "rows": cfg.rows,
        "n_views": n,
        "seed": cfg.seed,
        "determinism": "cpu inference under torch.no_grad; repeat runs are bit-identical here, "
        "gpu backbones may vary at float tolerance",
    }
    (out / "run_log.json").write_text(json.dumps(log, indent=2, sort_keys=True) + "\n", encoding="utf-8")
