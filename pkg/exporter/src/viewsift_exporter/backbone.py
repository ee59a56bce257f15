"""Backbone adapters: the real reconstruction model, or a small deterministic
stand-in for smoke tests.

An adapter runs one forward pass over a batch of views and exposes, per
alternating-attention layer, the token embeddings plus the global-attention
query/key projections (captured with forward hooks on the projection
submodules, so nothing about the backbone itself is modified). It also
predicts per-view poses and depths for the second, filtered pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class BackboneOutputs:
    """Everything one forward pass exposes, as numpy arrays."""

    tokens_per_layer: list[np.ndarray]  # each (N, T, D)
    queries_per_layer: list[np.ndarray]  # each (heads, N*T, d_head)
    keys_per_layer: list[np.ndarray]  # each (heads, N*T, d_head)
    poses: np.ndarray  # (N, 3, 4) camera_from_world
    depths: np.ndarray  # (N, H, W)


class _GlobalAttention(nn.Module):
    """Softmax attention over the concatenated tokens of all views."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = dim // heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (1, N*T, D)
        b, t, d = x.shape
        q = self.q(x).view(b, t, self.heads, self.d_head).transpose(1, 2)
        k = self.k(x).view(b, t, self.heads, self.d_head).transpose(1, 2)
        v = self.v(x).view(b, t, self.heads, self.d_head).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.d_head**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class _FrameAttention(nn.Module):
    """The same attention restricted to each view's own tokens."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.inner = _GlobalAttention(dim, heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (N, T, D)
        return self.inner(x)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.frame = _FrameAttention(dim, heads)
        self.glob = _GlobalAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor, n_views: int) -> torch.Tensor:  # (1, N*T, D)
        b, nt, d = x.shape
        t = nt // n_views
        framed = x.view(n_views, t, d)
        framed = framed + self.frame(self.norm1(framed))
        x = framed.reshape(1, nt, d)
        x = x + self.glob(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyAlternatingBackbone(nn.Module):
    """A miniature frame/global alternating-attention stack with pose and
    depth heads. Deterministically initialized; useful only for exercising the
    export machinery at desk scale.
    """

    def __init__(
        self,
        dim: int = 32,
        heads: int = 4,
        depth: int = 4,
        patch_size: int = 8,
        n_registers: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        torch.manual_seed(seed)
        self.dim = dim
        self.heads = heads
        self.depth = depth
        self.patch_size = patch_size
        self.n_registers = n_registers
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.registers = nn.Parameter(torch.randn(n_registers, dim) * 0.02)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
        self.pose_head = nn.Linear(dim, 12)
        self.depth_head = nn.Linear(dim, 1)
        self.eval()

    @torch.no_grad()
    def run(self, images: torch.Tensor) -> BackboneOutputs:
        """Forward a (N, 3, H, W) batch, capturing per-layer tokens and Q/K."""
        n, _, h, w = images.shape
        h_p, w_p = h // self.patch_size, w // self.patch_size
        patches = self.patch_embed(images)  # (N, D, H_p, W_p)
        tokens = patches.flatten(2).transpose(1, 2)  # (N, H_p*W_p, D)
        reg = self.registers.unsqueeze(0).expand(n, -1, -1)
        tokens = torch.cat([reg, tokens], dim=1)  # (N, T, D)
        t = tokens.shape[1]

        captured_q: list[torch.Tensor] = []
        captured_k: list[torch.Tensor] = []
        hooks = []
        for block in self.blocks:
            hooks.append(
                block.glob.q.register_forward_hook(lambda m, i, out: captured_q.append(out))
            )
            hooks.append(
                block.glob.k.register_forward_hook(lambda m, i, out: captured_k.append(out))
            )
        tokens_per_layer = []
        try:
            x = tokens.reshape(1, n * t, self.dim)
            for block in self.blocks:
                x = block(x, n)
                tokens_per_layer.append(x.view(n, t, self.dim).numpy().copy())
        finally:
            for hook in hooks:
                hook.remove()

        def split_heads(proj: torch.Tensor) -> np.ndarray:
            # (1, N*T, D) -> (heads, N*T, d_head)
            nt = proj.shape[1]
            return (
                proj.view(nt, self.heads, self.dim // self.heads)
                .transpose(0, 1)
                .numpy()
                .copy()
            )

        final = x.view(n, t, self.dim)
        pooled = final.mean(dim=1)
        raw_pose = self.pose_head(pooled)
        poses = np.stack([_orthonormal_pose(p.numpy()) for p in raw_pose])
        depth_patches = self.depth_head(final[:, self.n_registers :, :]).view(n, h_p, w_p)
        depths = torch.nn.functional.interpolate(
            depth_patches.unsqueeze(1), size=(h, w), mode="bilinear", align_corners=False
        ).squeeze(1)
        depths = torch.nn.functional.softplus(depths) + 0.1
        return BackboneOutputs(
            tokens_per_layer=tokens_per_layer,
            queries_per_layer=[split_heads(qp) for qp in captured_q],
            keys_per_layer=[split_heads(kp) for kp in captured_k],
            poses=poses.astype(np.float32),
            depths=depths.numpy().astype(np.float32),
        )

    def grid_for(self, h: int, w: int) -> dict:
        h_p, w_p = h // self.patch_size, w // self.patch_size
        return {
            "h_patches": h_p,
            "w_patches": w_p,
            "patch_start_idx": self.n_registers,
            "tokens_per_image": self.n_registers + h_p * w_p,
            "feature_dim": self.dim,
        }


def _orthonormal_pose(raw: np.ndarray) -> np.ndarray:
    """12 raw numbers -> a 3x4 [R|t] with orthonormal det(+1) rotation."""
    a = raw[:9].reshape(3, 3).astype(np.float64)
    q, r = np.linalg.qr(a)
    q = q @ np.diag(np.sign(np.sign(np.diag(r)) + 0.5))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    pose = np.zeros((3, 4))
    pose[:, :3] = q
    pose[:, 3] = raw[9:]
    return pose


def load_backbone(model_id: str, seed: int = 0) -> TinyAlternatingBackbone:
    """Build the requested backbone adapter.

    "tiny" is the built-in stand-in. Real reconstruction backbones need their
    own wheels and weights; see the README recipe for wiring one in.
    """
    if model_id == "tiny":
        return TinyAlternatingBackbone(seed=seed)
    if model_id == "vggt":
        try:
            import vggt  # noqa: F401
        except ImportError as exc:
            raise RuntimeError(
                "model 'vggt' needs the vggt package and pretrained weights; "
                "install them and adapt load_backbone (see README recipe)"
            ) from exc
        raise RuntimeError("vggt adapter is a documented recipe, not bundled here")
    raise ValueError(f"unknown model id {model_id!r} (try 'tiny')")
