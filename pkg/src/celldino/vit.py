"""Vision Transformer encoder with a configurable channel count.

Pre-norm multi-head self-attention blocks with GELU MLPs; the CLS token
after the final layernorm is the image embedding. Positional embeddings
are stored for the base (global-view) grid and bicubically interpolated
for other input sizes, keeping the CLS slot untouched.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tt
from .binio import read_f32_array, read_json_block, read_magic, write_f32_array, write_json_block, write_magic
from .tensor import Tensor

VITW_MAGIC = b"VITW"
VITW_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 96
    patch_size: int = 8
    in_channels: int = 2
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class ViTParams:
    config: ViTConfig
    tensors: dict[str, Tensor]  # insertion order == checkpoint blob order


def param_order(config: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Checkpoint blob order: name and shape of every parameter."""
    d = config.embed_dim
    p = config.patch_size * config.patch_size * config.in_channels
    order = [
        ("patch.w", (p, d)),
        ("patch.b", (d,)),
        ("cls", (1, 1, d)),
        ("pos", (1, 1 + config.n_patches, d)),
    ]
    for i in range(config.depth):
        pre = f"blocks.{i}"
        order += [
            (f"{pre}.ln1.g", (d,)),
            (f"{pre}.ln1.b", (d,)),
            (f"{pre}.attn.wqkv", (d, 3 * d)),
            (f"{pre}.attn.bqkv", (3 * d,)),
            (f"{pre}.attn.wo", (d, d)),
            (f"{pre}.attn.bo", (d,)),
            (f"{pre}.ln2.g", (d,)),
            (f"{pre}.ln2.b", (d,)),
            (f"{pre}.mlp.w1", (d, config.mlp_dim)),
            (f"{pre}.mlp.b1", (config.mlp_dim,)),
            (f"{pre}.mlp.w2", (config.mlp_dim, d)),
            (f"{pre}.mlp.b2", (d,)),
        ]
    order += [("norm.g", (d,)), ("norm.b", (d,))]
    return order


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(np.float32)


def init_vit(config: ViTConfig) -> ViTParams:
    """Fresh parameters, deterministic for a fixed config seed."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_order(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, dtype=np.float32)
        elif leaf in ("b", "bqkv", "bo", "b1", "b2"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = trunc_normal(rng, shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ViTParams(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# positional-embedding interpolation


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    out = np.zeros_like(at)
    near = at <= 1.0
    far = (at > 1.0) & (at < 2.0)
    out[near] = (a + 2.0) * at[near] ** 3 - (a + 3.0) * at[near] ** 2 + 1.0
    out[far] = a * (at[far] ** 3 - 5.0 * at[far] ** 2 + 8.0 * at[far] - 4.0)
    return out


def _interp_weights_1d(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) bicubic resampling matrix, half-pixel aligned, edge-clamped."""
    w = np.zeros((n_dst, n_src), dtype=np.float64)
    scale = n_src / n_dst
    for i in range(n_dst):
        s = (i + 0.5) * scale - 0.5
        base = math.floor(s)
        for off in range(-1, 3):
            j = base + off
            weight = _cubic_kernel(np.array([s - j]))[0]
            w[i, min(max(j, 0), n_src - 1)] += weight
    return w


@lru_cache(maxsize=32)
def grid_interp_matrix(src_grid: tuple[int, int], dst_grid: tuple[int, int]) -> np.ndarray:
    """Linear map from a flattened src token grid to a flattened dst grid."""
    wr = _interp_weights_1d(src_grid[0], dst_grid[0])
    wc = _interp_weights_1d(src_grid[1], dst_grid[1])
    return np.kron(wr, wc).astype(np.float32)


def positional_embedding(params: ViTParams, gh: int, gw: int) -> Tensor:
    """Pos-emb for a gh x gw patch grid, CLS slot first; interpolates if needed."""
    cfg = params.config
    pos = params.tensors["pos"]
    if gh == cfg.grid and gw == cfg.grid:
        return pos
    flat = tt.index(pos, (0,))  # (1 + T0, D)
    cls_slot = tt.index(flat, (slice(0, 1), slice(None)))
    grid_part = tt.index(flat, (slice(1, None), slice(None)))
    m = Tensor(grid_interp_matrix((cfg.grid, cfg.grid), (gh, gw)))
    interp = tt.matmul(m, grid_part)
    joined = tt.concat([cls_slot, interp], axis=0)
    return tt.reshape(joined, (1, 1 + gh * gw, cfg.embed_dim))


# ---------------------------------------------------------------------------
# forward


def _patchify(x: Tensor, patch: int) -> Tensor:
    n, c, h, w = x.shape
    gh, gw = h // patch, w // patch
    t = tt.reshape(x, (n, c, gh, patch, gw, patch))
    t = tt.transpose(t, (0, 2, 4, 1, 3, 5))
    return tt.reshape(t, (n, gh * gw, c * patch * patch))


def _attention(p: dict[str, Tensor], pre: str, x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    hd = d // heads
    scale = 1.0 / math.sqrt(hd)

    qkv = tt.add(tt.matmul(x, p[f"{pre}.wqkv"]), p[f"{pre}.bqkv"])
    qkv = tt.transpose(tt.reshape(qkv, (n, t, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = tt.mul(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), scale)
    attn = tt.tempered_softmax(scores, tau=1.0)
    mixed = tt.matmul(attn, v)
    mixed = tt.reshape(tt.transpose(mixed, (0, 2, 1, 3)), (n, t, d))
    return tt.add(tt.matmul(mixed, p[f"{pre}.wo"]), p[f"{pre}.bo"])


def vit_forward(params: ViTParams, batch: Tensor) -> Tensor:
    """CLS embedding per image: (N, C, H, W) -> (N, embed_dim)."""
    cfg = params.config
    n, c, h, w = batch.shape
    if c != cfg.in_channels:
        raise ValueError(
            f"channel-count mismatch: backbone expects {cfg.in_channels} channels, got {c}"
        )
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ValueError(
            f"spatial dims {h}x{w} not divisible by patch size {cfg.patch_size}"
        )
    p = params.tensors
    gh, gw = h // cfg.patch_size, w // cfg.patch_size

    tokens = tt.add(tt.matmul(_patchify(batch, cfg.patch_size), p["patch.w"]), p["patch.b"])
    cls = tt.broadcast_to(p["cls"], (n, 1, cfg.embed_dim))
    x = tt.concat([cls, tokens], axis=1)
    x = tt.add(x, positional_embedding(params, gh, gw))

    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        normed = tt.layernorm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        x = tt.add(x, _attention(p, f"{pre}.attn", normed, cfg.num_heads))
        normed = tt.layernorm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        hidden = tt.gelu(tt.add(tt.matmul(normed, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"]))
        x = tt.add(x, tt.add(tt.matmul(hidden, p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"]))

    x = tt.layernorm(x, p["norm.g"], p["norm.b"])
    return tt.index(x, (slice(None), 0, slice(None)))


def forward_features(params: ViTParams, batch: np.ndarray) -> np.ndarray:
    """Inference-mode embedding extraction; deterministic, no graph."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ValueError(f"expected a (N, C, H, W) batch, got shape {batch.shape}")
    with tt.no_grad():
        return vit_forward(params, Tensor(batch)).data


# ---------------------------------------------------------------------------
# checkpoint io


def save_vit(path, params: ViTParams):
    with open(path, "wb") as f:
        write_vit_block(f, params)


def load_vit(path) -> ViTParams:
    with open(path, "rb") as f:
        return read_vit_block(f)


def write_vit_block(f, params: ViTParams):
    """VITW block: magic, version u32, config JSON, then f32 blobs in param order."""
    write_magic(f, VITW_MAGIC, VITW_VERSION)
    write_json_block(f, asdict(params.config))
    for name, shape in param_order(params.config):
        t = params.tensors[name]
        assert t.shape == shape, f"{name}: {t.shape} != {shape}"
        write_f32_array(f, t.data)


def read_vit_block(f) -> ViTParams:
    read_magic(f, VITW_MAGIC, VITW_VERSION)
    config = ViTConfig(**read_json_block(f))
    tensors = {
        name: Tensor(read_f32_array(f, shape), requires_grad=True)
        for name, shape in param_order(config)
    }
    return ViTParams(config=config, tensors=tensors)
