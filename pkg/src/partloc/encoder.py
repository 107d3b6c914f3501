"""Trainable patch encoder shared by both views, plus a frozen teacher stub.

The encoder is a small pre-norm transformer: linear patch embedding, fixed
sinusoidal positional encoding, a learned CLS token prepended, then
``n_blocks`` self-attention blocks and a final layer norm. One parameter set
serves drone and satellite inputs alike — cross-view alignment has to come
from the head and losses, not from separate branches.

The teacher is a frozen random-weight encoder of width ``teacher_dim`` with
its own patch embedding. It exists to exercise the distillation pathway; its
weights are plain numpy arrays, so no gradient can ever reach them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, Mlp, ParamStore, he_uniform
from .tensor import Tensor

__all__ = ["EncoderConfig", "PatchTokenSet", "PatchEncoder", "TeacherStub"]


@dataclass(frozen=True)
class EncoderConfig:
    raster_size: int = 64
    patch_size: int = 8
    token_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    teacher_dim: int = 96

    def __post_init__(self):
        if self.raster_size % self.patch_size != 0:
            raise ValueError(
                f"raster size {self.raster_size} not divisible by patch {self.patch_size}"
            )
        if self.token_dim % self.n_heads != 0:
            raise ValueError("token_dim must be divisible by n_heads")

    @property
    def grid_side(self) -> int:
        return self.raster_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class PatchTokenSet:
    tokens: Tensor  # (L, token_dim), row-major patch order
    cls: Tensor  # (token_dim,)
    grid: np.ndarray  # (L, 2) normalized (x, y) positions in [0, 1]²


def _sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def token_grid(cfg: EncoderConfig) -> np.ndarray:
    """Normalized (x, y) per token: top-left token at (0, 0), bottom-right (1, 1)."""
    g = cfg.grid_side
    rows, cols = np.divmod(np.arange(cfg.n_tokens), g)
    denom = max(g - 1, 1)
    return np.stack([cols / denom, rows / denom], axis=1).astype(np.float64)


def extract_patches(rasters: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) → (B, L, patch·patch·C), patches in row-major order.

    Pixel values are recentered to [-1, 1] before flattening.
    """
    if rasters.ndim == 3:
        rasters = rasters[None]
    b, h, w, c = rasters.shape
    if h % patch or w % patch:
        raise ValueError(f"raster {h}x{w} not divisible by patch size {patch}")
    g_h, g_w = h // patch, w // patch
    x = rasters * 2.0 - 1.0
    x = x.reshape(b, g_h, patch, g_w, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, g_h * g_w, patch * patch * c)
    return x


class _Block:
    """Pre-norm transformer block: x += attn(LN(x)); x += mlp(LN(x))."""

    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator,
                 dim: int, n_heads: int) -> None:
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.ln1 = LayerNorm(store, name + ".ln1", dim)
        self.wqkv = Linear(store, name + ".attn.wqkv", rng, dim, 3 * dim)
        self.proj = Linear(store, name + ".attn.proj", rng, dim, dim)
        self.ln2 = LayerNorm(store, name + ".ln2", dim)
        self.mlp = Mlp(store, name + ".mlp", rng, (dim, 2 * dim, dim))

    def _attention(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        hd, nh = self.head_dim, self.n_heads
        qkv = self.wqkv(x)  # (B, L, 3d)
        qkv = T.reshape(qkv, (b, l, 3, nh, hd))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, nh, L, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), hd**-0.5)
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)  # (B, nh, L, hd)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, l, d))
        return self.proj(out)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self._attention(self.ln1(x)))
        x = T.add(x, self.mlp(self.ln2(x)))
        return x


class PatchEncoder:
    """Shared-weight patch encoder producing per-image tokens and a CLS vector."""

    def __init__(self, cfg: EncoderConfig, store: ParamStore,
                 rng: np.random.Generator, prefix: str = "enc") -> None:
        self.cfg = cfg
        d = cfg.token_dim
        self.patch_proj = Linear(store, f"{prefix}.patch", rng, cfg.patch_dim, d)
        self.cls_token = store.register(
            f"{prefix}.cls", rng.normal(0.0, 0.02, size=(d,))
        )
        self.blocks = [
            _Block(store, f"{prefix}.b{i}", rng, d, cfg.n_heads)
            for i in range(cfg.n_blocks)
        ]
        self.ln_f = LayerNorm(store, f"{prefix}.ln_f", d)
        self.pos = _sinusoidal_positions(cfg.n_tokens, d)  # fixed, not trained
        self.grid = token_grid(cfg)

    def patch_embeddings(self, rasters: np.ndarray) -> Tensor:
        """Linear patch embedding before positional encoding and blocks.

        Permuting input patches permutes these rows identically.
        """
        patches = extract_patches(np.asarray(rasters, dtype=np.float64),
                                  self.cfg.patch_size)
        return self.patch_proj(Tensor(patches))

    def encode_batch(self, rasters: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, H, W, C) rasters → tokens (B, L, d) and cls (B, d)."""
        emb = self.patch_embeddings(rasters)  # (B, L, d)
        b = emb.shape[0]
        x = T.add(emb, Tensor(self.pos))
        cls = T.reshape(self.cls_token, (1, 1, self.cfg.token_dim))
        cls = T.concat([cls] * b, axis=0) if b > 1 else cls
        x = T.concat([cls, x], axis=1)  # CLS prepended at index 0
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_f(x)
        tokens = x[:, 1:, :]
        cls_out = x[:, 0, :]
        return tokens, cls_out

    def encode(self, raster: np.ndarray) -> PatchTokenSet:
        tokens, cls = self.encode_batch(np.asarray(raster, dtype=np.float64)[None])
        return PatchTokenSet(tokens=tokens[0], cls=cls[0], grid=self.grid)


class TeacherStub:
    """Frozen random encoder: patch embed → GELU MLP → mean pool, numpy only."""

    def __init__(self, cfg: EncoderConfig, seed: int) -> None:
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        td = cfg.teacher_dim
        self.w0 = he_uniform(rng, cfg.patch_dim, (cfg.patch_dim, td))
        self.b0 = rng.normal(0.0, 0.1, size=td)
        self.w1 = he_uniform(rng, td, (td, td))
        self.b1 = rng.normal(0.0, 0.1, size=td)

    def encode_batch(self, rasters: np.ndarray) -> np.ndarray:
        patches = extract_patches(np.asarray(rasters, dtype=np.float64),
                                  self.cfg.patch_size)
        h = np.tanh(patches @ self.w0 + self.b0)
        h = np.tanh(h @ self.w1 + self.b1)
        return h.mean(axis=1)  # (B, teacher_dim)

    def encode(self, raster: np.ndarray) -> np.ndarray:
        return self.encode_batch(np.asarray(raster)[None])[0]
