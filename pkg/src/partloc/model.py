"""Full model assembly: patch encoder, part head, proxy bank, learnable
group weights, distillation projector, frozen teacher, and the EMA twin.

The EMA copy is a full structural twin registered under the ``ema.`` name
prefix with gradients disabled; it produces the self-ensemble reference
embedding and is stored in checkpoints alongside the student.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, PatchEncoder, TeacherStub, token_grid
from .formats import read_checkpoint, write_checkpoint
from .head import BranchMask, HeadConfig, PartForward, PartHead
from .layers import LayerNorm, Linear, ParamStore
from .losses import EMA_DECAY, KENDALL_GROUPS
from .tensor import Tensor

_EMA_PREFIX = "ema."


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    head: HeadConfig
    n_locations: int
    init_seed: int = 0
    teacher_seed: int = 7

    def __post_init__(self) -> None:
        if self.n_locations < 2:
            raise ValueError("n_locations must be at least 2")


@dataclass
class TrainForward:
    """Everything one training batch needs for the objective."""
    outs: list[PartForward]          # per-image head outputs
    f_cls: Tensor                    # (B, D) classification-branch rows
    tokens: Tensor                   # (B, L, token_dim) encoder tokens
    teacher: np.ndarray              # (B, teacher_dim) frozen-teacher vectors
    ema_embeddings: np.ndarray       # (B, D) self-ensemble references


class GeoPartModel:
    """Retrieval model: shared encoder + part head over both views."""

    def __init__(self, cfg: ModelConfig) -> None:
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.init_seed)
        d_embed = cfg.head.embed_dim

        self.encoder = PatchEncoder(cfg.encoder, self.store, rng, prefix="enc")
        self.head = PartHead(cfg.head, cfg.encoder, self.store, rng,
                             prefix="head")
        self.proxies = self.store.register(
            "proxies.bank", rng.normal(0.0, 1.0, size=(cfg.n_locations,
                                                       d_embed))
        )
        self.kendall = {
            g: self.store.register(f"kendall.{g}", np.array(0.0))
            for g in KENDALL_GROUPS
        }
        self.distill_proj = Linear(self.store, "distill.proj", rng,
                                   d_embed, cfg.encoder.teacher_dim)
        self.distill_ln = LayerNorm(self.store, "distill.ln",
                                    cfg.encoder.teacher_dim)
        self.teacher = TeacherStub(cfg.encoder, cfg.teacher_seed)

        # structural twin for the EMA self-ensemble; its random init is
        # immediately overwritten with the student weights
        twin_rng = np.random.default_rng(0)
        self.ema_encoder = PatchEncoder(cfg.encoder, self.store, twin_rng,
                                        prefix=_EMA_PREFIX + "enc")
        self.ema_head = PartHead(cfg.head, cfg.encoder, self.store, twin_rng,
                                 prefix=_EMA_PREFIX + "head")
        self._ema_pairs: list[tuple[Tensor, Tensor]] = []
        for name, p in self.store.items():
            if name.startswith(_EMA_PREFIX):
                src = self.store[name[len(_EMA_PREFIX):]]
                p.requires_grad = False
                p.data = src.data.copy()
                self._ema_pairs.append((src, p))
        self._ema_buffer_pairs = [
            (self.store.buffers[name[len(_EMA_PREFIX):]], buf)
            for name, buf in self.store.buffers.items()
            if name.startswith(_EMA_PREFIX)
        ]
        for src_buf, dst_buf in self._ema_buffer_pairs:
            dst_buf[...] = src_buf

        self.grid = token_grid(cfg.encoder)
        self.infer_calls = 0  # running count of single-image forward passes

    # -- parameter access ---------------------------------------------------

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.store.items() if p.requires_grad]

    # -- training forward ---------------------------------------------------

    def project_to_teacher(self, f: Tensor) -> Tensor:
        """Map the fused embedding into the teacher's space."""
        row = T.reshape(f, (1, -1))
        return T.reshape(self.distill_ln(self.distill_proj(row)), (-1,))

    def forward_train(self, rasters: np.ndarray,
                      altitudes: list[float | None],
                      gate_rng: np.random.Generator,
                      branch_mask: BranchMask = BranchMask(),
                      force_all_active: bool = False) -> TrainForward:
        """Gradient-carrying forward over one batch of rasters."""
        rasters = np.asarray(rasters, dtype=np.float64)
        b = rasters.shape[0]
        if len(altitudes) != b:
            raise ValueError("one altitude entry (or None) per raster")
        tokens, cls = self.encoder.encode_batch(rasters)
        f_cls = self.head.cls_project(cls, training=True)
        outs = []
        for i in range(b):
            t_i = T.reshape(T.gather(tokens, np.array([i])),
                            (self.cfg.encoder.n_tokens,
                             self.cfg.encoder.token_dim))
            f_i = T.reshape(T.gather(f_cls, np.array([i])), (-1,))
            outs.append(self.head.forward_image(
                t_i, f_i, self.grid, altitudes[i], "train", gate_rng,
                branch_mask=branch_mask, force_all_active=force_all_active))
        teacher = self.teacher.encode_batch(rasters)
        ema_embeddings = self._embed_with(self.ema_encoder, self.ema_head,
                                          rasters)
        return TrainForward(outs=outs, f_cls=f_cls, tokens=tokens,
                            teacher=teacher, ema_embeddings=ema_embeddings)

    # -- inference ----------------------------------------------------------

    def _embed_with(self, encoder: PatchEncoder, head: PartHead,
                    rasters: np.ndarray) -> np.ndarray:
        d_embed = self.cfg.head.embed_dim
        out = np.empty((rasters.shape[0], d_embed))
        with T.no_grad():
            tokens, cls = encoder.encode_batch(rasters)
            f_cls = head.cls_project(cls, training=False)
            for i in range(rasters.shape[0]):
                t_i = T.reshape(T.gather(tokens, np.array([i])),
                                (self.cfg.encoder.n_tokens,
                                 self.cfg.encoder.token_dim))
                f_i = T.reshape(T.gather(f_cls, np.array([i])), (-1,))
                pf = head.forward_image(t_i, f_i, self.grid, None, "infer")
                out[i] = pf.embedding.data
        return out

    def embed_batch(self, rasters: np.ndarray,
                    use_ema: bool = False) -> np.ndarray:
        """Deterministic retrieval embeddings, one forward pass per image."""
        rasters = np.asarray(rasters, dtype=np.float64)
        encoder = self.ema_encoder if use_ema else self.encoder
        head = self.ema_head if use_ema else self.head
        out = self._embed_with(encoder, head, rasters)
        self.infer_calls += rasters.shape[0]
        return out

    def embed(self, raster: np.ndarray, use_ema: bool = False) -> np.ndarray:
        return self.embed_batch(np.asarray(raster)[None], use_ema)[0]

    # -- EMA ----------------------------------------------------------------

    def ema_update(self, decay: float = EMA_DECAY) -> None:
        """ema ← decay·ema + (1−decay)·student; running buffers copied."""
        for src, dst in self._ema_pairs:
            if src.data.shape != dst.data.shape:
                raise ValueError("ema_update: shape mismatch")
            dst.data *= decay
            dst.data += (1.0 - decay) * src.data
        for src_buf, dst_buf in self._ema_buffer_pairs:
            dst_buf[...] = src_buf

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        write_checkpoint(path, self.store.state_arrays())

    def load(self, path) -> None:
        self.store.load_state_arrays(read_checkpoint(path))
