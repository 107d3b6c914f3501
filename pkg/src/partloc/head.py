"""Part-prototype embedding head.

Pipeline per image (train mode; inference replaces the altitude bin with the
bin-averaged modulation parameters and disables gate noise):

    tokens → linear projection to d_p → altitude FiLM → single-pass prototype
    assignment → part aggregation + residual refinement (+ centroids) →
    salience gating → {top-3 part pooling, graph-attention readout} →
    three-way fusion with the projected CLS vector → unit-norm embedding.

Everything here is deterministic given (parameters, inputs, gate rng); the
only stochastic element is the Gumbel gate noise in train mode, which consumes
an explicit generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig
from .layers import BatchNorm, LayerNorm, Linear, Mlp, ParamStore
from .tensor import Tensor

__all__ = ["HeadConfig", "BranchMask", "PartForward", "PartHead", "MEAN_BIN"]

MEAN_BIN = "MEAN"  # sentinel: use bin-averaged FiLM parameters


@dataclass(frozen=True)
class HeadConfig:
    d_p: int = 32  # part descriptor width
    embed_dim: int = 96  # fused embedding width D
    k_max: int = 12
    k_min: int = 4
    assign_temperature: float = 0.07
    gate_temperature: float = 0.5
    gate_bias_init: float = 2.0
    altitude_bins: tuple[int, ...] = (150, 200, 250, 300)
    cls_norm: str = "batchnorm"  # "batchnorm" | "layernorm"
    gat_heads: int = 4

    def __post_init__(self):
        if self.k_max < 3:
            raise ValueError("k_max must be at least 3 (top-3 pooling)")
        if self.k_min > self.k_max:
            raise ValueError("k_min cannot exceed k_max")
        if self.d_p % self.gat_heads != 0 or self.d_p % 4 != 0:
            raise ValueError("d_p must be divisible by 4 and by gat_heads")
        if self.cls_norm not in ("batchnorm", "layernorm"):
            raise ValueError(f"unknown cls_norm {self.cls_norm!r}")


@dataclass(frozen=True)
class BranchMask:
    """Which fusion branches survive (ablation rerouting)."""

    part: bool = True
    cls: bool = True
    graph: bool = True

    def as_tuple(self) -> tuple[bool, bool, bool]:
        return (self.part, self.cls, self.graph)


@dataclass
class PartForward:
    """Everything downstream consumers (losses, eval) need from one image."""

    embedding: Tensor  # (D,), unit norm
    fusion_weights: Tensor  # (3,), non-negative, sums to 1 over survivors
    tokens_dp: Tensor  # (L, d_p) modulated tokens (assignment input)
    assignment: Tensor  # (L, K_max) row-stochastic
    parts: Tensor  # (K_max, d_p) refined descriptors
    gates: Tensor  # (K_max,)
    active: np.ndarray  # bool (K_max,)
    centroids: Tensor  # (K_max, 2) in [0,1]^2
    f_part: Tensor | None
    f_cls: Tensor
    f_graph: Tensor | None


class PartHead:
    def __init__(
        self,
        cfg: HeadConfig,
        enc_cfg: EncoderConfig,
        store: ParamStore,
        rng: np.random.Generator,
        prefix: str = "head",
    ) -> None:
        self.cfg = cfg
        dp, d_out = cfg.d_p, cfg.embed_dim
        n_bins = len(cfg.altitude_bins)
        self.proj = Linear(store, f"{prefix}.proj", rng, enc_cfg.token_dim, dp)
        # FiLM: identity at init so early training is bin-agnostic
        self.film_gamma = store.register(f"{prefix}.film.gamma", np.ones((n_bins, dp)))
        self.film_beta = store.register(f"{prefix}.film.beta", np.zeros((n_bins, dp)))
        self.bank = store.register(
            f"{prefix}.bank", rng.normal(0.0, 1.0, size=(cfg.k_max, dp))
        )
        self.gate_mlp = Mlp(
            store, f"{prefix}.gate", rng, (dp, max(dp // 4, 1), 1),
            activation="gelu", final_bias=cfg.gate_bias_init,
        )
        self.refine = Mlp(store, f"{prefix}.refine", rng, (dp, dp, dp))
        # top-3 pooling: Linear, LayerNorm, GELU, Linear
        self.pool_in = Linear(store, f"{prefix}.pool.lin1", rng, 3 * dp, d_out)
        self.pool_ln = LayerNorm(store, f"{prefix}.pool.ln", d_out)
        self.pool_out = Linear(store, f"{prefix}.pool.lin2", rng, d_out, d_out)
        # graph readout
        hd = dp // cfg.gat_heads
        self.gat_node = Linear(store, f"{prefix}.gat.node", rng, dp + 2, dp)
        self.gat_w = [
            store.register(f"{prefix}.gat.l{i}.w",
                           rng.normal(0.0, (2.0 / dp) ** 0.5, size=(dp, dp)))
            for i in range(2)
        ]
        self.gat_a_src = [
            store.register(f"{prefix}.gat.l{i}.a_src",
                           rng.normal(0.0, 0.3, size=(cfg.gat_heads, hd, 1)))
            for i in range(2)
        ]
        self.gat_a_dst = [
            store.register(f"{prefix}.gat.l{i}.a_dst",
                           rng.normal(0.0, 0.3, size=(cfg.gat_heads, hd, 1)))
            for i in range(2)
        ]
        self.gat_out = Linear(store, f"{prefix}.gat.out", rng, dp, d_out)
        self.gat_ln = LayerNorm(store, f"{prefix}.gat.ln", d_out)
        # CLS branch
        self.cls_proj = Linear(store, f"{prefix}.cls_proj", rng,
                               enc_cfg.token_dim, d_out)
        self.cls_bn = (
            BatchNorm(store, f"{prefix}.cls_bn", d_out)
            if cfg.cls_norm == "batchnorm" else None
        )
        self.cls_ln = LayerNorm(store, f"{prefix}.cls_ln", d_out)
        # fusion gate: 3D → D/2 → 3, ReLU, bias logits (1,0,0)
        self.fuse_l0 = Linear(store, f"{prefix}.fuse.l0", rng, 3 * d_out, d_out // 2)
        self.fuse_l1 = Linear(
            store, f"{prefix}.fuse.l1", rng, d_out // 2, 3,
            bias_init=np.array([1.0, 0.0, 0.0]),
        )
        # zero final weights: fusion starts exactly at softmax(1,0,0), i.e.
        # biased toward the part branch, independent of the input
        self.fuse_l1.w.data[:] = 0.0
        # altitude regression head (drone-only supervision)
        self.alt_mlp = Mlp(store, f"{prefix}.alt", rng,
                           (d_out, max(d_out // 6, 1), 1))
        # masked-reconstruction decoder: Linear, GELU, LayerNorm, Linear
        self.mar_l0 = Linear(store, f"{prefix}.mar.l0", rng, dp, 2 * dp)
        self.mar_ln = LayerNorm(store, f"{prefix}.mar.ln", 2 * dp)
        self.mar_l1 = Linear(store, f"{prefix}.mar.l1", rng, 2 * dp, dp)

    # ------------------------------------------------------------------
    # pipeline stages
    # ------------------------------------------------------------------
    def project_tokens(self, tokens: Tensor) -> Tensor:
        """token_dim → d_p linear map (precedes modulation)."""
        return self.proj(tokens)

    def film_modulate(self, z: Tensor, bin_value) -> Tensor:
        """γ ⊙ z + β for one altitude bin, or the exact bin average (MEAN)."""
        if bin_value == MEAN_BIN:
            gamma = T.mean(self.film_gamma, axis=0)
            beta = T.mean(self.film_beta, axis=0)
        else:
            if bin_value not in self.cfg.altitude_bins:
                raise ValueError(f"unknown altitude bin {bin_value!r}")
            idx = self.cfg.altitude_bins.index(bin_value)
            gamma = self.film_gamma[idx]
            beta = self.film_beta[idx]
        return T.add(T.mul(z, gamma), beta)

    def assign(self, z_mod: Tensor) -> Tensor:
        """Row-stochastic single-pass assignment: softmax_k(⟨p̄_k, z̄_i⟩/τ)."""
        z_n = T.l2_normalize(z_mod, axis=-1)
        p_n = T.l2_normalize(self.bank, axis=-1)
        sims = T.matmul(z_n, T.transpose(p_n))  # (L, K)
        return T.softmax(sims, axis=-1, temperature=self.cfg.assign_temperature)

    def aggregate_and_refine(
        self, z_mod: Tensor, assignment: Tensor, grid: np.ndarray
    ) -> tuple[Tensor, Tensor]:
        """Mass-normalized part aggregation + residual refinement + centroids.

        A prototype whose total assignment mass falls below 1e-8 gets a zero
        descriptor and centroid (0.5, 0.5).
        """
        mass = T.sum_(assignment, axis=0)  # (K,)
        alive = (mass.data >= 1e-8).astype(np.float64)  # constant indicator
        safe_mass = T.clamp_min(mass, 1e-8)
        weighted = T.matmul(T.transpose(assignment), z_mod)  # (K, d_p)
        raw = T.div(weighted, T.reshape(safe_mass, (-1, 1)))
        refined = T.add(raw, self.refine(raw))
        parts = T.mul(refined, Tensor(alive[:, None]))
        cent_raw = T.div(
            T.matmul(T.transpose(assignment), Tensor(grid)),
            T.reshape(safe_mass, (-1, 1)),
        )
        centroids = T.add(
            T.mul(cent_raw, Tensor(alive[:, None])),
            Tensor((1.0 - alive)[:, None] * 0.5),
        )
        return parts, centroids

    def salience_gate(
        self,
        parts: Tensor,
        mode: str,
        gate_rng: np.random.Generator | None = None,
        force_all_active: bool = False,
    ) -> tuple[Tensor, np.ndarray]:
        """Per-prototype Gumbel-sigmoid gates plus the active-set mask.

        Train mode adds Gumbel(0,1) noise to the gate logits; infer mode is
        noise-free. Active = gate > 0.5; if fewer than k_min qualify, the
        k_min largest gates are forced active (membership only — downstream
        consumers keep the soft gate values).
        """
        if force_all_active:
            gates = Tensor(np.ones(self.cfg.k_max))
            return gates, np.ones(self.cfg.k_max, dtype=bool)
        logits = T.reshape(self.gate_mlp(parts), (-1,))  # (K,)
        if mode == "train":
            if gate_rng is None:
                raise ValueError("train-mode gating needs a generator")
            u = gate_rng.uniform(1e-12, 1.0 - 1e-12, size=self.cfg.k_max)
            noise = -np.log(-np.log(u))
            logits = T.add(logits, Tensor(noise))
        elif mode != "infer":
            raise ValueError(f"unknown gate mode {mode!r}")
        gates = T.sigmoid(T.mul_scalar(logits, 1.0 / self.cfg.gate_temperature))
        active = gates.data > 0.5
        if active.sum() < self.cfg.k_min:
            # stable argsort on -gates: descending value, ties by ascending index
            order = np.argsort(-gates.data, kind="stable")
            active = np.zeros(self.cfg.k_max, dtype=bool)
            active[order[: self.cfg.k_min]] = True
        return gates, active

    def part_pool(self, parts: Tensor, gates: Tensor) -> Tensor:
        """Top-3-by-gate pooling: gate-weighted concat → MLP → unit norm."""
        order = np.argsort(-gates.data, kind="stable")[:3]
        pieces = [
            T.mul(parts[int(k)], T.reshape(gates[int(k)], (1,)))
            for k in order
        ]
        x = T.reshape(T.concat(pieces, axis=0), (1, 3 * self.cfg.d_p))
        h = self.pool_out(T.gelu(self.pool_ln(self.pool_in(x))))
        return T.reshape(T.l2_normalize(h, axis=-1), (-1,))

    def gat_readout(self, parts: Tensor, centroids: Tensor,
                    active: np.ndarray) -> Tensor:
        """Two graph-attention layers over the active complete graph, mean
        readout, then LN(W·h) and unit normalization."""
        idx = np.flatnonzero(active)
        if idx.size == 0:
            raise AssertionError("active set empty despite k_min floor")
        feats = T.concat([parts, centroids], axis=1)  # (K, d_p+2)
        h = self.gat_node(T.gather(feats, idx, axis=0))  # (n, d_p)
        n = idx.size
        heads, hd = self.cfg.gat_heads, self.cfg.d_p // self.cfg.gat_heads
        for layer in range(2):
            z = T.matmul(h, self.gat_w[layer])  # (n, d_p)
            zh = T.transpose(T.reshape(z, (n, heads, hd)), (1, 0, 2))  # (H, n, hd)
            src = T.matmul(zh, self.gat_a_src[layer])  # (H, n, 1)
            dst = T.matmul(zh, self.gat_a_dst[layer])  # (H, n, 1)
            scores = T.leaky_relu(
                T.add(src, T.transpose(dst, (0, 2, 1))), slope=0.2
            )  # (H, n, n)
            attn = T.softmax(scores, axis=-1)
            mixed = T.matmul(attn, zh)  # (H, n, hd)
            h = T.elu(T.reshape(T.transpose(mixed, (1, 0, 2)), (n, self.cfg.d_p)))
        pooled = T.mean(h, axis=0)  # (d_p,)
        out = self.gat_ln(
            T.reshape(self.gat_out(T.reshape(pooled, (1, -1))), (1, -1))
        )
        return T.reshape(T.l2_normalize(out, axis=-1), (-1,))

    def cls_project(self, cls: Tensor, training: bool) -> Tensor:
        """Batched CLS branch: ReLU(norm(W_c · cls)), rows L2-normalized.

        Batch-norm mode uses running statistics at inference and falls back
        to layer norm for training batches smaller than 4.
        """
        x = self.cls_proj(cls)  # (B, D)
        if self.cls_bn is not None and (not training or x.shape[0] >= 4):
            x = self.cls_bn(x, training=training)
        else:
            x = self.cls_ln(x)
        x = T.relu(x)
        return T.l2_normalize(x, axis=-1)

    def fuse(
        self,
        f_part: Tensor | None,
        f_cls: Tensor,
        f_graph: Tensor | None,
        mask: BranchMask = BranchMask(),
    ) -> tuple[Tensor, Tensor]:
        """Convex fusion of the surviving unit-norm branches.

        The gate MLP scores all three branches; the softmax runs over the
        surviving logits only, and removed branches get weight exactly 0.
        """
        survivors = mask.as_tuple()
        branches = [f_part, f_cls, f_graph]
        zero = Tensor(np.zeros(self.cfg.embed_dim))
        feats = []
        for b, alive in zip(branches, survivors):
            if not alive or b is None:
                feats.append(zero)
                continue
            norm = float(np.linalg.norm(b.data))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"fuse requires unit-norm inputs, got norm {norm}")
            feats.append(b)
        x = T.reshape(T.concat(feats, axis=0), (1, -1))
        logits = T.reshape(self.fuse_l1(T.relu(self.fuse_l0(x))), (-1,))  # (3,)
        keep = np.flatnonzero(survivors)
        sub = T.softmax(T.gather(logits, keep, axis=0), axis=-1)
        # scatter the surviving weights back to 3 slots (removed -> 0)
        eye = np.zeros((len(keep), 3))
        for row, col in enumerate(keep):
            eye[row, col] = 1.0
        weights = T.reshape(
            T.matmul(T.reshape(sub, (1, -1)), Tensor(eye)), (-1,)
        )
        mixed = None
        for i, b in enumerate(feats):
            term = T.mul(b, T.reshape(weights[i], (1,)))
            mixed = term if mixed is None else T.add(mixed, term)
        fused = T.l2_normalize(mixed, axis=-1)
        return fused, weights

    def predict_altitude(self, embedding: Tensor) -> Tensor:
        """Normalized-altitude regression from the fused embedding."""
        return T.reshape(self.alt_mlp(T.reshape(embedding, (1, -1))), ())

    def mar_decode(self, mixture: Tensor) -> Tensor:
        """Reconstruct d_p tokens from per-token part mixtures."""
        return self.mar_l1(self.mar_ln(T.gelu(self.mar_l0(mixture))))

    # ------------------------------------------------------------------
    # full per-image forward
    # ------------------------------------------------------------------
    def forward_image(
        self,
        tokens: Tensor,
        f_cls: Tensor,
        grid: np.ndarray,
        altitude_m: int | None,
        mode: str,
        gate_rng: np.random.Generator | None = None,
        branch_mask: BranchMask = BranchMask(),
        force_all_active: bool = False,
    ) -> PartForward:
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        z = self.project_tokens(tokens)
        # inference marginalizes altitude: MEAN regardless of metadata
        bin_value = (
            MEAN_BIN if mode == "infer" or altitude_m is None else altitude_m
        )
        z_mod = self.film_modulate(z, bin_value)
        assignment = self.assign(z_mod)
        parts, centroids = self.aggregate_and_refine(z_mod, assignment, grid)
        gates, active = self.salience_gate(
            parts, mode, gate_rng, force_all_active=force_all_active
        )
        f_part = self.part_pool(parts, gates) if branch_mask.part else None
        f_graph = (
            self.gat_readout(parts, centroids, active)
            if branch_mask.graph else None
        )
        fused, weights = self.fuse(f_part, f_cls, f_graph, branch_mask)
        return PartForward(
            embedding=fused,
            fusion_weights=weights,
            tokens_dp=z_mod,
            assignment=assignment,
            parts=parts,
            gates=gates,
            active=active,
            centroids=centroids,
            f_part=f_part,
            f_cls=f_cls,
            f_graph=f_graph,
        )
