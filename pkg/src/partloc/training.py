"""Deterministic training loop: identity-balanced batch sampling, the full
multi-term objective wired to the part head, decoupled-weight-decay adaptive
optimization with warmup + cosine scheduling, EMA self-ensembling, online
weather corruption of ground views, and ablation toggles.

Given (config, seed) the whole parameter trajectory is reproducible bit for
bit in double precision on one thread: every random draw flows from per-epoch
seed sequences, and log records contain no wall-clock state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, save_config
from .dataset import DiskDataset, TrainGroup
from .formats import ManifestRecord, append_loss_record
from .head import BranchMask, PartHead
from .losses import (
    LossReport,
    altitude_loss,
    circle_loss,
    distill,
    diversity,
    geopart_total,
    infonce,
    masked_reconstruction,
    patch_nce,
    proxy_anchor,
    proxy_logits,
    sample_mask,
    smoothed_cross_entropy,
    uapa,
)
from .model import GeoPartModel, TrainForward
from .scenes import corrupt, sample_condition
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_NAME = "model.skck"
LOSS_LOG_NAME = "loss_log.jsonl"
CONFIG_SIDECAR_SUFFIX = ".config"


class TrainingAbort(RuntimeError):
    """Raised when a step produces a non-finite total; carries the report."""

    def __init__(self, report: LossReport, step: int):
        super().__init__(f"non-finite loss total at step {step}")
        self.report = report
        self.step = step


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def lr_scale_at(step: int, total_steps: int, warmup_steps: int,
                floor: float = 0.01) -> float:
    """Peak-relative LR multiplier: linear 0→1 warmup, cosine 1→floor decay.

    Continuous at the junction: the warmup ramp reaches 1 exactly where the
    cosine branch starts at 1.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 < floor <= 1:
        raise ValueError(f"floor must be in (0, 1], got {floor}")
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    if total_steps <= warmup_steps:
        return 1.0
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def decay_exempt(name: str) -> bool:
    """Parameters excluded from weight decay: group log-variances, gate and
    fusion biases, and normalization affine parameters."""
    if name.startswith("kendall."):
        return True
    parts = name.split(".")
    leaf = parts[-1]
    owner = parts[-2] if len(parts) > 1 else ""
    if leaf == "b" and ("gate" in parts or "fuse" in parts):
        return True
    if leaf in ("gamma", "beta") and ("ln" in owner or "bn" in owner):
        return True
    return False


class AdamW:
    """Decoupled-weight-decay Adam over named parameters with two LR groups:
    encoder parameters (names under ``enc.``) at the backbone rate, everything
    else at the head rate. A step with any non-finite gradient is skipped
    whole and counted as an incident."""

    def __init__(self, named_params: list[tuple[str, Tensor]],
                 head_lr: float, backbone_lr: float,
                 weight_decay: float = 0.0) -> None:
        if min(head_lr, backbone_lr) <= 0:
            raise ValueError("learning rates must be positive")
        self.params = list(named_params)
        self.peak_lr = {
            name: backbone_lr if name.startswith("enc.") else head_lr
            for name, _ in self.params
        }
        self.weight_decay = float(weight_decay)
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0
        self.skipped_steps = 0

    def grads_finite(self) -> bool:
        return all(
            p.grad is None or np.all(np.isfinite(p.grad))
            for _, p in self.params
        )

    def step(self, lr_scale: float = 1.0) -> bool:
        """Apply one update; returns False (and skips everything) if any
        gradient is non-finite."""
        if not self.grads_finite():
            self.skipped_steps += 1
            return False
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            lr = self.peak_lr[name] * lr_scale
            if self.weight_decay > 0.0 and not decay_exempt(name):
                p.data *= 1.0 - lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        return True

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# identity-balanced sampling and batch assembly
# ---------------------------------------------------------------------------

def pk_sample(dataset: DiskDataset, p_locations: int, m_drone: int,
              rng: np.random.Generator | int,
              ) -> list[tuple[TrainGroup, tuple[ManifestRecord, ...]]]:
    """Draw P distinct locations with M drone views each (plus each
    location's satellite tile, carried on the group)."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    eligible = [
        lid for lid in dataset.train_location_ids
        if len(dataset.group(lid).drones) >= m_drone
    ]
    if len(eligible) < p_locations:
        raise ValueError(
            f"need {p_locations} locations with >= {m_drone} drone views, "
            f"have {len(eligible)}"
        )
    chosen = rng.choice(len(eligible), size=p_locations, replace=False)
    batch = []
    for pick in chosen:
        group = dataset.group(eligible[int(pick)])
        view_idx = rng.choice(len(group.drones), size=m_drone, replace=False)
        batch.append((group, tuple(group.drones[int(i)] for i in view_idx)))
    return batch


@dataclass
class Batch:
    """Assembled step input: drone images first (M per location), then one
    satellite tile per location, in sampling order."""

    rasters: np.ndarray          # (P*M + P, H, W, 3)
    altitudes: list[float | None]
    labels: np.ndarray           # (P*M + P,) train class labels
    p_locations: int
    m_drone: int
    condition: str

    @property
    def drone_count(self) -> int:
        return self.p_locations * self.m_drone

    def sat_index(self, location_slot: int) -> int:
        return self.drone_count + location_slot

    def location_slot_of_drone(self, drone_index: int) -> int:
        return drone_index // self.m_drone


def assemble_batch(dataset: DiskDataset,
                   sample: list[tuple[TrainGroup, tuple[ManifestRecord, ...]]],
                   m_drone: int,
                   condition: str = "normal",
                   weather_rng: np.random.Generator | None = None) -> Batch:
    """Load rasters for a sampled batch; under a non-normal condition the
    drone views are corrupted while satellite tiles stay byte-identical to
    their clean renders."""
    if condition != "normal" and weather_rng is None:
        raise ValueError("corrupting conditions need a weather rng")
    drone_rasters, altitudes, drone_labels = [], [], []
    sat_rasters, sat_labels = [], []
    for group, drones in sample:
        label = dataset.label_of(group.location_id)
        for rec in drones:
            raster = dataset.load_raster(rec)
            if condition != "normal":
                seed = int(weather_rng.integers(0, 2**31 - 1))
                raster = corrupt(raster, condition, seed)
            drone_rasters.append(raster)
            altitudes.append(float(rec.altitude_m))
            drone_labels.append(label)
        sat_rasters.append(dataset.load_raster(group.satellite))
        sat_labels.append(label)
    rasters = np.stack(drone_rasters + sat_rasters)
    altitudes = altitudes + [None] * len(sat_rasters)
    labels = np.array(drone_labels + sat_labels, dtype=np.int64)
    return Batch(rasters, altitudes, labels, len(sample), m_drone, condition)


def branch_mask_for(cfg: RunConfig) -> BranchMask:
    if cfg.cls_only and cfg.part_only:
        raise ValueError("cls_only and part_only are mutually exclusive")
    if cfg.cls_only:
        return BranchMask(part=False, cls=True, graph=False)
    if cfg.part_only:
        return BranchMask(part=True, cls=False, graph=False)
    if cfg.no_graph:
        return BranchMask(graph=False)
    return BranchMask()


# ---------------------------------------------------------------------------
# objective assembly
# ---------------------------------------------------------------------------

def _mean_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul_scalar(total, 1.0 / len(terms))


def batch_losses(model: GeoPartModel, fwd: TrainForward, batch: Batch,
                 cfg: RunConfig, epoch: int,
                 mask_rng: np.random.Generator) -> LossReport:
    """Assemble every active loss group for one forward batch and combine
    them with the uncertainty weighting. Term values are recorded on the
    returned report."""
    head: PartHead = model.head
    n_drone, n_total = batch.drone_count, len(fwd.outs)
    p_loc, m_drone = batch.p_locations, batch.m_drone
    emb = T.stack([out.embedding for out in fwd.outs])  # (B, D)
    labels = batch.labels
    groups: dict[str, Tensor] = {}
    term_values: dict[str, float] = {}

    def record(name: str, value: Tensor) -> Tensor:
        term_values[name] = float(value.data)
        return value

    if not cfg.drop_align:
        sat_rows = T.gather(emb, list(range(n_drone, n_total)))  # (P, D)
        nce_terms = []
        for m in range(m_drone):
            idx = [p * m_drone + m for p in range(p_loc)]
            nce_terms.append(infonce(T.gather(emb, idx), sat_rows))
        align_terms = [
            record("infonce", _mean_terms(nce_terms)),
            record("proxy_anchor", proxy_anchor(emb, labels, model.proxies)),
            record("circle", circle_loss(emb, labels)),
        ]
        logits_all = proxy_logits(emb, model.proxies)  # (B, C)
        align_terms.append(
            record("proxy_ce", smoothed_cross_entropy(logits_all, labels))
        )
        token_terms = []
        for p in range(p_loc):
            d0, s = p * m_drone, batch.sat_index(p)
            result = patch_nce(
                fwd.outs[d0].tokens_dp, fwd.outs[s].tokens_dp,
                fwd.outs[d0].assignment, fwd.outs[s].assignment,
            )
            if result.contributed:
                token_terms.append(result.loss)
        if token_terms:
            align_terms.append(record("patch_nce", _mean_terms(token_terms)))
        else:
            term_values["patch_nce"] = 0.0
        if not cfg.no_uapa:
            uapa_terms = []
            for d in range(n_drone):
                s = batch.sat_index(batch.location_slot_of_drone(d))
                z_d = T.reshape(T.gather(logits_all, [d]), (-1,))
                z_s = T.reshape(T.gather(logits_all, [s]), (-1,))
                uapa_terms.append(uapa(z_d, z_s).loss)
            align_terms.append(record("uapa", _mean_terms(uapa_terms)))
        total = align_terms[0]
        for term in align_terms[1:]:
            total = T.add(total, term)
        groups["align"] = total

    if not cfg.drop_part:
        mar_terms = []
        for p in range(p_loc):
            out = fwd.outs[p * m_drone]
            n_tokens = out.tokens_dp.shape[0]
            mask = sample_mask(mask_rng, n_tokens)
            visible = np.setdiff1d(np.arange(n_tokens), mask)
            parts_vis, _ = head.aggregate_and_refine(
                T.gather(out.tokens_dp, visible),
                T.gather(out.assignment, visible),
                model.grid[visible],
            )
            mar_terms.append(masked_reconstruction(
                out.tokens_dp, out.assignment, parts_vis, mask,
                head.mar_decode,
            ))
        mar_raw = record("mar", _mean_terms(mar_terms))
        mar_weight = 0.0 if epoch < cfg.mar_warmup_epochs else 1.0
        term_values["mar_weight"] = mar_weight
        groups["part"] = T.add(
            T.mul_scalar(mar_raw, mar_weight),
            record("diversity", diversity(head.bank)),
        )

    if not cfg.drop_distill:
        cross_terms, ema_terms = [], []
        for i in range(n_total):
            l_cross, l_ema = distill(
                fwd.outs[i].embedding,
                Tensor(fwd.teacher[i]),
                Tensor(fwd.ema_embeddings[i]),
                model.project_to_teacher,
            )
            cross_terms.append(l_cross)
            ema_terms.append(l_ema)
        groups["distill"] = T.add(
            record("distill_teacher", _mean_terms(cross_terms)),
            record("distill_ema", _mean_terms(ema_terms)),
        )

    if not cfg.drop_alt:
        alt_terms = [
            altitude_loss(head.predict_altitude(fwd.outs[d].embedding),
                          batch.altitudes[d])
            for d in range(n_drone)
            if batch.altitudes[d] is not None
        ]
        if alt_terms:
            groups["alt"] = record("altitude", _mean_terms(alt_terms))

    report = geopart_total(groups, model.kendall)
    report.terms.update(term_values)
    return report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    loss_log: Path
    n_steps: int
    model: GeoPartModel
    skipped_steps: int


def _epoch_rngs(train_seed: int, epoch: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence((train_seed, epoch)).spawn(4)
    names = ("sampler", "gate", "mask", "weather")
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def train_step(model: GeoPartModel, optimizer: AdamW, dataset: DiskDataset,
               cfg: RunConfig, epoch: int, global_step: int, total_steps: int,
               warmup_steps: int,
               rngs: dict[str, np.random.Generator]) -> dict:
    """One optimizer step; returns the loss-log record."""
    sample = pk_sample(dataset, cfg.p_locations, cfg.m_drone, rngs["sampler"])
    condition = (
        sample_condition(rngs["weather"]) if cfg.weather_online else "normal"
    )
    batch = assemble_batch(
        dataset, sample, cfg.m_drone, condition, rngs["weather"]
    )
    fwd = model.forward_train(
        batch.rasters, batch.altitudes, rngs["gate"],
        branch_mask=branch_mask_for(cfg),
        force_all_active=cfg.all_protos_active,
    )
    report = batch_losses(model, fwd, batch, cfg, epoch, rngs["mask"])
    if not np.isfinite(report.total.data):
        raise TrainingAbort(report, global_step)
    optimizer.zero_grad()
    report.total.backward()
    scale = cfg.lr_scale * lr_scale_at(
        global_step, total_steps, warmup_steps, cfg.lr_floor
    )
    applied = optimizer.step(scale)
    model.ema_update(cfg.ema_decay)
    return {
        "step": global_step,
        "epoch": epoch,
        "condition": condition,
        "lr_scale": scale,
        "applied": applied,
        "total": float(report.total.data),
        "groups": report.groups,
        "s": report.s,
        "weights": report.weights,
        "terms": report.terms,
    }


def train(cfg: RunConfig, dataset: DiskDataset, out_dir: str | Path,
          model: GeoPartModel | None = None) -> TrainResult:
    """Full deterministic run: writes ``loss_log.jsonl`` and ``model.skck``
    (+ a reserialized config sidecar) under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = GeoPartModel(cfg.model_config())
    branch_mask_for(cfg)  # reject conflicting flags before any work
    optimizer = AdamW(
        model.trainable(), cfg.head_lr, cfg.backbone_lr, cfg.weight_decay
    )
    steps_per_epoch = max(1, len(dataset.train_location_ids) // cfg.p_locations)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    ckpt_path = out / CHECKPOINT_NAME
    log_path = out / LOSS_LOG_NAME
    global_step = 0
    with open(log_path, "w", encoding="utf-8", newline="\n") as log_f:
        for epoch in range(cfg.epochs):
            rngs = _epoch_rngs(cfg.train_seed, epoch)
            for _ in range(steps_per_epoch):
                record = train_step(
                    model, optimizer, dataset, cfg, epoch, global_step,
                    total_steps, warmup_steps, rngs,
                )
                append_loss_record(log_f, record)
                global_step += 1
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                model.save(out / f"model_ep{epoch + 1:04d}.skck")
    model.save(ckpt_path)
    save_config(str(ckpt_path) + CONFIG_SIDECAR_SUFFIX, cfg)
    return TrainResult(ckpt_path, log_path, global_step, model,
                       optimizer.skipped_steps)
