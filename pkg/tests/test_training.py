"""Trainer: schedule, optimizer, sampler, batch assembly, objective wiring,
and the deterministic end-to-end loop."""

import math

import numpy as np
import pytest

from partloc.config import parse_config
from partloc.dataset import DiskDataset, write_dataset
from partloc.formats import read_loss_log
from partloc.model import GeoPartModel
from partloc.tensor import Tensor
from partloc.training import (
    AdamW,
    TrainingAbort,
    assemble_batch,
    batch_losses,
    branch_mask_for,
    decay_exempt,
    lr_scale_at,
    pk_sample,
    train,
    train_step,
    _epoch_rngs,
)

TINY_CFG = """
n_locations = 4
n_test_locations = 2
raster_size = 16
altitudes = 150,250
patch_size = 8
token_dim = 16
n_blocks = 1
n_heads = 2
teacher_dim = 12
d_p = 8
embed_dim = 12
k_max = 6
k_min = 4
cls_norm = layernorm
epochs = 2
p_locations = 2
m_drone = 2
warmup_epochs = 1
mar_warmup_epochs = 1
"""


def _tiny_text(**overrides):
    lines = {}
    for line in TINY_CFG.strip().splitlines():
        key, value = (s.strip() for s in line.split("="))
        lines[key] = value
    lines.update({k: str(v) for k, v in overrides.items()})
    return "".join(f"{k} = {v}\n" for k, v in lines.items())


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_ds")
    cfg = parse_config(TINY_CFG)
    write_dataset(root, cfg)
    return DiskDataset(root), cfg


def _forward(model, cfg, batch, seed=3):
    rng = np.random.default_rng(seed)
    return model.forward_train(
        batch.rasters, batch.altitudes, rng,
        branch_mask=branch_mask_for(cfg),
        force_all_active=cfg.all_protos_active,
    )


def _one_batch(ds, cfg, seed=5, condition="normal"):
    sample = pk_sample(ds, cfg.p_locations, cfg.m_drone, seed)
    return assemble_batch(ds, sample, cfg.m_drone, condition,
                          np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_endpoints():
    assert lr_scale_at(0, 100, 10) == 0.0
    assert lr_scale_at(10, 100, 10) == 1.0
    assert lr_scale_at(100, 100, 10) == pytest.approx(0.01, abs=1e-15)


def test_lr_schedule_warmup_is_linear():
    for step in range(11):
        assert lr_scale_at(step, 100, 10) == pytest.approx(step / 10)


def test_lr_schedule_continuous_at_junction():
    left = lr_scale_at(9, 100, 10)
    peak = lr_scale_at(10, 100, 10)
    right = lr_scale_at(11, 100, 10)
    assert left < peak
    assert peak - right < 0.002  # cosine starts flat


def test_lr_schedule_monotone_decay_to_floor():
    values = [lr_scale_at(s, 200, 20, floor=0.05) for s in range(20, 201)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert min(values) == pytest.approx(0.05, abs=1e-15)


def test_lr_schedule_midpoint_closed_form():
    # halfway through decay the cosine term is exactly 0.5
    assert lr_scale_at(60, 100, 20) == pytest.approx(0.01 + 0.99 * 0.5)


def test_lr_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        lr_scale_at(-1, 100, 10)
    with pytest.raises(ValueError):
        lr_scale_at(101, 100, 10)


# ---------------------------------------------------------------------------
# weight-decay exemptions
# ---------------------------------------------------------------------------

def test_decay_exemptions():
    assert decay_exempt("kendall.align")
    assert decay_exempt("head.gate.l0.b")
    assert decay_exempt("head.fuse.l1.b")
    assert decay_exempt("enc.b0.ln1.gamma")
    assert decay_exempt("head.cls_bn.beta")
    assert decay_exempt("distill.ln.gamma")
    assert not decay_exempt("head.film.gamma")  # conditioning table, not a norm
    assert not decay_exempt("head.gate.l0.w")
    assert not decay_exempt("enc.patch.w")
    assert not decay_exempt("head.pool.l0.b")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _param(name, values):
    t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    return name, t


def test_adamw_zero_grad_zero_wd_no_change():
    name, p = _param("head.w", [1.0, -2.0, 3.0])
    opt = AdamW([(name, p)], head_lr=0.1, backbone_lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(3)
    assert opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_adamw_constant_gradient_update_magnitude_approaches_lr():
    name, p = _param("head.w", [0.0])
    lr = 0.01
    opt = AdamW([(name, p)], head_lr=lr, backbone_lr=lr, weight_decay=0.0)
    for _ in range(500):
        before = p.data.copy()
        p.grad = np.array([3.7])
        opt.step()
    assert abs(abs(p.data[0] - before[0]) - lr) < 1e-6


def test_adamw_weight_decay_shrinks_monotonically():
    name, p = _param("head.w", [4.0])
    opt = AdamW([(name, p)], head_lr=0.1, backbone_lr=0.1, weight_decay=0.5)
    norms = [abs(p.data[0])]
    for _ in range(20):
        p.grad = np.zeros(1)
        opt.step()
        norms.append(abs(p.data[0]))
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] == pytest.approx(4.0 * (1 - 0.1 * 0.5) ** 20)


def test_adamw_exempt_param_never_decayed():
    name, p = _param("kendall.align", [2.0])
    opt = AdamW([(name, p)], head_lr=0.1, backbone_lr=0.1, weight_decay=0.9)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 2.0


def test_adamw_lr_groups_by_name():
    opt = AdamW(
        [_param("enc.blk.w", [0.0]), _param("head.pool.w", [0.0])],
        head_lr=3e-4, backbone_lr=3e-5, weight_decay=0.0,
    )
    assert opt.peak_lr["enc.blk.w"] == 3e-5
    assert opt.peak_lr["head.pool.w"] == 3e-4


def test_adamw_skips_whole_step_on_nonfinite_gradient():
    (na, a), (nb, b) = _param("head.a", [1.0]), _param("head.b", [1.0])
    opt = AdamW([(na, a), (nb, b)], head_lr=0.1, backbone_lr=0.1,
                weight_decay=0.3)
    a.grad, b.grad = np.array([np.nan]), np.array([1.0])
    assert not opt.step()
    assert a.data[0] == 1.0 and b.data[0] == 1.0  # no decay either
    assert opt.skipped_steps == 1
    assert opt.t == 0
    a.grad = np.array([np.inf])
    assert not opt.step()
    assert opt.skipped_steps == 2


def test_adamw_none_grad_param_untouched():
    name, p = _param("head.w", [5.0])
    opt = AdamW([(name, p)], head_lr=0.1, backbone_lr=0.1, weight_decay=0.9)
    p.grad = None
    assert opt.step()
    assert p.data[0] == 5.0


# ---------------------------------------------------------------------------
# sampler + batch assembly
# ---------------------------------------------------------------------------

def test_pk_sample_counts_and_distinct(tiny):
    ds, cfg = tiny
    sample = pk_sample(ds, 2, 2, 0)
    assert len(sample) == 2
    locs = [g.location_id for g, _ in sample]
    assert len(set(locs)) == 2
    for _, drones in sample:
        assert len(drones) == 2
        assert len({d.altitude_m for d in drones}) == 2


def test_pk_sample_deterministic(tiny):
    ds, _ = tiny
    a = pk_sample(ds, 2, 2, 42)
    b = pk_sample(ds, 2, 2, 42)
    assert [(g.location_id, tuple(d.path for d in ds_)) for g, ds_ in a] == \
           [(g.location_id, tuple(d.path for d in ds_)) for g, ds_ in b]


def test_pk_sample_insufficient_identities_rejected(tiny):
    ds, _ = tiny
    with pytest.raises(ValueError, match="need 5"):
        pk_sample(ds, 5, 2, 0)
    with pytest.raises(ValueError):
        pk_sample(ds, 2, 3, 0)  # only 2 drone views per location


def test_assemble_batch_layout(tiny):
    ds, cfg = tiny
    batch = _one_batch(ds, cfg)
    assert batch.rasters.shape == (6, 16, 16, 3)
    assert batch.drone_count == 4
    assert sorted(batch.altitudes[:2]) == [150.0, 250.0]
    assert sorted(batch.altitudes[2:4]) == [150.0, 250.0]
    assert batch.altitudes[4:] == [None, None]
    assert batch.labels[0] == batch.labels[1] == batch.labels[4]
    assert batch.labels[2] == batch.labels[3] == batch.labels[5]
    assert batch.sat_index(0) == 4 and batch.sat_index(1) == 5
    assert batch.location_slot_of_drone(3) == 1


def test_assemble_batch_corrupts_drones_only(tiny):
    ds, cfg = tiny
    sample = pk_sample(ds, 2, 2, 7)
    batch = assemble_batch(ds, sample, 2, "fog", np.random.default_rng(0))
    clean = assemble_batch(ds, sample, 2, "normal")
    for d in range(4):
        assert not np.array_equal(batch.rasters[d], clean.rasters[d])
    for s in range(4, 6):
        assert batch.rasters[s].tobytes() == clean.rasters[s].tobytes()


def test_assemble_batch_corruption_needs_rng(tiny):
    ds, cfg = tiny
    sample = pk_sample(ds, 2, 2, 7)
    with pytest.raises(ValueError, match="rng"):
        assemble_batch(ds, sample, 2, "fog", None)


def test_branch_mask_flags():
    base = parse_config("")
    assert branch_mask_for(base).as_tuple() == (True, True, True)
    assert branch_mask_for(parse_config("cls_only = true\n")).as_tuple() == \
        (False, True, False)
    assert branch_mask_for(parse_config("part_only = true\n")).as_tuple() == \
        (True, False, False)
    assert branch_mask_for(parse_config("no_graph = true\n")).as_tuple() == \
        (True, True, False)
    with pytest.raises(ValueError, match="mutually exclusive"):
        branch_mask_for(parse_config("cls_only = true\npart_only = true\n"))


# ---------------------------------------------------------------------------
# objective wiring
# ---------------------------------------------------------------------------

def _report_for(tiny_pair, overrides="", epoch=1, seed=5):
    ds, base = tiny_pair
    cfg = parse_config(TINY_CFG + overrides)
    model = GeoPartModel(cfg.model_config())
    batch = _one_batch(ds, cfg, seed=seed)
    fwd = _forward(model, cfg, batch)
    report = batch_losses(model, fwd, batch, cfg, epoch,
                          np.random.default_rng(11))
    return report, model


def test_batch_losses_full_groups(tiny):
    report, _ = _report_for(tiny)
    assert set(report.groups) == {"align", "part", "distill", "alt"}
    for name in ("infonce", "proxy_anchor", "circle", "proxy_ce", "uapa",
                 "mar", "diversity", "distill_teacher", "distill_ema",
                 "altitude"):
        assert name in report.terms, name
    assert np.isfinite(report.total.data)
    assert report.terms["mar_weight"] == 1.0


def test_batch_losses_drop_align_removes_alignment(tiny):
    report, _ = _report_for(tiny, "drop_align = true\n")
    assert "align" not in report.groups
    for name in ("infonce", "proxy_anchor", "circle", "proxy_ce",
                 "patch_nce", "uapa"):
        assert name not in report.terms


def test_batch_losses_mar_warmup_weight_zero(tiny):
    report, _ = _report_for(tiny, epoch=0)
    assert report.terms["mar_weight"] == 0.0
    assert report.terms["mar"] > 0.0  # still measured and reported
    assert report.groups["part"] == pytest.approx(report.terms["diversity"])


def test_batch_losses_no_uapa_removes_only_uapa(tiny):
    report, _ = _report_for(tiny, "no_uapa = true\n")
    assert "uapa" not in report.terms
    assert "infonce" in report.terms and "align" in report.groups


def test_batch_losses_drop_alt_and_distill(tiny):
    report, _ = _report_for(tiny, "drop_alt = true\ndrop_distill = true\n")
    assert set(report.groups) == {"align", "part"}
    assert "altitude" not in report.terms
    assert "distill_teacher" not in report.terms


def test_batch_losses_backward_reaches_prototypes_and_kendall(tiny):
    report, model = _report_for(tiny)
    report.total.backward()
    assert model.head.bank.grad is not None
    assert np.any(model.head.bank.grad != 0.0)
    for s in model.kendall.values():
        assert s.grad is not None
    assert model.proxies.grad is not None


def test_train_step_record_schema(tiny):
    ds, cfg = tiny
    model = GeoPartModel(cfg.model_config())
    opt = AdamW(model.trainable(), cfg.head_lr, cfg.backbone_lr,
                cfg.weight_decay)
    record = train_step(model, opt, ds, cfg, 0, 0, 4, 2, _epoch_rngs(1, 0))
    assert record["step"] == 0 and record["epoch"] == 0
    assert record["condition"] == "normal"
    assert record["applied"] is True
    assert record["lr_scale"] == 0.0  # warmup start
    assert set(record["groups"]) == {"align", "part", "distill", "alt"}
    assert np.isfinite(record["total"])


def test_train_step_nonfinite_total_aborts(tiny):
    ds, cfg = tiny
    model = GeoPartModel(cfg.model_config())
    model.kendall["align"].data = np.array(np.nan)
    opt = AdamW(model.trainable(), cfg.head_lr, cfg.backbone_lr,
                cfg.weight_decay)
    with pytest.raises(TrainingAbort) as exc:
        train_step(model, opt, ds, cfg, 0, 0, 4, 2, _epoch_rngs(1, 0))
    assert exc.value.report is not None


# ---------------------------------------------------------------------------
# end-to-end loop
# ---------------------------------------------------------------------------

def test_train_writes_artifacts_and_is_deterministic(tiny, tmp_path):
    ds, cfg = tiny
    res_a = train(cfg, ds, tmp_path / "a")
    res_b = train(cfg, ds, tmp_path / "b")
    # 4 train locations / P=2 -> 2 steps per epoch, 2 epochs
    assert res_a.n_steps == 4
    assert res_a.checkpoint.is_file() and res_a.loss_log.is_file()
    assert (tmp_path / "a" / "model.skck.config").is_file()
    assert res_a.checkpoint.read_bytes() == res_b.checkpoint.read_bytes()
    assert res_a.loss_log.read_bytes() == res_b.loss_log.read_bytes()
    records = read_loss_log(res_a.loss_log)
    assert [r["step"] for r in records] == list(range(4))
    assert records[0]["terms"]["mar_weight"] == 0.0  # epoch 0 < warmup 1
    assert records[-1]["terms"]["mar_weight"] == 1.0
    assert res_a.skipped_steps == 0


def test_train_weather_online_logs_conditions(tiny, tmp_path):
    from partloc.scenes import CONDITIONS

    ds, _ = tiny
    cfg = parse_config(_tiny_text(weather_online="true", epochs=1))
    res = train(cfg, ds, tmp_path / "w")
    conditions = [r["condition"] for r in read_loss_log(res.loss_log)]
    assert conditions and all(c in CONDITIONS for c in conditions)


def test_train_parameters_actually_move(tiny, tmp_path):
    ds, cfg = tiny
    model = GeoPartModel(cfg.model_config())
    before = {n: p.data.copy() for n, p in model.trainable()}
    train(cfg, ds, tmp_path / "m", model=model)
    moved = [n for n, p in model.trainable()
             if not np.array_equal(before[n], p.data)]
    assert len(moved) > len(before) - len(model.kendall) - 5
