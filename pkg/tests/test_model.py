"""Model assembly: EMA twin, persistence, inference API, determinism."""

import numpy as np
import pytest

from partloc import tensor as T
from partloc.encoder import EncoderConfig
from partloc.head import HeadConfig
from partloc.losses import distill
from partloc.model import GeoPartModel, ModelConfig
from partloc.tensor import Tensor


def _cfg(init_seed=0):
    return ModelConfig(
        encoder=EncoderConfig(raster_size=16, patch_size=8, token_dim=16,
                              n_blocks=1, n_heads=2, teacher_dim=12),
        head=HeadConfig(d_p=8, embed_dim=12, k_max=6, k_min=4,
                        cls_norm="layernorm"),
        n_locations=5,
        init_seed=init_seed,
    )


def _rasters(n, seed=0, size=16):
    return np.random.default_rng(seed).uniform(size=(n, size, size, 3))


def test_ema_twin_matches_student_at_init():
    m = GeoPartModel(_cfg())
    ema_names = [n for n, _ in m.store.items() if n.startswith("ema.")]
    assert ema_names, "EMA twin missing"
    for name in ema_names:
        np.testing.assert_array_equal(m.store[name].data,
                                      m.store[name[4:]].data)
        assert not m.store[name].requires_grad


def test_construction_is_deterministic():
    a = GeoPartModel(_cfg()).store.state_arrays()
    b = GeoPartModel(_cfg()).store.state_arrays()
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    c = GeoPartModel(_cfg(init_seed=1)).store.state_arrays()
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_ema_update_closed_form_and_endpoints():
    m = GeoPartModel(_cfg())
    src, dst = m._ema_pairs[0]
    before = dst.data.copy()
    src.data = src.data + 1.0
    m.ema_update(decay=0.996)
    np.testing.assert_allclose(dst.data, 0.996 * before
                               + 0.004 * src.data, rtol=1e-12)
    m.ema_update(decay=0.0)
    np.testing.assert_array_equal(dst.data, src.data)
    snapshot = dst.data.copy()
    src.data = src.data + 5.0
    m.ema_update(decay=1.0)
    np.testing.assert_array_equal(dst.data, snapshot)


def test_ema_parameters_never_receive_gradients():
    m = GeoPartModel(_cfg())
    fwd = m.forward_train(_rasters(4), [150.0, None, 200.0, None],
                          np.random.default_rng(0))
    loss = T.mean(T.stack([T.sum_(o.embedding) for o in fwd.outs]))
    m.store.zero_grad()
    T.backward(loss)
    for name, p in m.store.items():
        if name.startswith("ema."):
            assert p.grad is None, name


def test_embed_batch_unit_norm_and_call_count():
    m = GeoPartModel(_cfg())
    x = _rasters(3)
    assert m.infer_calls == 0
    emb = m.embed_batch(x)
    assert m.infer_calls == 3
    assert emb.shape == (3, 12)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-10)
    single = m.embed(x[1])
    assert m.infer_calls == 4
    # batch-shape-dependent BLAS rounding allows last-bit wiggle
    np.testing.assert_allclose(single, emb[1], atol=1e-12)
    # identical call shape → bit-identical result
    assert m.embed(x[1]).tobytes() == single.tobytes()


def test_ema_embeddings_match_student_at_init():
    m = GeoPartModel(_cfg())
    x = _rasters(2, seed=3)
    assert m.embed_batch(x).tobytes() == m.embed_batch(x, use_ema=True).tobytes()


def test_checkpoint_round_trip(tmp_path):
    m = GeoPartModel(_cfg())
    for _, p in m.trainable():
        p.data = p.data + 0.01  # move away from init
    m.ema_update(0.5)
    path = tmp_path / "model.ckpt"
    m.save(path)

    fresh = GeoPartModel(_cfg())
    fresh.load(path)
    # checkpoint payloads are single-precision: loaded state equals the
    # f32 rounding of the saved state, exactly
    for name, arr in m.store.state_arrays().items():
        loaded = fresh.store.state_arrays()[name]
        np.testing.assert_array_equal(loaded,
                                      arr.astype(np.float32).astype(np.float64),
                                      err_msg=name)
    x = _rasters(2, seed=5)
    np.testing.assert_allclose(fresh.embed_batch(x), m.embed_batch(x),
                               atol=1e-6)

    # re-saving the loaded model reproduces the file byte for byte
    again = tmp_path / "again.ckpt"
    fresh.save(again)
    assert path.read_bytes() == again.read_bytes()


def test_forward_train_shapes_and_validation():
    m = GeoPartModel(_cfg())
    x = _rasters(3, seed=7)
    fwd = m.forward_train(x, [150.0, 250.0, None], np.random.default_rng(1))
    assert len(fwd.outs) == 3
    assert fwd.f_cls.shape == (3, 12)
    assert fwd.tokens.shape == (3, 4, 16)
    assert fwd.teacher.shape == (3, 12)
    assert fwd.ema_embeddings.shape == (3, 12)
    with pytest.raises(ValueError):
        m.forward_train(x, [150.0], np.random.default_rng(1))


def test_teacher_is_frozen_and_not_checkpointed():
    m = GeoPartModel(_cfg())
    assert not any(n.startswith("teacher") for n, _ in m.store.items())
    x = _rasters(2, seed=9)
    t1 = m.teacher.encode_batch(x)
    for _, p in m.trainable():
        p.data = p.data * 1.5
    t2 = m.teacher.encode_batch(x)
    np.testing.assert_array_equal(t1, t2)


def test_distill_projector_gradient_reaches_projection_weights():
    m = GeoPartModel(_cfg())
    f = Tensor(np.random.default_rng(11).normal(size=12), requires_grad=True)
    teacher_vec = Tensor(np.random.default_rng(12).normal(size=12))
    ema_vec = Tensor(np.random.default_rng(13).normal(size=12))
    l_cross, l_ema = distill(f, teacher_vec, ema_vec, m.project_to_teacher)
    m.store.zero_grad()
    T.backward(T.add(l_cross, l_ema))
    assert m.store["distill.proj.w"].grad is not None
    assert np.any(m.store["distill.proj.w"].grad != 0)


def test_rejects_tiny_location_count():
    with pytest.raises(ValueError):
        ModelConfig(
            encoder=EncoderConfig(raster_size=16, patch_size=8, token_dim=16,
                                  n_blocks=1, n_heads=2),
            head=HeadConfig(d_p=8, embed_dim=12, k_max=6, k_min=4,
                            cls_norm="layernorm"),
            n_locations=1,
        )
