"""Gradient audit: every loss group's backward pass checked against the
central finite-difference oracle at working-profile shapes.

Each group builds its loss from fresh random leaves; the backward gradient is
compared coordinate-wise (sampled) against the two-sided difference quotient,
with error measured relative to the gradient vector's scale. Inputs that the
losses require normalized are normalized inside the rebuilt function so the
oracle perturbs unconstrained leaves.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import (
    altitude_loss,
    circle_loss,
    distill,
    diversity,
    geopart_total,
    infonce,
    masked_reconstruction,
    patch_nce,
    proxy_anchor,
    sample_mask,
    uapa,
)
from .tensor import Tensor, gradient_check

AUDIT_TOLERANCE = 1e-4

# working-profile shapes: identity-balanced batch of 8 ground + 4 overhead
# views, 96-d embeddings over 32 classes, 64 tokens of width 32, 12 prototypes
BATCH = 12
EMBED_DIM = 96
N_CLASSES = 32
N_TOKENS = 64
D_P = 32
K_MAX = 12
TEACHER_DIM = 96

AUDIT_GROUPS = (
    "circle", "proxy_anchor", "infonce", "patch_nce", "uapa",
    "mar", "diversity", "distill", "altitude", "kendall_total",
)


def _unit(rng, *shape):
    m = rng.normal(size=shape)
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def _row_softmax(rng, n, k):
    z = rng.normal(size=(n, k))
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _group_cases(rng) -> dict[str, list[tuple[np.ndarray, callable]]]:
    """Per group: (leaf initial value, build(leaf) -> scalar loss) cases."""
    cases: dict[str, list[tuple[np.ndarray, callable]]] = {}

    # -- alignment family ---------------------------------------------------
    raw_a = rng.normal(size=(BATCH, EMBED_DIM))
    raw_b = rng.normal(size=(BATCH, EMBED_DIM))
    cases["infonce"] = [
        (raw_a, lambda t: infonce(T.l2_normalize(t),
                                  T.l2_normalize(Tensor(raw_b)))),
        (raw_b, lambda t: infonce(T.l2_normalize(Tensor(raw_a)),
                                  T.l2_normalize(t))),
    ]

    labels = rng.integers(0, N_CLASSES, size=BATCH)
    raw_e = rng.normal(size=(BATCH, EMBED_DIM))
    proxies = rng.normal(size=(N_CLASSES, EMBED_DIM))
    cases["proxy_anchor"] = [
        (raw_e, lambda t: proxy_anchor(T.l2_normalize(t), labels,
                                       Tensor(proxies))),
        (proxies, lambda t: proxy_anchor(T.l2_normalize(Tensor(raw_e)),
                                         labels, t)),
    ]

    pair_labels = np.repeat(np.arange(BATCH // 2), 2)
    cases["circle"] = [
        (raw_e, lambda t: circle_loss(T.l2_normalize(t), pair_labels)),
    ]

    z_d0 = rng.normal(size=(N_TOKENS, D_P))
    z_s0 = rng.normal(size=(N_TOKENS, D_P))
    assign_d = _row_softmax(rng, N_TOKENS, K_MAX)
    assign_s = _row_softmax(rng, N_TOKENS, K_MAX)
    cases["patch_nce"] = [
        (z_d0, lambda t: patch_nce(t, Tensor(z_s0), Tensor(assign_d),
                                   Tensor(assign_s)).loss),
        (z_s0, lambda t: patch_nce(Tensor(z_d0), t, Tensor(assign_d),
                                   Tensor(assign_s)).loss),
    ]

    logit_d = rng.normal(size=N_CLASSES)
    logit_s = rng.normal(size=N_CLASSES)
    cases["uapa"] = [
        (logit_d, lambda t: uapa(t, Tensor(logit_s)).loss),
    ]

    # -- part family ----------------------------------------------------------
    mask = sample_mask(np.random.default_rng(rng.integers(2**31)), N_TOKENS)
    parts0 = rng.normal(size=(K_MAX, D_P))
    dec_w1 = rng.normal(size=(D_P, 2 * D_P)) / np.sqrt(D_P)
    dec_w2 = rng.normal(size=(2 * D_P, D_P)) / np.sqrt(2 * D_P)

    def decode(m):
        return T.matmul(T.gelu(T.matmul(m, Tensor(dec_w1))), Tensor(dec_w2))

    cases["mar"] = [
        (z_d0, lambda t: masked_reconstruction(t, Tensor(assign_d),
                                               Tensor(parts0), mask, decode)),
        (parts0, lambda t: masked_reconstruction(Tensor(z_d0),
                                                 Tensor(assign_d), t, mask,
                                                 decode)),
    ]

    bank0 = rng.normal(size=(K_MAX, D_P))
    cases["diversity"] = [(bank0, lambda t: diversity(t))]

    # -- distillation family --------------------------------------------------
    f0 = _unit(rng, EMBED_DIM)
    teacher = rng.normal(size=TEACHER_DIM)
    ema_ref = _unit(rng, EMBED_DIM)
    proj_w = rng.normal(size=(EMBED_DIM, TEACHER_DIM)) / np.sqrt(EMBED_DIM)

    def _distill_sum(f, w):
        def project(v):
            return T.reshape(T.matmul(T.reshape(v, (1, -1)), w), (-1,))
        l_cross, l_ema = distill(f, Tensor(teacher), Tensor(ema_ref), project)
        return T.add(l_cross, l_ema)

    cases["distill"] = [
        (f0, lambda t: _distill_sum(t, Tensor(proj_w))),
        (proj_w, lambda t: _distill_sum(Tensor(f0), t)),
    ]

    # -- altitude family --------------------------------------------------------
    head_w = rng.normal(size=EMBED_DIM) / np.sqrt(EMBED_DIM)
    feat = _unit(rng, EMBED_DIM)

    def alt_build(t):
        pred = T.sum_(T.mul(t, Tensor(feat)))
        return altitude_loss(pred, 220.0)

    cases["altitude"] = [(head_w, alt_build)]

    # -- combined total ----------------------------------------------------------
    group_names = ("align", "part", "distill", "alt")
    losses0 = np.array([1.3, 0.7, 2.1, 0.4])
    s0 = rng.normal(size=4) * 0.3

    def kendall_from_s(t):
        s = {g: T.reshape(T.gather(t, [i]), ()) for i, g in enumerate(group_names)}
        groups = {g: Tensor(losses0[i]) for i, g in enumerate(group_names)}
        return geopart_total(groups, s).total

    def kendall_from_l(t):
        s = {g: Tensor(s0[i]) for i, g in enumerate(group_names)}
        groups = {g: T.reshape(T.gather(t, [i]), ())
                  for i, g in enumerate(group_names)}
        return geopart_total(groups, s).total

    cases["kendall_total"] = [(s0, kendall_from_s), (losses0, kendall_from_l)]
    return cases


def run_gradient_audit(seed: int = 0, coords_per_leaf: int = 24,
                       h: float = 1e-5) -> dict[str, float]:
    """Max relative backward-vs-oracle error per loss group."""
    rng = np.random.default_rng(seed)
    cases = _group_cases(rng)
    assert set(cases) == set(AUDIT_GROUPS)
    report: dict[str, float] = {}
    for group in AUDIT_GROUPS:
        worst = 0.0
        for x0, build in cases[group]:
            n = x0.size
            if coords_per_leaf and coords_per_leaf < n:
                coords = rng.choice(n, size=coords_per_leaf, replace=False)
            else:
                coords = None
            worst = max(worst, gradient_check(build, x0, h=h, coords=coords))
        report[group] = worst
    return report


def format_audit_report(report: dict[str, float],
                        tolerance: float = AUDIT_TOLERANCE) -> str:
    lines = []
    for group, err in report.items():
        status = "ok" if err <= tolerance else "FAIL"
        lines.append(f"group={group} max_rel_err={err:.3e} {status}")
    worst = max(report.values())
    lines.append(f"worst={worst:.3e} tolerance={tolerance:.1e}")
    return "\n".join(lines)
