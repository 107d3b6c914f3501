"""Training objective: alignment, part-quality, distillation, and altitude
terms combined by learned homoscedastic-uncertainty weighting.

Every op takes and returns :class:`~partloc.tensor.Tensor` values so the
whole objective is differentiable end to end; the finite-difference oracle
in :mod:`partloc.tensor` is the ground truth for every gradient here.

Group structure
---------------
``align``    instance contrast, proxy metric terms, token-level contrast,
             uncertainty-tempered distribution matching, and the smoothed
             classification term that trains the proxy logits.
``part``     masked-token reconstruction plus the prototype de-correlation
             penalty.
``distill``  frozen-teacher projection matching plus the self-ensemble term.
``alt``      normalized-altitude regression (drone views only).

The combined total is ``sum_g exp(-s_g) * L_g + s_g`` with one learnable
log-variance ``s_g`` per group; a group that is inactive for a batch
contributes neither summand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

# contrastive temperature shared by the instance- and token-level terms
TAU_CONTRAST = 0.07
# proxy-anchor margin / scale
PROXY_MARGIN = 0.1
PROXY_SCALE = 32.0
# circle-loss margin / scale
CIRCLE_MARGIN = 0.25
CIRCLE_SCALE = 32.0
# fraction of tokens hidden from the reconstruction aggregator
MASK_RATIO = 0.30
# base distillation temperature; the adaptive temperature lives in
# [BASE_TEMPERATURE, 2 * BASE_TEMPERATURE]
BASE_TEMPERATURE = 4.0
# self-ensemble decay
EMA_DECAY = 0.996
# classification label smoothing
LABEL_SMOOTHING = 0.1

KENDALL_GROUPS = ("align", "part", "distill", "alt")

_UNIT_ATOL = 1e-6


def _require_unit_rows(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > _UNIT_ATOL):
        raise ValueError(f"{what}: rows must be unit-norm")


def _scalar(x: Tensor) -> Tensor:
    return T.reshape(x, ()) if x.data.shape != () else x


def _sum_terms(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


# ---------------------------------------------------------------------------
# instance-level contrast
# ---------------------------------------------------------------------------

def infonce(anchors: Tensor, positives: Tensor,
            temperature: float = TAU_CONTRAST) -> Tensor:
    """Symmetric matched-pair contrastive loss.

    Row ``i`` of ``anchors`` matches row ``i`` of ``positives``; every other
    row is a negative.  Both retrieval directions are averaged.
    """
    if temperature <= 0:
        raise ValueError("infonce: temperature must be positive")
    b = anchors.shape[0]
    if b < 2:
        raise ValueError("infonce: need at least 2 pairs for negatives")
    if positives.shape != anchors.shape:
        raise ValueError("infonce: shape mismatch")
    _require_unit_rows(anchors, "infonce anchors")
    _require_unit_rows(positives, "infonce positives")

    logits = T.mul_scalar(T.matmul(anchors, T.transpose(positives)),
                          1.0 / temperature)
    eye = Tensor(np.eye(b))
    diag = T.sum_(T.mul(logits, eye), axis=1)
    fwd = T.mean(T.sub(T.logsumexp(logits, axis=1), diag))
    bwd = T.mean(T.sub(T.logsumexp(T.transpose(logits), axis=1), diag))
    return T.mul_scalar(T.add(fwd, bwd), 0.5)


# ---------------------------------------------------------------------------
# proxy metric terms
# ---------------------------------------------------------------------------

def proxy_logits(embeddings: Tensor, proxies: Tensor) -> Tensor:
    """Per-location class logits: cosine between embedding and each proxy."""
    _require_unit_rows(embeddings, "proxy_logits embeddings")
    return T.matmul(embeddings, T.transpose(T.l2_normalize(proxies, axis=-1)))


def proxy_anchor(embeddings: Tensor, labels: np.ndarray, proxies: Tensor,
                 margin: float = PROXY_MARGIN,
                 scale: float = PROXY_SCALE) -> Tensor:
    """Proxy-anchor metric loss over cosine similarities.

    Proxies with in-batch positives pull them inside the margin; every proxy
    pushes its non-members outside.  Each side is a softplus of a
    log-sum-exp, averaged over the proxies that contribute.
    """
    labels = np.asarray(labels)
    n_proxies = proxies.shape[0]
    if labels.min() < 0 or labels.max() >= n_proxies:
        raise ValueError("proxy_anchor: label without a matching proxy")

    sims = proxy_logits(embeddings, proxies)        # (B, |C|)
    cols = T.transpose(sims)                        # (|C|, B)
    with_pos = np.unique(labels)

    pos_terms = []
    for c in with_pos:
        idx = np.flatnonzero(labels == c)
        vals = T.gather(T.reshape(T.gather(cols, np.array([c])), (-1,)), idx)
        arg = T.mul_scalar(T.add_scalar(vals, -margin), -scale)
        pos_terms.append(T.softplus(T.logsumexp(arg, axis=0)))
    pos = T.mul_scalar(_sum_terms(pos_terms), 1.0 / len(with_pos))

    neg_terms = []
    for c in range(n_proxies):
        idx = np.flatnonzero(labels != c)
        if idx.size == 0:
            continue
        vals = T.gather(T.reshape(T.gather(cols, np.array([c])), (-1,)), idx)
        arg = T.mul_scalar(T.add_scalar(vals, margin), scale)
        neg_terms.append(T.softplus(T.logsumexp(arg, axis=0)))
    neg = T.mul_scalar(_sum_terms(neg_terms), 1.0 / n_proxies)
    return T.add(pos, neg)


def circle_loss(embeddings: Tensor, labels: np.ndarray,
                margin: float = CIRCLE_MARGIN,
                scale: float = CIRCLE_SCALE) -> Tensor:
    """Unified pair-margin loss: ``log(1 + sum_{n,p} e^{γ(s_n - s_p + m)})``.

    Positive pairs share a label; negative pairs do not.  The log1p-of-sums
    is evaluated as softplus(logsumexp) for stability.
    """
    labels = np.asarray(labels)
    b = embeddings.shape[0]
    _require_unit_rows(embeddings, "circle_loss embeddings")
    iu, ju = np.triu_indices(b, k=1)
    same = labels[iu] == labels[ju]
    pos_i, pos_j = iu[same], ju[same]
    neg_i, neg_j = iu[~same], ju[~same]
    if pos_i.size == 0 or neg_i.size == 0:
        raise ValueError("circle_loss: need at least one positive and one "
                         "negative pair")

    sims = T.matmul(embeddings, T.transpose(embeddings))
    flat = T.reshape(sims, (-1,))
    s_pos = T.gather(flat, pos_i * b + pos_j)
    s_neg = T.gather(flat, neg_i * b + neg_j)
    diff = T.sub(T.reshape(s_neg, (-1, 1)), T.reshape(s_pos, (1, -1)))
    arg = T.mul_scalar(T.add_scalar(diff, margin), scale)
    return T.softplus(T.logsumexp(T.reshape(arg, (-1,)), axis=0))


# ---------------------------------------------------------------------------
# token-level contrast
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchContrastResult:
    loss: Tensor
    n_contributing: int

    @property
    def contributed(self) -> bool:
        return self.n_contributing > 0


def patch_nce(z_d: Tensor, z_s: Tensor, assign_d: Tensor, assign_s: Tensor,
              temperature: float = TAU_CONTRAST) -> PatchContrastResult:
    """Token-level contrast between two views sharing a prototype bank.

    A ground-view token's positives are the overhead-view tokens whose
    highest-responsibility prototype matches its own; all overhead tokens
    form the denominator.  Tokens with no positives are skipped; the loss
    averages over contributing tokens and reports how many contributed.
    """
    top_d = assign_d.data.argmax(axis=1)
    top_s = assign_s.data.argmax(axis=1)
    zn_d = T.l2_normalize(z_d, axis=-1)
    zn_s = T.l2_normalize(z_s, axis=-1)
    logits = T.mul_scalar(T.matmul(zn_d, T.transpose(zn_s)),
                          1.0 / temperature)
    lse = T.logsumexp(logits, axis=1)               # (L_d,)

    per_token = []
    for i in range(top_d.size):
        pos = np.flatnonzero(top_s == top_d[i])
        if pos.size == 0:
            continue
        row = T.reshape(T.gather(logits, np.array([i])), (-1,))
        hit = T.mean(T.gather(row, pos))
        per_token.append(T.sub(_scalar(T.gather(lse, np.array([i]))), hit))
    if not per_token:
        return PatchContrastResult(Tensor(np.array(0.0)), 0)
    loss = T.mul_scalar(_sum_terms(per_token), 1.0 / len(per_token))
    return PatchContrastResult(_scalar(loss), len(per_token))


# ---------------------------------------------------------------------------
# smoothed proxy classification
# ---------------------------------------------------------------------------

def smoothed_cross_entropy(logits: Tensor, labels: np.ndarray,
                           smoothing: float = LABEL_SMOOTHING) -> Tensor:
    """Cross-entropy against smoothed targets ``(1-ε)·onehot + ε/|C|``."""
    labels = np.asarray(labels)
    b, n_classes = logits.shape
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("smoothed_cross_entropy: label out of range")
    onehot = np.zeros((b, n_classes))
    onehot[np.arange(b), labels] = 1.0
    target = (1.0 - smoothing) * onehot + smoothing / n_classes
    lse = T.logsumexp(logits, axis=1)
    dots = T.sum_(T.mul(logits, Tensor(target)), axis=1)
    return T.mean(T.sub(lse, dots))


# ---------------------------------------------------------------------------
# uncertainty-tempered distribution matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemperedKLResult:
    loss: Tensor
    temperature: float
    entropy_gap: float


def _entropy(logits: Tensor) -> Tensor:
    p = T.softmax(logits, axis=-1)
    return T.sub(T.logsumexp(logits, axis=-1), T.sum_(T.mul(p, logits)))


def uapa(z_d: Tensor, z_s: Tensor,
         base_temperature: float = BASE_TEMPERATURE) -> TemperedKLResult:
    """Uncertainty-adaptive KL between ground and overhead class logits.

    The temperature grows with the positive entropy gap (ground more
    uncertain than overhead), from the base value up to twice it; the
    overhead side is the detached teacher.  Returns ``T^2 * KL`` with the
    ground distribution as the first KL argument.
    """
    n_classes = z_d.shape[-1]
    if z_d.shape != z_s.shape or z_d.data.ndim != 1:
        raise ValueError("uapa: logit vectors must share a 1-D shape")
    if n_classes < 2:
        raise ValueError("uapa: need at least 2 classes")
    h_max = float(np.log(n_classes))

    teacher = T.detach(z_s)
    gap = T.clamp_min(T.sub(_entropy(z_d), _entropy(teacher)), 0.0)
    temp = T.add_scalar(T.mul_scalar(gap, base_temperature / h_max),
                        base_temperature)

    zd_t = T.div(z_d, temp)
    zs_t = T.div(teacher, temp)
    log_pd = T.sub(zd_t, T.logsumexp(zd_t, axis=-1, keepdims=True))
    log_ps = T.sub(zs_t, T.logsumexp(zs_t, axis=-1, keepdims=True))
    kl = T.clamp_min(T.sum_(T.mul(T.softmax(zd_t, axis=-1),
                                  T.sub(log_pd, log_ps))), 0.0)
    loss = T.mul(T.mul(temp, temp), kl)
    return TemperedKLResult(_scalar(loss), float(temp.data),
                            float(gap.data))


# ---------------------------------------------------------------------------
# masked-token reconstruction
# ---------------------------------------------------------------------------

def sample_mask(rng: np.random.Generator, n_tokens: int,
                ratio: float = MASK_RATIO) -> np.ndarray:
    """Sorted indices of the tokens hidden from the aggregator."""
    n_masked = max(1, int(round(ratio * n_tokens)))
    return np.sort(rng.choice(n_tokens, size=n_masked, replace=False))


def masked_reconstruction(z_orig: Tensor, assignment: Tensor,
                          parts_visible: Tensor, mask: np.ndarray,
                          decode: Callable[[Tensor], Tensor]) -> Tensor:
    """Cosine reconstruction error of masked tokens from visible-only parts.

    Each masked token is rebuilt by decoding its responsibility-weighted
    mixture of the visible-token part descriptors.  The mixture weights at
    masked rows are detached — the assignment is trained only through the
    visible aggregation path — while the reconstruction targets stay live.
    """
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("masked_reconstruction: empty mask")
    weights = T.detach(T.gather(assignment, mask))   # (|M|, K), no gradient
    mixture = T.matmul(weights, parts_visible)       # (|M|, d_p)
    recon = decode(mixture)
    targets = T.gather(z_orig, mask)
    cos = T.cosine_similarity(recon, targets)        # (|M|,)
    return T.mean(T.add_scalar(T.neg(cos), 1.0))


# ---------------------------------------------------------------------------
# prototype de-correlation
# ---------------------------------------------------------------------------

def diversity(bank: Tensor) -> Tensor:
    """Mean squared off-diagonal cosine similarity of the prototype bank."""
    k = bank.shape[0]
    norms = np.linalg.norm(bank.data, axis=-1)
    if np.any(norms < 1e-12):
        raise ValueError("diversity: zero-norm prototype")
    unit = T.l2_normalize(bank, axis=-1)
    gram = T.matmul(unit, T.transpose(unit))
    off = T.mul(T.mul(gram, gram), Tensor(1.0 - np.eye(k)))
    return T.mul_scalar(T.sum_(off), 1.0 / (k * (k - 1)))


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def distill(f: Tensor, teacher_vec: Tensor, ema_vec: Tensor,
            project: Callable[[Tensor], Tensor]) -> tuple[Tensor, Tensor]:
    """Frozen-teacher and self-ensemble distillation terms.

    ``project`` maps the fused embedding into the teacher's space (a learned
    linear map followed by a normalization layer, owned by the model).  Both
    reference vectors are treated as constants.
    """
    t = T.detach(teacher_vec)
    e = T.detach(ema_vec)
    pf = project(f)
    diff = T.sub(pf, t)
    l_cross = T.add(T.mean(T.mul(diff, diff)),
                    T.add_scalar(T.neg(T.cosine_similarity(pf, t)), 1.0))
    l_ema = T.add_scalar(T.neg(T.cosine_similarity(f, e)), 1.0)
    return _scalar(l_cross), _scalar(l_ema)


# ---------------------------------------------------------------------------
# altitude regression
# ---------------------------------------------------------------------------

def normalized_altitude(altitude_m: float) -> float:
    """Map meters to the regression target: 150 m → 0, 300 m → 1."""
    return (altitude_m - 150.0) / 150.0


def altitude_loss(pred: Tensor, altitude_m: float | None) -> Tensor:
    """Smooth-L1 error on normalized altitude; 0 when metadata is absent."""
    if altitude_m is None:
        return Tensor(np.array(0.0))
    err = T.add_scalar(_scalar(pred), -normalized_altitude(altitude_m))
    return T.smooth_l1(err)


# ---------------------------------------------------------------------------
# learned group weighting
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    """Per-group sums, log-variance snapshot, weights, and the grand total."""
    groups: dict[str, float]
    s: dict[str, float]
    weights: dict[str, float]
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def geopart_total(groups: Mapping[str, Tensor],
                  s_params: Mapping[str, Tensor]) -> LossReport:
    """Combine active group losses: ``sum_g exp(-s_g) * L_g + s_g``.

    A group missing from ``groups`` is inactive and contributes neither the
    weighted loss nor its log-variance summand.  Non-finite group losses are
    rejected by name.  Stationarity in ``s_g`` (losses held fixed) sits at
    ``s_g = log L_g``, keeping every weight ``exp(-s_g)`` positive.
    """
    unknown = set(groups) - set(KENDALL_GROUPS)
    if unknown:
        raise ValueError(f"geopart_total: unknown groups {sorted(unknown)}")
    summands = []
    report_groups: dict[str, float] = {}
    report_s: dict[str, float] = {}
    report_w: dict[str, float] = {}
    for g in KENDALL_GROUPS:
        if g not in groups:
            continue
        loss_g = _scalar(groups[g])
        if not np.isfinite(loss_g.data):
            raise ValueError(f"geopart_total: non-finite loss for group "
                             f"'{g}'")
        s_g = _scalar(s_params[g])
        summands.append(T.add(T.mul(T.exp(T.neg(s_g)), loss_g), s_g))
        report_groups[g] = float(loss_g.data)
        report_s[g] = float(s_g.data)
        report_w[g] = float(np.exp(-s_g.data))
    if not summands:
        raise ValueError("geopart_total: no active groups")
    return LossReport(groups=report_groups, s=report_s, weights=report_w,
                      total=_sum_terms(summands))
