"""Windowed kernel attention with zero-encoded gaps.

A length-T multivariate series is cut into L windows of C consecutive
steps. Inside each window, queries and keys are linear projections of the
(zero-encoded) input and the values are the raw input itself; softmax
similarity is replaced by an inner product of positive random feature maps,
which lets the per-window cost stay linear in C because the key/value
summaries are shared across queries. Because values are never projected,
a window that is all-zero in some variable contributes an exactly-zero
output entry for that variable, so large measurement gaps survive into the
learned representation instead of being smoothed away.

The exact softmax path is kept alongside as the reference the kernel path
is checked against, and as the non-kernelized ablation arm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LocalizedSeries",
    "RandomFeatureMatrix",
    "AttentionHead",
    "MultiHeadConfig",
    "localize",
    "localize_batch",
    "draw_orthogonal_features",
    "feature_map",
    "kernel_local_attention",
    "exact_local_attention",
    "kernel_window_attention",
    "exact_window_attention",
    "aggregate_multi_head",
    "attention_contribution_weights",
    "init_head",
    "init_multi_head",
]


@dataclass
class LocalizedSeries:
    """A series reshaped to windows x neighbors x variables.

    Missing and padded positions hold exactly 0.0 in ``values`` and False in
    ``mask``; L*C >= the original length, with the tail padded.
    """

    values: np.ndarray  # (L, C, D)
    mask: np.ndarray  # (L, C, D) bool, True = observed
    length: int  # original T

    @property
    def windows(self) -> int:
        return self.values.shape[0]

    @property
    def neighbor_size(self) -> int:
        return self.values.shape[1]

    @property
    def variables(self) -> int:
        return self.values.shape[2]


@dataclass
class RandomFeatureMatrix:
    """Frozen projection directions for the positive feature map."""

    omega: np.ndarray  # (R, D)
    seed: int

    @property
    def count(self) -> int:
        return self.omega.shape[0]

    @property
    def dim(self) -> int:
        return self.omega.shape[1]


@dataclass
class AttentionHead:
    query_proj: Tensor  # (D, D)
    key_proj: Tensor  # (D, D)
    agg: Tensor  # (C,) neighbor aggregation vector
    features: RandomFeatureMatrix  # shared across heads

    def params(self) -> list[Tensor]:
        return [self.query_proj, self.key_proj, self.agg]


@dataclass
class MultiHeadConfig:
    heads: int
    out_proj: Tensor  # (H*D, D_o)

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("head count must be >= 1")


def localize(values: np.ndarray, mask: np.ndarray, neighbor_size: int) -> LocalizedSeries:
    """Reshape a (T, D) series into ceil(T/C) windows of C steps.

    Values at unobserved positions are forced to exactly 0 (zero-encoding);
    the padded tail behaves like one more gap.
    """
    if neighbor_size <= 0:
        raise ValueError(f"neighbor size must be positive, got {neighbor_size}")
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values.ndim != 2 or values.shape != mask.shape:
        raise ValueError(
            f"expected matching (T, D) values/mask, got {values.shape} and {mask.shape}"
        )
    t, d = values.shape
    if t < 1:
        raise ValueError("series must contain at least one step")
    c = neighbor_size
    l = -(-t // c)
    padded = np.zeros((l * c, d))
    padded_mask = np.zeros((l * c, d), dtype=bool)
    padded[:t] = np.where(mask, np.nan_to_num(values, nan=0.0), 0.0)
    padded_mask[:t] = mask
    return LocalizedSeries(
        values=padded.reshape(l, c, d), mask=padded_mask.reshape(l, c, d), length=t
    )


def localize_batch(values: np.ndarray, mask: np.ndarray, neighbor_size: int):
    """Vectorized localize for (N, T, D) stacks; returns (values, mask) arrays
    of shape (N, L, C, D)."""
    if neighbor_size <= 0:
        raise ValueError(f"neighbor size must be positive, got {neighbor_size}")
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n, t, d = values.shape
    c = neighbor_size
    l = -(-t // c)
    padded = np.zeros((n, l * c, d))
    padded_mask = np.zeros((n, l * c, d), dtype=bool)
    padded[:, :t] = np.where(mask, np.nan_to_num(values, nan=0.0), 0.0)
    padded_mask[:, :t] = mask
    return padded.reshape(n, l, c, d), padded_mask.reshape(n, l, c, d)


def draw_orthogonal_features(dim: int, count: int, seed: int) -> RandomFeatureMatrix:
    """Gaussian projection directions, orthogonalized in blocks of <= dim.

    Each block is the Q factor of a random Gaussian matrix, and each row is
    rescaled to an independently drawn Gaussian norm so the marginal row
    distribution matches plain N(0, I) sampling.
    """
    if dim < 1 or count < 1:
        raise ValueError("feature map needs dim >= 1 and count >= 1")
    rng = np.random.default_rng(seed)
    blocks = []
    remaining = count
    while remaining > 0:
        take = min(dim, remaining)
        g = rng.normal(size=(dim, dim))
        q, _ = np.linalg.qr(g)
        rows = q.T[:take]
        norms = np.linalg.norm(rng.normal(size=(take, dim)), axis=1)
        blocks.append(rows * norms[:, None])
        remaining -= take
    return RandomFeatureMatrix(omega=np.vstack(blocks), seed=seed)


def feature_map(z: np.ndarray, features: RandomFeatureMatrix) -> np.ndarray:
    """phi(z): exp(omega.z - |z|^2/2) / sqrt(R), strictly positive."""
    z = np.asarray(z, dtype=np.float64)
    e = features.omega @ z - 0.5 * float(z @ z)
    return np.exp(np.clip(e, -ad.EXP_CLAMP, ad.EXP_CLAMP)) / np.sqrt(features.count)


def _phi_tracked(x: Tensor, features: RandomFeatureMatrix) -> Tensor:
    """Feature map over rows of a (M, D) tensor, differentiable."""
    omega_t = ad.tensor(features.omega.T.copy())
    proj = ad.matmul(x, omega_t)
    sq = ad.sum_(ad.mul(x, x), axis=1, keepdims=True) * 0.5
    return ad.exp(ad.sub(proj, sq)) * (1.0 / np.sqrt(features.count))


def _check_head(values_shape, head: AttentionHead):
    c, d = values_shape[-2], values_shape[-1]
    if head.query_proj.shape != (d, d) or head.key_proj.shape != (d, d):
        raise ValueError(
            f"head projections {head.query_proj.shape} do not match {d} variables"
        )
    if head.agg.shape != (c,):
        raise ValueError(
            f"aggregation vector of length {head.agg.shape} does not match "
            f"neighbor size {c}"
        )
    if head.features.dim != d:
        raise ValueError("random feature matrix dimension does not match input")


def kernel_window_attention(values, head: AttentionHead, aggregate: bool = True) -> Tensor:
    """Linear-time attention over windows.

    ``values``: (B, L, C, D) tensor or array. With ``aggregate`` the
    per-query outputs are combined by the learned neighbor vector into one
    row per window, giving (B, L, D); otherwise all per-query outputs are
    returned as (B, L*C, D). No C x C matrix is ever formed.
    """
    x = values if isinstance(values, Tensor) else ad.tensor(values)
    b, l, c, d = x.shape
    _check_head(x.shape, head)
    flat = ad.reshape(x, (b * l * c, d))
    q = ad.matmul(flat, ad.transpose(head.query_proj))
    k = ad.matmul(flat, ad.transpose(head.key_proj))
    phq = ad.reshape(_phi_tracked(q, head.features), (b * l, c, head.features.count))
    phk = ad.reshape(_phi_tracked(k, head.features), (b * l, c, head.features.count))
    v = ad.reshape(x, (b * l, c, d))
    summaries = ad.matmul(ad.transpose(phk, (0, 2, 1)), v)  # (B*L, R, D)
    totals = ad.reshape(ad.sum_(phk, axis=1), (b * l, head.features.count, 1))
    num = ad.matmul(phq, summaries)  # (B*L, C, D)
    den = ad.matmul(phq, totals)  # (B*L, C, 1)
    att = ad.div(num, den)
    if not aggregate:
        return ad.reshape(att, (b, l * c, d))
    weighted = ad.mul(att, ad.reshape(head.agg, (1, c, 1)))
    return ad.reshape(ad.sum_(weighted, axis=1), (b, l, d))


def exact_window_attention(values, head: AttentionHead, aggregate: bool = True) -> Tensor:
    """Reference softmax attention over the same windows (quadratic in C)."""
    x = values if isinstance(values, Tensor) else ad.tensor(values)
    b, l, c, d = x.shape
    _check_head(x.shape, head)
    flat = ad.reshape(x, (b * l * c, d))
    q = ad.reshape(ad.matmul(flat, ad.transpose(head.query_proj)), (b * l, c, d))
    k = ad.reshape(ad.matmul(flat, ad.transpose(head.key_proj)), (b * l, c, d))
    v = ad.reshape(x, (b * l, c, d))
    logits = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
    weights = ad.softmax(logits, axis=2)
    att = ad.matmul(weights, v)
    if not aggregate:
        return ad.reshape(att, (b, l * c, d))
    weighted = ad.mul(att, ad.reshape(head.agg, (1, c, 1)))
    return ad.reshape(ad.sum_(weighted, axis=1), (b, l, d))


def kernel_local_attention(xl: LocalizedSeries, head: AttentionHead) -> Tensor:
    """Per-sample kernel attention: (L, C, D) localized input -> (L, D)."""
    out = kernel_window_attention(xl.values[None], head)
    return ad.reshape(out, (xl.windows, xl.variables))


def exact_local_attention(xl: LocalizedSeries, head: AttentionHead) -> Tensor:
    out = exact_window_attention(xl.values[None], head)
    return ad.reshape(out, (xl.windows, xl.variables))


def aggregate_multi_head(head_outputs: list, cfg: MultiHeadConfig) -> Tensor:
    """Concatenate per-head outputs on the variable axis and project.

    Accepts (L, D) or (B, L, D) head outputs; the projection row count must
    equal H*D.
    """
    outs = [o if isinstance(o, Tensor) else ad.tensor(o) for o in head_outputs]
    if len(outs) != cfg.heads:
        raise ValueError(f"expected {cfg.heads} head outputs, got {len(outs)}")
    shape = outs[0].shape
    for o in outs[1:]:
        if o.shape != shape:
            raise ValueError("head outputs must share one shape")
    stacked = ad.concat(outs, axis=-1 if len(shape) else 0) if len(outs) > 1 else outs[0]
    if stacked.shape[-1] != cfg.out_proj.shape[0]:
        raise ValueError(
            f"concatenated width {stacked.shape[-1]} does not match projection "
            f"rows {cfg.out_proj.shape[0]}"
        )
    return ad.matmul(stacked, cfg.out_proj)


def attention_contribution_weights(xl: LocalizedSeries, head: AttentionHead,
                                   kernelized: bool = True) -> np.ndarray:
    """Normalized per-neighbor weight linking raw inputs to window outputs.

    Entry (l, j) is sum_i agg_i * kappa(q_li, k_lj) / sum_j' kappa(q_li, k_lj'),
    so contracting the result with the window values reproduces the attention
    output. Computed without materializing any C x C matrix on the kernel
    path.
    """
    _check_head(xl.values.shape, head)
    l, c, d = xl.values.shape
    flat = xl.values.reshape(l * c, d)
    q = flat @ head.query_proj.data.T
    k = flat @ head.key_proj.data.T
    agg = head.agg.data
    if kernelized:
        r = head.features.count
        phq = _phi_plain(q, head.features).reshape(l, c, r)
        phk = _phi_plain(k, head.features).reshape(l, c, r)
        totals = phk.sum(axis=1)  # (L, R)
        den = np.einsum("lcr,lr->lc", phq, totals)
        u = ((agg[None, :] / den)[:, :, None] * phq).sum(axis=1)  # (L, R)
        return np.einsum("lcr,lr->lc", phk, u)
    ql = q.reshape(l, c, d)
    kl = k.reshape(l, c, d)
    logits = ql @ kl.swapaxes(1, 2)
    logits -= logits.max(axis=2, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=2, keepdims=True)
    return np.einsum("i,lij->lj", agg, p)


def _phi_plain(x: np.ndarray, features: RandomFeatureMatrix) -> np.ndarray:
    e = x @ features.omega.T - 0.5 * (x * x).sum(axis=1, keepdims=True)
    return np.exp(np.clip(e, -ad.EXP_CLAMP, ad.EXP_CLAMP)) / np.sqrt(features.count)


def init_head(dim: int, neighbor_size: int, features: RandomFeatureMatrix,
              rng: np.random.Generator) -> AttentionHead:
    bound = 1.0 / np.sqrt(dim)
    return AttentionHead(
        query_proj=ad.tensor(rng.uniform(-bound, bound, size=(dim, dim)),
                             requires_grad=True),
        key_proj=ad.tensor(rng.uniform(-bound, bound, size=(dim, dim)),
                           requires_grad=True),
        agg=ad.tensor(rng.uniform(-1.0 / np.sqrt(neighbor_size),
                                  1.0 / np.sqrt(neighbor_size),
                                  size=neighbor_size), requires_grad=True),
        features=features,
    )


def init_multi_head(heads: int, dim: int, out_dim: int,
                    rng: np.random.Generator) -> MultiHeadConfig:
    bound = 1.0 / np.sqrt(heads * dim)
    return MultiHeadConfig(
        heads=heads,
        out_proj=ad.tensor(rng.uniform(-bound, bound, size=(heads * dim, out_dim)),
                           requires_grad=True),
    )
