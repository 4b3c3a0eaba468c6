"""Log-likelihood kernel matrices and the contrastive objectives.

The kernel matrix L has a fixed orientation: row r is a text, column s is
an image, and L[r, s] is the log-density of image embedding s under text
distribution r (plain cosine similarity for the deterministic baseline).
Per fixed row, every spherical kernel is a strictly increasing function of
the cosine mu_r . z_s, so per-query image rankings coincide with cosine
rankings; across rows the concentration-dependent normalizer reweights
texts against each other.

Losses return the scalar value together with analytic gradients with
respect to the kernel entries, the log-temperature, and (for the sigmoid
loss) the bias; ``backprop_kernel`` continues the chain through the
kappa*mu decomposition back to raw adapter outputs, using the exact
derivative of the approximate vMF log-normalizer and digamma for the
power spherical terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapter import DecomposedBatch, Model, apply_adapter, decompose_backward, normalize_backward
from .directional import (
    PS_COSINE_FLOOR,
    GaussParams,
    PsParams,
    VmfParams,
    ps_log_normalizer,
    ps_log_normalizer_deriv,
    vmf_log_normalizer_approx,
    vmf_log_normalizer_deriv,
)

KERNELS = ("vmf", "ps", "gauss", "cosine")

LN_2PI = math.log(2.0 * math.pi)


@dataclass
class LikelihoodMatrix:
    """Square kernel matrix with provenance of the family that built it."""

    entries: np.ndarray
    kernel: str

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise ValueError(f"likelihood matrix must be square, got shape {self.entries.shape}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("likelihood matrix contains non-finite entries")


@dataclass
class LossValue:
    loss: float
    d_entries: np.ndarray
    d_log_tau: float
    d_bias: float = 0.0


def _stack_unit_rows(vectors) -> np.ndarray:
    pts = np.asarray(vectors, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2:
        raise ValueError(f"expected a list of vectors or a 2-D array, got shape {pts.shape}")
    return pts


def batch_from_params(text_params) -> DecomposedBatch:
    """Stack a homogeneous list of per-text parameters into arrays.

    Accepts VmfParams / PsParams / GaussParams lists, or plain unit vectors
    for the deterministic cosine baseline.  Mixed families are an error.
    """
    if len(text_params) == 0:
        raise ValueError("empty parameter list")
    first = text_params[0]
    if not all(type(p) is type(first) for p in text_params):
        raise ValueError("mixed distribution families in one batch")
    if isinstance(first, VmfParams) or isinstance(first, PsParams):
        mu = np.stack([p.mu for p in text_params])
        kappa = np.array([p.kappa for p in text_params])
        family = "vmf" if isinstance(first, VmfParams) else "ps"
        return DecomposedBatch(family=family, mu=mu, kappa=kappa, norm=kappa.copy())
    if isinstance(first, GaussParams):
        return DecomposedBatch(
            family="gauss",
            mean=np.stack([p.mean for p in text_params]),
            log_var=np.stack([p.log_var for p in text_params]),
        )
    mu = _stack_unit_rows(list(text_params))
    ones = np.ones(mu.shape[0])
    return DecomposedBatch(family="cosine", mu=mu, kappa=ones, norm=ones.copy())


def kernel_matrix(dist: DecomposedBatch, points: np.ndarray) -> np.ndarray:
    """(R, S) matrix of log-densities of the S points under the R rows."""
    pts = _stack_unit_rows(points)
    if dist.family == "gauss":
        if pts.shape[1] != dist.mean.shape[1]:
            raise ValueError(
                f"dimension mismatch: distributions have d={dist.mean.shape[1]}, "
                f"points have d={pts.shape[1]}"
            )
        var = np.exp(dist.log_var)
        quad = (
            ((pts ** 2) @ (1.0 / var).T).T
            - 2.0 * (pts @ (dist.mean / var).T).T
            + ((dist.mean ** 2) / var).sum(axis=1)[:, None]
        )
        return -0.5 * (quad + dist.log_var.sum(axis=1)[:, None] + pts.shape[1] * LN_2PI)
    if pts.shape[1] != dist.mu.shape[1]:
        raise ValueError(
            f"dimension mismatch: distributions have d={dist.mu.shape[1]}, "
            f"points have d={pts.shape[1]}"
        )
    cos = dist.mu @ pts.T
    d = dist.mu.shape[1]
    if dist.family == "vmf":
        return dist.kappa[:, None] * cos + vmf_log_normalizer_approx(d, dist.kappa)[:, None]
    if dist.family == "ps":
        safe = np.maximum(1.0 + cos, PS_COSINE_FLOOR)
        return dist.kappa[:, None] * np.log(safe) + ps_log_normalizer(d, dist.kappa)[:, None]
    return cos  # cosine baseline


def likelihood_matrix(text_params, image_embs) -> LikelihoodMatrix:
    """Square kernel matrix from per-text parameters and image unit vectors."""
    dist = batch_from_params(text_params)
    pts = _stack_unit_rows(image_embs)
    n_rows = dist.mu.shape[0] if dist.mu is not None else dist.mean.shape[0]
    if pts.shape[0] != n_rows:
        raise ValueError(f"need equally many texts and images, got {n_rows} and {pts.shape[0]}")
    return LikelihoodMatrix(entries=kernel_matrix(dist, pts), kernel=dist.family)


def backprop_kernel_batch(dist: DecomposedBatch, points: np.ndarray, d_entries: np.ndarray,
                          kappa_floor: float = 1e-6):
    """Gradients of sum(d_entries * L) w.r.t. raw adapter outputs and points.

    Returns (d_raw, d_points) where d_raw is chained through the kappa*mu
    decomposition (or is the [d_mean | d_log_var] concatenation for the
    Gaussian family).
    """
    pts = _stack_unit_rows(points)
    dG = np.asarray(d_entries, dtype=np.float64)
    if dist.family == "gauss":
        var = np.exp(dist.log_var)
        row_sum = dG.sum(axis=1)
        d_mean = ((dG @ pts) - row_sum[:, None] * dist.mean) / var
        d_log_var = (
            ((dG @ pts ** 2) - 2.0 * dist.mean * (dG @ pts) + dist.mean ** 2 * row_sum[:, None])
            / (2.0 * var)
            - 0.5 * row_sum[:, None]
        )
        d_points = (dG.T @ (dist.mean / var)) - pts * (dG.T @ (1.0 / var))
        if dist.norm is not None:  # mean half was normalized by the adapter
            d_mean = normalize_backward(dist.mean, dist.norm, d_mean)
        return np.hstack([d_mean, d_log_var]), d_points

    d = dist.mu.shape[1]
    cos = dist.mu @ pts.T
    if dist.family == "vmf":
        d_mu = dist.kappa[:, None] * (dG @ pts)
        d_kappa = (dG * cos).sum(axis=1) + dG.sum(axis=1) * vmf_log_normalizer_deriv(d, dist.kappa)
        d_points = dG.T @ (dist.kappa[:, None] * dist.mu)
    elif dist.family == "ps":
        one_plus = 1.0 + cos
        clamped = one_plus <= PS_COSINE_FLOOR
        safe = np.maximum(one_plus, PS_COSINE_FLOOR)
        w = np.where(clamped, 0.0, dG * dist.kappa[:, None] / safe)
        d_mu = w @ pts
        d_kappa = (dG * np.log(safe)).sum(axis=1) + dG.sum(axis=1) * ps_log_normalizer_deriv(d, dist.kappa)
        d_points = w.T @ dist.mu
    elif dist.family == "cosine":
        d_mu = dG @ pts
        d_kappa = np.zeros(dist.mu.shape[0])
        d_points = dG.T @ dist.mu
    else:
        raise ValueError(f"unknown kernel family {dist.family!r}")
    d_raw = decompose_backward(dist, d_mu, d_kappa, kappa_floor)
    return d_raw, d_points


def backprop_kernel(text_params, image_embs, d_entries: np.ndarray, kappa_floor: float = 1e-6):
    """List-based wrapper of ``backprop_kernel_batch`` (same family rules
    as ``likelihood_matrix``)."""
    dist = batch_from_params(text_params)
    return backprop_kernel_batch(dist, image_embs, d_entries, kappa_floor)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def infonce(L: LikelihoodMatrix, log_tau: float) -> LossValue:
    """Symmetric row/column InfoNCE over tau * L (log-sum-exp stabilized).

    loss = -(1/2B) sum_n [ln softmax_row(tau L)(n,n) + ln softmax_col(tau L)(n,n)]
    """
    e = L.entries
    if not np.all(np.isfinite(e)):
        raise ValueError("non-finite kernel entries")
    b = e.shape[0]
    tau = math.exp(log_tau)
    s = tau * e
    lse_rows = _logsumexp(s, axis=1)
    lse_cols = _logsumexp(s, axis=0)
    diag = np.diag(s)
    loss = -((diag - lse_rows).sum() + (diag - lse_cols).sum()) / (2.0 * b)

    p_rows = np.exp(s - lse_rows[:, None])
    p_cols = np.exp(s - lse_cols[None, :])
    d_s = -(2.0 * np.eye(b) - p_rows - p_cols) / (2.0 * b)
    return LossValue(
        loss=float(loss),
        d_entries=tau * d_s,
        d_log_tau=float((d_s * s).sum()),
    )


def siglip_loss(L: LikelihoodMatrix, log_tau: float, bias: float) -> LossValue:
    """Pairwise sigmoid contrastive loss over tau * L - bias.

    loss = -(1/B) sum_{r,s} ln sigmoid(sign(r,s) (tau L(r,s) - bias)),
    sign = +1 on the diagonal and -1 off it; computed via a stable
    softplus so saturated pairs neither overflow nor lose gradients.
    """
    e = L.entries
    if not np.all(np.isfinite(e)):
        raise ValueError("non-finite kernel entries")
    b = e.shape[0]
    tau = math.exp(log_tau)
    sign = 2.0 * np.eye(b) - 1.0
    u = sign * (tau * e - bias)
    loss = np.logaddexp(0.0, -u).sum() / b
    sig_neg = np.exp(-np.logaddexp(0.0, u))  # sigmoid(-u), stable
    d_u = -sig_neg / b
    return LossValue(
        loss=float(loss),
        d_entries=d_u * sign * tau,
        d_log_tau=float((d_u * sign * e * tau).sum()),
        d_bias=float(-(d_u * sign).sum()),
    )


def symmetrize_kernel(first: LikelihoodMatrix, second: LikelihoodMatrix) -> LikelihoodMatrix:
    """Elementwise mean of two kernels (texts-as-distributions scoring image
    points, and images-as-distributions scoring text mean directions)."""
    if first.entries.shape != second.entries.shape:
        raise ValueError(
            f"shape mismatch: {first.entries.shape} vs {second.entries.shape}"
        )
    if first.kernel != second.kernel:
        raise ValueError(f"kernel mismatch: {first.kernel!r} vs {second.kernel!r}")
    return LikelihoodMatrix(entries=0.5 * (first.entries + second.entries), kernel=first.kernel)


def model_likelihood_matrix(model: Model, text_embs: np.ndarray, image_embs: np.ndarray):
    """Full (n_texts, n_images) kernel for a trained model, eval mode.

    Returns (entries, text_side, image_side) where the sides are the
    DecomposedBatch of whichever inputs pass through an adapter (None for
    the side that stays deterministic).
    """
    texts = _stack_unit_rows(text_embs)
    images = _stack_unit_rows(image_embs)
    variant = model.config.variant
    if variant == "asym_text":
        tb = apply_adapter(model.text_adapter, texts)
        return kernel_matrix(tb, images), tb, None
    if variant == "asym_image":
        ib = apply_adapter(model.image_adapter, images)
        return kernel_matrix(ib, texts).T, None, ib
    tb = apply_adapter(model.text_adapter, texts)
    ib = apply_adapter(model.image_adapter, images)
    entries = 0.5 * (kernel_matrix(tb, ib.points) + kernel_matrix(ib, tb.points).T)
    return entries, tb, ib
