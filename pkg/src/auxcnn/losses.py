"""The hybrid loss family.

Classification cross-entropy, a reconstruction loss built on a *global*
(whole-image statistics, no sliding window) structural-similarity index,
the two-headed adversarial terms, their weighted combinations, and the
focal-loss baseline. All losses are plain functions of arrays; the
``*_and_grad`` variants additionally return the analytic gradient used to
seed graph backward passes, and every gradient honours the same log-clamp
guard as the values so finite-difference checks agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LOG_CLAMP = 1e-12  # lower clamp for every log argument, values and gradients alike
ROW_SUM_TOL = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective and the SSIM stabilizers."""

    lambda1: float = 0.2   # reconstruction weight
    lambda2: float = 1.0   # adversarial weight
    lam: float = 0.5       # discrimination-vs-classification balance inside L_adv
    eps1: float = 1e-6
    eps2: float = 1e-6

    def __post_init__(self):
        for field_name in ("lambda1", "lambda2", "lam"):
            v = getattr(self, field_name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{field_name} must lie in [0,1], got {v}")


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 1.5
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")


def _clamped_log(p):
    return np.log(np.maximum(p, LOG_CLAMP))


def _validate_probs_labels(p, y):
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError(f"probability/label shape mismatch: {p.shape} vs {y.shape}")
    rows = p.sum(axis=1)
    if np.abs(rows - 1.0).max() > ROW_SUM_TOL:
        raise ShapeError("probability rows must sum to 1")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ShapeError("labels must be one-hot")


def cross_entropy_loss(p, y_onehot) -> float:
    """Mean over the batch of -y . log(p)."""
    _validate_probs_labels(p, y_onehot)
    return float(-(y_onehot * _clamped_log(p)).sum() / p.shape[0])


def cross_entropy_loss_and_grad(p, y_onehot):
    _validate_probs_labels(p, y_onehot)
    pc = np.maximum(p, LOG_CLAMP)
    value = float(-(y_onehot * np.log(pc)).sum() / p.shape[0])
    grad = np.where(p > LOG_CLAMP, -y_onehot / pc, 0.0) / p.shape[0]
    return value, grad.astype(p.dtype, copy=False)


def _image_stats(x, xhat):
    b = x.shape[0]
    xf = x.reshape(b, -1)
    yf = xhat.reshape(b, -1)
    mx = xf.mean(axis=1)
    my = yf.mean(axis=1)
    dx = xf - mx[:, None]
    dy = yf - my[:, None]
    vx = (dx * dx).mean(axis=1)
    vy = (dy * dy).mean(axis=1)
    cxy = (dx * dy).mean(axis=1)
    return xf, yf, mx, my, dx, dy, vx, vy, cxy


def _check_image_pair(x, xhat):
    if x.shape != xhat.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {xhat.shape}")
    lo = min(x.min(), xhat.min())
    hi = max(x.max(), xhat.max())
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ShapeError(f"pixels out of [0,1]: min {lo:.4g} max {hi:.4g}")


def ssim(x, xhat, eps1=1e-6, eps2=1e-6):
    """Per-image structural similarity from whole-image statistics.

    Single mean/variance/covariance per image; no sliding window. Returns one
    value per batch item, each in (-1, 1].
    """
    _check_image_pair(x, xhat)
    _, _, mx, my, _, _, vx, vy, cxy = _image_stats(x, xhat)
    a1 = 2 * mx * my + eps1
    a2 = 2 * cxy + eps2
    b1 = mx * mx + my * my + eps1
    b2 = vx + vy + eps2
    return (a1 * a2) / (b1 * b2)


def reconstruction_loss(x, xhat, eps1=1e-6, eps2=1e-6) -> float:
    """Mean over the batch of (1 - SSIM) / 2."""
    return float(((1.0 - ssim(x, xhat, eps1, eps2)) / 2.0).mean())


def reconstruction_loss_and_grad(x, xhat, eps1=1e-6, eps2=1e-6):
    """Loss plus its gradient with respect to the reconstruction ``xhat``."""
    _check_image_pair(x, xhat)
    b = x.shape[0]
    n = x[0].size
    _, _, mx, my, dx, dy, vx, vy, cxy = _image_stats(x, xhat)
    a1 = 2 * mx * my + eps1
    a2 = 2 * cxy + eps2
    b1 = mx * mx + my * my + eps1
    b2 = vx + vy + eps2
    s = (a1 * a2) / (b1 * b2)
    value = float(((1.0 - s) / 2.0).mean())
    # dS/dy_i = [2 mx A2 + 2 A1 dx_i] / (n B1 B2) - S [2 my / (n B1) + 2 dy_i / (n B2)]
    col = lambda v: v[:, None]
    ds = (2 * col(mx * a2) + 2 * col(a1) * dx) / col(n * b1 * b2) \
        - col(s) * (col(2 * my / (n * b1)) + 2 * dy / col(n * b2))
    grad = (-ds / (2 * b)).reshape(xhat.shape)
    return value, grad.astype(xhat.dtype, copy=False)


def _check_probs01(p, name):
    if p.size == 0:
        raise ShapeError(f"{name} must be non-empty")
    if p.min() < 0 or p.max() > 1:
        raise ShapeError(f"{name} outside [0,1]")


def adversarial_discrimination_value(real_probs, fake_probs) -> float:
    """E[log D(real)] + E[log(1 - D(fake))], averaged over batch and patch grid.

    Non-positive; approaches 0 only for a perfect discriminator.
    """
    _check_probs01(real_probs, "real_probs")
    _check_probs01(fake_probs, "fake_probs")
    return float(_clamped_log(real_probs).mean() + _clamped_log(1.0 - fake_probs).mean())


def discrimination_bce_and_grads(real_probs, fake_probs):
    """Binary cross-entropy of the patch maps against labels 1 (real) / 0 (fake).

    The mean runs over all entries of both maps, so with equally sized halves
    this equals minus one half of ``adversarial_discrimination_value``.
    Returns ``(value, grad_real, grad_fake)``.
    """
    _check_probs01(real_probs, "real_probs")
    _check_probs01(fake_probs, "fake_probs")
    total = real_probs.size + fake_probs.size
    pr = np.maximum(real_probs, LOG_CLAMP)
    qf = np.maximum(1.0 - fake_probs, LOG_CLAMP)
    value = float(-(np.log(pr).sum() + np.log(qf).sum()) / total)
    grad_real = np.where(real_probs > LOG_CLAMP, -1.0 / pr, 0.0) / total
    grad_fake = np.where(1.0 - fake_probs > LOG_CLAMP, 1.0 / qf, 0.0) / total
    return value, grad_real.astype(real_probs.dtype, copy=False), \
        grad_fake.astype(fake_probs.dtype, copy=False)


def generator_disc_term_and_grad(fake_probs):
    """Non-saturating generator objective -E[log D(fake)] over the fake patch map."""
    _check_probs01(fake_probs, "fake_probs")
    pf = np.maximum(fake_probs, LOG_CLAMP)
    value = float(-np.log(pf).mean())
    grad = np.where(fake_probs > LOG_CLAMP, -1.0 / pf, 0.0) / fake_probs.size
    return value, grad.astype(fake_probs.dtype, copy=False)


def adversarial_classification_loss(p_cls, y_onehot) -> float:
    """Cross-entropy of the discriminator's class head over the combined batch."""
    return cross_entropy_loss(p_cls, y_onehot)


def adversarial_classification_loss_and_grad(p_cls, y_onehot):
    return cross_entropy_loss_and_grad(p_cls, y_onehot)


def adversarial_loss(disc_term: float, cls_term: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0,1]")
    return lam * disc_term + (1.0 - lam) * cls_term


def combined_loss(l_cls: float, l_rec: float, l_adv: float,
                  lambda1: float, lambda2: float) -> float:
    if not (0.0 <= lambda1 <= 1.0 and 0.0 <= lambda2 <= 1.0):
        raise ValueError("lambda1, lambda2 must lie in [0,1]")
    return l_cls + lambda1 * l_rec + lambda2 * l_adv


def focal_loss(p, y_onehot, params: FocalParams) -> float:
    return focal_loss_and_grad(p, y_onehot, params)[0]


def focal_loss_and_grad(p, y_onehot, params: FocalParams):
    """Mean of -alpha (1 - p_t)^gamma log(p_t) with p_t the GT-class probability.

    Every sample uses the GT-class branch, i.e. alpha_t = alpha.
    """
    _validate_probs_labels(p, y_onehot)
    b = p.shape[0]
    pt = (p * y_onehot).sum(axis=1)
    ptc = np.maximum(pt, LOG_CLAMP)
    one_minus = np.maximum(1.0 - pt, 0.0)
    mod = one_minus ** params.gamma
    value = float((-params.alpha * mod * np.log(ptc)).mean())
    # d/dp_t = alpha [gamma (1-p)^(g-1) log p - (1-p)^g / p]; limit 0 at p_t -> 1.
    # Below the clamp only the modulator still varies, so the 1/p term drops.
    with np.errstate(divide="ignore", invalid="ignore"):
        pow_gm1 = np.where(one_minus > 0, one_minus ** (params.gamma - 1.0), 0.0)
    term2 = np.where(pt > LOG_CLAMP, mod / ptc, 0.0)
    dpt = params.alpha * (params.gamma * pow_gm1 * np.log(ptc) - term2)
    grad = y_onehot * (dpt / b)[:, None]
    return value, grad.astype(p.dtype, copy=False)
