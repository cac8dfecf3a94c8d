"""Loss functions: binary cross entropy, L1 matching, least-squares GAN.

Every loss is a mean over all elements. ``loss_and_grad`` returns the loss
value together with its derivative with respect to the network output.
"""

import numpy as np

from ..exceptions import RejectedInputError

PROB_CLAMP = 1e-7

BCE = "bce"
L1 = "l1"
LSQ = "lsq"
LOSSES = (BCE, L1, LSQ)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RejectedInputError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def bce_loss(pred, target):
    """Mean binary cross entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    p, y = _pair(pred, target)
    if p.size == 0:
        return 0.0
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def l1_loss(a, b):
    """Mean absolute difference."""
    a, b = _pair(a, b)
    if a.size == 0:
        return 0.0
    return float(np.mean(np.abs(a - b)))


def lsq_loss(out, target):
    """Mean squared distance to ``target`` (scalar targets broadcast)."""
    out = np.asarray(out, dtype=np.float64)
    if out.size == 0:
        return 0.0
    return float(np.mean((out - target) ** 2))


def lsgan_losses(d_real, d_fake):
    """Least-squares GAN objectives.

    Returns
    -------
    disc_loss : float
        ``mean((d_real - 1)**2) + mean(d_fake**2)``
    gen_loss : float
        ``mean((d_fake - 1)**2)``
    """
    disc = lsq_loss(d_real, 1.0) + lsq_loss(d_fake, 0.0)
    return disc, lsq_loss(d_fake, 1.0)


def loss_and_grad(name, out, target):
    """Value of loss ``name`` and d(loss)/d(out)."""
    out = np.asarray(out, dtype=np.float64)
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), out.shape)
    n = out.size
    if n == 0:
        return 0.0, np.zeros_like(out)
    if name == BCE:
        p = np.clip(out, PROB_CLAMP, 1.0 - PROB_CLAMP)
        value = float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log1p(-p))))
        inside = (out > PROB_CLAMP) & (out < 1.0 - PROB_CLAMP)
        grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0) / n
        return value, grad
    if name == L1:
        diff = out - target
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    if name == LSQ:
        diff = out - target
        return float(np.mean(diff ** 2)), 2.0 * diff / n
    raise RejectedInputError(f"unknown loss {name!r}; expected one of {LOSSES}")
