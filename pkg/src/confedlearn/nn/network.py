"""Forward pass, exact backpropagation and SGD over flat parameter vectors.

All functions are pure: they never mutate a ``ModelParams`` and return new
values instead. Randomness (dropout) is drawn from ``rng_seed`` only, so a
call is reproducible bit for bit.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..exceptions import RejectedInputError
from .losses import loss_and_grad
from .params import BN_EPS, BN_MOMENTUM, SIGMOID, ModelParams, layout

TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class Batch:
    """Dense inputs with row-aligned targets."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.shape[0] != y.shape[0]:
            raise RejectedInputError(
                f"inputs have {x.shape[0]} rows but targets have {y.shape[0]}")
        if np.isnan(x).any() or np.isnan(y).any():
            raise RejectedInputError("batch contains NaN")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.inputs.shape[0]


class _Cache:
    __slots__ = ("inputs", "pre", "xhat", "inv_std", "masks", "batch_mean",
                 "batch_var", "out", "mode")


def _check_inputs(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.arch.n_inputs:
        raise RejectedInputError(
            f"expected {params.arch.n_inputs} input columns, got shape {x.shape}")
    return x


def forward_cache(params, x, mode=EVAL, rng_seed=0):
    """Forward pass keeping the intermediates needed by :func:`backprop`."""
    if mode not in (TRAIN, EVAL):
        raise RejectedInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _check_inputs(params, x)
    arch = params.arch
    lay = layout(arch)
    v = params.values
    rng = np.random.default_rng(rng_seed) if mode == TRAIN and any(arch.dropout) else None
    c = _Cache()
    c.mode = mode
    c.inputs, c.pre, c.xhat, c.inv_std, c.masks = [], [], [], [], []
    c.batch_mean, c.batch_var = {}, {}
    a = x
    sizes = arch.layer_sizes
    for i, sl in enumerate(lay.layers):
        c.inputs.append(a)
        w = v[sl.weight].reshape(sizes[i], sizes[i + 1])
        z = a @ w + v[sl.bias]
        if i == arch.n_hidden:
            c.out = expit(z) if arch.output_activation == SIGMOID else z
            return c.out, c
        if sl.gamma is not None:
            if mode == TRAIN:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                c.batch_mean[i], c.batch_var[i] = mu, var
            else:
                mu, var = v[sl.running_mean], v[sl.running_var]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            z = v[sl.gamma] * xhat + v[sl.beta]
            c.xhat.append(xhat)
            c.inv_std.append(inv_std)
        else:
            c.xhat.append(None)
            c.inv_std.append(None)
        c.pre.append(z)
        a = np.where(z > 0, z, arch.hidden_slope * z)
        rate = arch.dropout[i]
        if rng is not None and rate > 0:
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
            c.masks.append(mask)
        else:
            c.masks.append(None)
    raise AssertionError("unreachable")


def forward(params, x, mode=EVAL, rng_seed=0):
    """Network outputs for the rows of ``x`` (a matrix or a :class:`Batch`)."""
    if isinstance(x, Batch):
        x = x.inputs
    return forward_cache(params, x, mode, rng_seed)[0]


def backprop(params, cache, d_out):
    """Gradient of a scalar objective given its derivative w.r.t. the outputs.

    Returns ``(grad, d_inputs)`` where ``grad`` has the length of
    ``params.values`` and is zero on running statistics.
    """
    arch = params.arch
    lay = layout(arch)
    v = params.values
    sizes = arch.layer_sizes
    grad = np.zeros(lay.total)
    d = np.asarray(d_out, dtype=np.float64)
    if arch.output_activation == SIGMOID:
        d = d * cache.out * (1.0 - cache.out)
    for i in range(len(lay.layers) - 1, -1, -1):
        sl = lay.layers[i]
        if i < arch.n_hidden:
            if cache.masks[i] is not None:
                d = d * cache.masks[i]
            d = np.where(cache.pre[i] > 0, d, arch.hidden_slope * d)
            if sl.gamma is not None:
                xhat = cache.xhat[i]
                grad[sl.gamma] = (d * xhat).sum(axis=0)
                grad[sl.beta] = d.sum(axis=0)
                dxhat = d * v[sl.gamma]
                inv_std = cache.inv_std[i]
                if cache.mode == TRAIN:
                    n = d.shape[0]
                    d = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                         - xhat * (dxhat * xhat).sum(axis=0))
                else:
                    d = dxhat * inv_std
        a = cache.inputs[i]
        w = v[sl.weight].reshape(sizes[i], sizes[i + 1])
        grad[sl.weight] = (a.T @ d).ravel()
        grad[sl.bias] = d.sum(axis=0)
        d = d @ w.T
    return grad, d


def value_and_grad(params, x, y, loss, mode=TRAIN, rng_seed=0):
    """Loss value, parameter gradient and the forward cache in one pass."""
    out, cache = forward_cache(params, x, mode, rng_seed)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != out.shape[0]:
        raise RejectedInputError(f"{out.shape[0]} outputs but {y.shape[0]} targets")
    value, d_out = loss_and_grad(loss, out, y)
    grad, _ = backprop(params, cache, d_out)
    return value, grad, cache


def backward(params, batch, loss, mode=TRAIN, rng_seed=0):
    """Exact gradient of ``loss`` on ``batch`` w.r.t. every parameter."""
    return value_and_grad(params, batch.inputs, batch.targets, loss, mode, rng_seed)[1]


def sgd_step(params, grads, lr):
    """``values - lr * grads`` on trainable entries; running statistics pass through."""
    grads = np.asarray(grads, dtype=np.float64).ravel()
    if grads.shape[0] != params.values.shape[0]:
        raise RejectedInputError(
            f"gradient length {grads.shape[0]} != parameter length {params.values.shape[0]}")
    if lr < 0:
        raise RejectedInputError("learning rate must be non-negative")
    new = params.values - lr * np.where(params.trainable_mask, grads, 0.0)
    return ModelParams(params.arch, new)


def update_running_stats(params, cache):
    """Fold the batch statistics of a train-mode pass into the running averages."""
    if not cache.batch_mean:
        return params
    lay = layout(params.arch)
    new = params.values.copy()
    for i, mu in cache.batch_mean.items():
        sl = lay.layers[i]
        new[sl.running_mean] = BN_MOMENTUM * new[sl.running_mean] + (1 - BN_MOMENTUM) * mu
        new[sl.running_var] = (BN_MOMENTUM * new[sl.running_var]
                               + (1 - BN_MOMENTUM) * cache.batch_var[i])
    return ModelParams(params.arch, new)


def train_step(params, x, y, loss, lr, rng_seed=0):
    """One SGD update on a mini-batch; returns ``(new_params, loss_value)``."""
    value, grad, cache = value_and_grad(params, x, y, loss, TRAIN, rng_seed)
    new = sgd_step(params, grad, lr)
    return update_running_stats(new, cache), value
