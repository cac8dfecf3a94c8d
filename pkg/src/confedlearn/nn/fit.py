"""Mini-batch SGD epochs and the patience rule used by every trainer."""

import numpy as np

from .network import EVAL, forward, train_step
from .losses import bce_loss


class EarlyStopping:
    """Stop once the monitored loss fails to decrease ``patience`` times in a row.

    A round improves only if its loss is strictly below the best seen so
    far. Rounds are numbered from 1.
    """

    def __init__(self, patience=3):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.history = []
        self.best_loss = np.inf
        self.best_round = 0
        self.best_state = None
        self.bad_rounds = 0

    def update(self, loss, state=None):
        """Record one round; returns True when training should stop."""
        self.history.append(float(loss))
        if loss < self.best_loss:
            self.best_loss = float(loss)
            self.best_round = len(self.history)
            self.best_state = state
            self.bad_rounds = 0
        else:
            self.bad_rounds += 1
        return self.bad_rounds >= self.patience

    @property
    def stopped(self):
        return self.bad_rounds >= self.patience


def run_epoch(params, x, y, loss, lr, batch_size, seed, rows=None):
    """One pass of shuffled mini-batch SGD over ``rows`` of ``x``.

    ``x`` may be any integer/float matrix (kept compact, cast per batch).
    Returns ``(params, mean_batch_loss)``.
    """
    rng = np.random.default_rng(seed)
    idx = np.arange(x.shape[0]) if rows is None else np.asarray(rows, dtype=int)
    idx = idx[rng.permutation(idx.shape[0])]
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[:, None]
    losses = []
    for start in range(0, idx.shape[0], batch_size):
        take = idx[start:start + batch_size]
        params, value = train_step(params, x[take].astype(np.float64),
                                   y[take].astype(np.float64), loss, lr,
                                   int(rng.integers(2**63)))
        losses.append(value)
    return params, float(np.mean(losses)) if losses else 0.0


def predict_in_chunks(params, x, chunk=4096):
    """Eval-mode outputs for a possibly large compact matrix."""
    out = [forward(params, x[i:i + chunk].astype(np.float64), EVAL)
           for i in range(0, x.shape[0], chunk)]
    if not out:
        return np.zeros((0, params.arch.n_outputs))
    return np.vstack(out)


def eval_bce(params, x, y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return bce_loss(predict_in_chunks(params, x), y)
