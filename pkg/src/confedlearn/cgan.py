"""Conditional GAN with least-squares adversarial loss and a paired matching loss.

The generator maps ``source ++ z`` (``z`` Gaussian noise, width 100 by
default) to target-vocabulary probabilities. The discriminator scores
``source ++ target`` pairs. Each mini-batch does one discriminator step then
one generator step. Paired rows contribute real pairs to the discriminator
and the matching term (L1 by default) to the generator; rows without an
observed target only contribute fakes to the adversarial game.
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import RejectedInputError
from .nn import (
    BCE,
    EVAL,
    L1,
    LSQ,
    TRAIN,
    ModelParams,
    backprop,
    forward,
    forward_cache,
    init_params,
    loss_and_grad,
    mlp_arch,
    sgd_step,
    update_running_stats,
)
from .nn.params import IDENTITY

NOISE_DIM = 100
NO_PAIRED_WARNING = "CGAN_NO_PAIRED_EXAMPLES"


@dataclass(frozen=True)
class CganHyperparams:
    generator_hidden: tuple = (128,)
    discriminator_hidden: tuple = (64,)
    noise_dim: int = NOISE_DIM
    lambda_match: float = 10.0
    match_loss: str = L1  # or BCE, which keeps gradients alive on sparse targets
    generator_lr: float = 0.5
    discriminator_lr: float = 0.05
    batch_size: int = 64
    epochs: int = 100
    batch_norm: bool = True
    dropout: float = 0.0
    validation_fraction: float = 0.2
    binarize: str = "threshold"  # or "bernoulli"

    def __post_init__(self):
        if self.lambda_match < 0:
            raise RejectedInputError("lambda_match must be >= 0")
        if self.match_loss not in (L1, BCE):
            raise RejectedInputError(f"match_loss must be {L1!r} or {BCE!r}")
        if self.binarize not in ("threshold", "bernoulli"):
            raise RejectedInputError(f"unknown binarize mode {self.binarize!r}")
        if self.noise_dim < 1 or self.epochs < 0 or self.batch_size < 1:
            raise RejectedInputError("noise_dim, batch_size must be >= 1, epochs >= 0")


@dataclass(frozen=True, eq=False)
class CganModel:
    src_type: str
    tgt_type: str
    generator: ModelParams
    discriminator: ModelParams
    lambda_match: float
    noise_dim: int = NOISE_DIM
    binarize: str = "threshold"
    best_epoch: int = 0
    validation_l1: Optional[float] = None
    history: tuple = ()
    warning: Optional[str] = None

    @property
    def src_width(self):
        return self.generator.arch.n_inputs - self.noise_dim

    @property
    def tgt_width(self):
        return self.generator.arch.n_outputs

    def __eq__(self, other):
        if not isinstance(other, CganModel):
            return NotImplemented
        return (self.src_type, self.tgt_type, self.generator, self.discriminator,
                self.lambda_match, self.noise_dim) == (
                    other.src_type, other.tgt_type, other.generator, other.discriminator,
                    other.lambda_match, other.noise_dim)


def generator_arch(src_width, tgt_width, hp):
    return mlp_arch(src_width + hp.noise_dim, hp.generator_hidden, tgt_width,
                    batch_norm=hp.batch_norm, dropout=hp.dropout)


def discriminator_arch(src_width, tgt_width, hp):
    return mlp_arch(src_width + tgt_width, hp.discriminator_hidden, 1,
                    output_activation=IDENTITY,
                    batch_norm=hp.batch_norm, dropout=hp.dropout)


def _generate(gen, src, z, mode=EVAL, seed=0):
    return forward(gen, np.hstack([src, z]), mode, seed)


def _binarize(probs, mode, rng):
    if mode == "bernoulli":
        return (rng.random(probs.shape) < probs).astype(np.uint8)
    # ties at exactly 0.5 binarize to 0
    return (probs > 0.5).astype(np.uint8)


def _disc_pass(disc, src, real_tgt, fake, seed):
    """Discriminator over real pairs and fakes as one batch.

    One batch keeps batch-norm statistics shared between real and fake rows;
    separate batches would normalize away the difference between them.
    Returns outputs for real rows, outputs for fake rows and the cache.
    """
    n_real = real_tgt.shape[0]
    real_in = np.hstack([src[:n_real], real_tgt])
    fake_in = np.hstack([src[n_real:], fake])
    out, cache = forward_cache(disc, np.vstack([real_in, fake_in]), TRAIN, seed)
    return out[:n_real], out[n_real:], cache


def _disc_step(disc, src_real, tgt_real, src_fake, fake, lr, seed):
    d_real, d_fake, cache = _disc_pass(disc, np.vstack([src_real, src_fake]), tgt_real,
                                       fake, seed)
    v_real, g_real = loss_and_grad(LSQ, d_real, 1.0)
    v_fake, g_fake = loss_and_grad(LSQ, d_fake, 0.0)
    grad = backprop(disc, cache, np.vstack([g_real, g_fake]))[0]
    new = sgd_step(disc, grad, lr)
    return update_running_stats(new, cache), v_real + v_fake


def _gen_step(gen, disc, src, z, tgt, paired, lam, lr, seed, match_loss=L1):
    """Generator update on ``gen_loss + lam * match(paired fakes, targets)``."""
    rng = np.random.default_rng(seed)
    fake, g_cache = forward_cache(gen, np.hstack([src, z]), TRAIN, int(rng.integers(2**63)))
    d_real, d_fake, d_cache = _disc_pass(disc, np.vstack([src[paired], src]),
                                         tgt[paired], fake, int(rng.integers(2**63)))
    adv, g_fake = loss_and_grad(LSQ, d_fake, 1.0)
    d_out = np.vstack([np.zeros_like(d_real), g_fake])
    d_fake_in = backprop(disc, d_cache, d_out)[1][d_real.shape[0]:, src.shape[1]:]
    match = 0.0
    if lam > 0 and paired.any():
        match, d_match = loss_and_grad(match_loss, fake[paired], tgt[paired])
        d_fake_in[paired] += lam * d_match
    grad = backprop(gen, g_cache, d_fake_in)[0]
    new = sgd_step(gen, grad, lr)
    return update_running_stats(new, g_cache), adv, match


def fit_cgan(x_src, x_tgt, paired, hp, seed, src_type="src", tgt_type="tgt",
             generator=None, discriminator=None):
    """Train a cGAN on compact 0/1 matrices.

    ``paired[i]`` says whether row ``i`` has an observed target. A share of
    paired rows is held out; the returned generator is the one from the epoch
    with the lowest held-out L1 (the last epoch when nothing is held out).
    """
    x_src = np.asarray(x_src)
    x_tgt = np.asarray(x_tgt)
    paired = np.asarray(paired, dtype=bool)
    n = x_src.shape[0]
    if n == 0:
        raise RejectedInputError(f"no examples with source type {src_type}")
    if x_tgt.shape[0] != n or paired.shape[0] != n:
        raise RejectedInputError("source, target and paired mask must align")
    ds, dt = x_src.shape[1], x_tgt.shape[1]
    rng = np.random.default_rng(seed)
    gen = generator or init_params(generator_arch(ds, dt, hp), int(rng.integers(2**63)))
    disc = discriminator or init_params(discriminator_arch(ds, dt, hp),
                                        int(rng.integers(2**63)))
    if gen.arch.n_inputs != ds + hp.noise_dim or gen.arch.n_outputs != dt:
        raise RejectedInputError("generator architecture does not match the data widths")

    warning = None
    paired_idx = np.flatnonzero(paired)
    if paired_idx.size == 0 and hp.lambda_match > 0:
        warning = NO_PAIRED_WARNING
        warnings.warn(f"{NO_PAIRED_WARNING}: training {src_type}->{tgt_type} "
                      "adversarially only", RuntimeWarning, stacklevel=2)
    perm = rng.permutation(paired_idx)
    n_val = int(round(hp.validation_fraction * paired_idx.size)) if paired_idx.size >= 5 else 0
    val_idx = np.sort(perm[:n_val])
    train_mask = np.ones(n, dtype=bool)
    train_mask[val_idx] = False
    train_idx = np.flatnonzero(train_mask)
    val_src = x_src[val_idx].astype(np.float64)
    val_tgt = x_tgt[val_idx].astype(np.float64)
    val_z = np.random.default_rng(int(rng.integers(2**63))).normal(
        size=(val_idx.size, hp.noise_dim))

    best = (np.inf, gen, disc, 0)
    history = []
    for epoch in range(1, hp.epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        d_losses, g_losses, m_losses = [], [], []
        for start in range(0, order.size, hp.batch_size):
            b = order[start:start + hp.batch_size]
            src = x_src[b].astype(np.float64)
            tgt = x_tgt[b].astype(np.float64)
            pb = paired[b]
            z = rng.normal(size=(b.size, hp.noise_dim))
            fake = _generate(gen, src, z, TRAIN, int(rng.integers(2**63)))
            disc, d_loss = _disc_step(disc, src[pb], tgt[pb], src, fake,
                                      hp.discriminator_lr, int(rng.integers(2**63)))
            gen, g_loss, m_loss = _gen_step(gen, disc, src, z, tgt, pb, hp.lambda_match,
                                            hp.generator_lr, int(rng.integers(2**63)),
                                            hp.match_loss)
            d_losses.append(d_loss)
            g_losses.append(g_loss)
            m_losses.append(m_loss)
        val_l1 = (float(np.mean(np.abs(_generate(gen, val_src, val_z) - val_tgt)))
                  if val_idx.size else None)
        history.append({"epoch": epoch, "disc_loss": float(np.mean(d_losses or [0.0])),
                        "gen_loss": float(np.mean(g_losses or [0.0])),
                        "match_loss": float(np.mean(m_losses or [0.0])),
                        "validation_l1": val_l1})
        if val_l1 is None or val_l1 < best[0]:
            best = (val_l1 if val_l1 is not None else np.inf, gen, disc, epoch)
    val_l1, gen, disc, best_epoch = best
    return CganModel(src_type, tgt_type, gen, disc, hp.lambda_match, hp.noise_dim,
                     hp.binarize, best_epoch, None if np.isinf(val_l1) else val_l1,
                     tuple(history), warning)


def impute_matrix(model, x_src, z_seed, n_draws=1):
    """Generator probabilities and their binarization for every row.

    Noise for all rows comes from ``z_seed``; with ``n_draws > 1`` the
    probabilities of several draws are averaged before binarizing.
    """
    x_src = np.asarray(x_src)
    if x_src.ndim != 2 or x_src.shape[1] != model.src_width:
        raise RejectedInputError(
            f"{model.src_type} input needs {model.src_width} columns, got shape {x_src.shape}")
    rng = np.random.default_rng(z_seed)
    probs = np.zeros((x_src.shape[0], model.tgt_width))
    for _ in range(n_draws):
        z = rng.normal(size=(x_src.shape[0], model.noise_dim))
        for i in range(0, x_src.shape[0], 4096):
            probs[i:i + 4096] += _generate(model.generator,
                                           x_src[i:i + 4096].astype(np.float64),
                                           z[i:i + 4096])
    probs /= n_draws
    return probs, _binarize(probs, model.binarize, rng)
