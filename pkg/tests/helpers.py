"""Oracles and fixtures shared by the unit and acceptance tests."""

import numpy as np

from confedlearn.nn import BCE, L1, LSQ, TRAIN, forward, init_params, value_and_grad
from confedlearn.nn.losses import bce_loss, l1_loss, lsq_loss
from confedlearn.nn.params import IDENTITY, SIGMOID, ArchSpec, layout

FD_STEP = 1e-5
_LOSS_FN = {BCE: bce_loss, L1: l1_loss, LSQ: lambda out, y: lsq_loss(out, y)}


def random_case(rng, loss):
    """A small random network, batch and targets suited to ``loss``.

    Hidden layers get batch norm at random; dropout stays off so the
    objective is a deterministic function of the parameters.
    """
    n_hidden = int(rng.integers(0, 3))
    sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 6)) for _ in range(n_hidden)]
    sizes.append(int(rng.integers(1, 4)))
    act = SIGMOID if loss == BCE else (IDENTITY if rng.random() < 0.5 else SIGMOID)
    arch = ArchSpec(tuple(sizes), output_activation=act,
                    batch_norm=tuple(bool(rng.random() < 0.5) for _ in range(n_hidden)),
                    dropout=0.0)
    params = init_params(arch, int(rng.integers(2**31)))
    # perturb every parameter so biases, gammas and betas are not at their defaults
    values = params.values + rng.normal(0, 0.3, size=params.values.shape) * params.trainable_mask
    params = params.replace(values)
    x = rng.normal(size=(int(rng.integers(3, 7)), sizes[0]))
    out = forward(params, x, TRAIN)
    if loss == BCE:
        y = (rng.random(out.shape) < 0.5).astype(float)
    elif loss == L1:
        # keep every residual away from the kink at zero
        y = out + rng.choice([-1.0, 1.0], size=out.shape) * rng.uniform(0.05, 0.5, out.shape)
    else:
        y = rng.normal(size=out.shape)
    return params, x, y


def objective(params, x, y, loss, mode=TRAIN):
    return _LOSS_FN[loss](forward(params, x, mode), y)


def finite_difference_grad(params, x, y, loss, mode=TRAIN, step=FD_STEP):
    """Central differences over every trainable parameter; zero elsewhere."""
    base = params.values
    grad = np.zeros_like(base)
    for i in np.flatnonzero(params.trainable_mask):
        up = base.copy()
        up[i] += step
        down = base.copy()
        down[i] -= step
        grad[i] = (objective(params.replace(up), x, y, loss, mode)
                   - objective(params.replace(down), x, y, loss, mode)) / (2 * step)
    return grad


def gradient_error(params, x, y, loss, mode=TRAIN):
    """Norm-relative max error between backprop and finite differences."""
    analytic = value_and_grad(params, x, y, loss, mode)[1]
    numeric = finite_difference_grad(params, x, y, loss, mode)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def layer_kinds(arch):
    """Which layer features an architecture exercises."""
    kinds = {arch.output_activation}
    if arch.n_hidden:
        kinds.add("leaky_relu")
    if any(arch.batch_norm):
        kinds.add("batch_norm")
    return kinds


def pair_count_auc(scores, labels):
    """O(n^2) probability that a positive outscores a negative, ties half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def rank_walk_average_precision(scores, labels):
    """Walk down the ranking (ties: negatives first) summing precision at hits."""
    items = sorted(zip(scores, labels), key=lambda t: (-t[0], t[1]))
    hits, total = 0, 0.0
    for rank, (_, label) in enumerate(items, start=1):
        if label:
            hits += 1
            total += hits / rank
    return total / hits


def n_parameters(arch):
    return layout(arch).total


def copy_dataset(n=2000, vocab=100, seed=0, density=0.5):
    """Identity task: targets equal sources, uniform random binary vectors."""
    x = (np.random.default_rng(seed).random((n, vocab)) < density).astype(np.uint8)
    return x, x.copy()


def plain_view(x, y, silo_id=0):
    """An imputed view whose inputs are the three column blocks of ``x``."""
    from confedlearn.imputation import IMPUTED, OBSERVED, TRUE, ImputedView

    x = np.asarray(x)
    cut = np.array_split(np.arange(x.shape[1]), 3)
    blocks = {t: x[:, c].astype(np.uint8) for t, c in zip(("diag", "med", "lab"), cut)}
    tags = {"diag": OBSERVED, "med": IMPUTED, "lab": IMPUTED}
    labels = np.asarray(y, dtype=np.uint8)
    labels = labels[:, None] if labels.ndim == 1 else labels
    ids = tuple(f"s{silo_id}r{i}" for i in range(len(x)))
    return ImputedView(silo_id, ids, blocks, tags, labels, (TRUE,) * labels.shape[1])


def fedavg_deviation(k, rounds=50, n=40, n_in=9, hidden=(6,), lr=0.5, seed=0):
    """Max componentwise gap between FedAvg over ``k`` identical silos and
    centralized full-batch SGD, over ``rounds`` rounds.

    Each round broadcasts the global parameters as a parameter file, runs one
    full-batch local step per silo, and aggregates the replies.
    """
    from confedlearn.nn import deserialize_params, mlp_arch, serialize_params, train_step
    from confedlearn.training import TrainConfig, fedavg_aggregate, local_train

    rng = np.random.default_rng(seed)
    x = (rng.random((n, n_in)) < 0.4).astype(np.uint8)
    y = (rng.random(n) < 0.3).astype(np.uint8)
    views = [plain_view(x, y, s) for s in range(k)]
    config = TrainConfig(local_epochs=1, batch_size=n, lr=lr, hidden=hidden)
    theta = init_params(mlp_arch(n_in, hidden, 1), seed)
    central = theta
    worst = 0.0
    for t in range(rounds):
        replies = []
        for s, view in enumerate(views):
            received = deserialize_params(serialize_params(theta))
            theta_s, n_s = local_train(received, view, config, seed=1000 * t + s)
            replies.append((deserialize_params(serialize_params(theta_s)), n_s))
        theta = fedavg_aggregate([r[0] for r in replies], [r[1] for r in replies])
        central, _ = train_step(central, x.astype(float), y[:, None].astype(float), BCE, lr)
        worst = max(worst, float(np.abs(theta.values - central.values).max()))
    return worst


# a small but complete experiment, quick enough for unit tests
TINY_CONFIG = {
    "cohort": {"n_people": 1500, "n_regions": 3, "region_weights": [0.4, 0.35, 0.25]},
    "topology": {"central_region": 0},
    "models": {"generator": {"hidden": [16]}, "discriminator": {"hidden": [8]},
               "classifier": {"hidden": [8]}, "task": {"hidden": [8]}},
    "cgan": {"epochs": 2},
    "classifier": {"max_epochs": 5},
    "training": {"max_rounds": 4},
}
