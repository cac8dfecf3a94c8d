"""Architecture descriptors and flat parameter vectors."""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from ..exceptions import RejectedInputError

SIGMOID = "sigmoid"
IDENTITY = "identity"
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _per_hidden(value, n_hidden, name):
    if isinstance(value, (bool, int, float, np.floating, np.bool_)):
        return (type(value)(value),) * n_hidden if n_hidden else ()
    value = tuple(value)
    if len(value) != n_hidden:
        raise RejectedInputError(
            f"{name} needs one entry per hidden layer ({n_hidden}), got {len(value)}")
    return value


@dataclass(frozen=True)
class ArchSpec:
    """Feed-forward architecture.

    Parameters
    ----------
    layer_sizes : sequence of int
        Widths from input to output, at least two entries.
    hidden_slope : float
        Leaky-ReLU negative slope for hidden layers.
    output_activation : {"sigmoid", "identity"}
    batch_norm : bool or sequence of bool
        Per hidden layer; a scalar is broadcast.
    dropout : float or sequence of float
        Per hidden layer dropout rate in [0, 1); a scalar is broadcast.
    """

    layer_sizes: tuple
    hidden_slope: float = 0.01
    output_activation: str = SIGMOID
    batch_norm: tuple = False
    dropout: tuple = 0.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise RejectedInputError("an architecture needs at least 2 layers")
        if min(sizes) < 1:
            raise RejectedInputError(f"layer sizes must be >= 1, got {sizes}")
        if self.output_activation not in (SIGMOID, IDENTITY):
            raise RejectedInputError(
                f"unknown output activation {self.output_activation!r}")
        n_hidden = len(sizes) - 2
        bn = tuple(bool(b) for b in _per_hidden(self.batch_norm, n_hidden, "batch_norm"))
        dr = tuple(float(d) for d in _per_hidden(self.dropout, n_hidden, "dropout"))
        if any(not 0.0 <= d < 1.0 for d in dr):
            raise RejectedInputError(f"dropout rates must lie in [0, 1), got {dr}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "hidden_slope", float(self.hidden_slope))
        object.__setattr__(self, "batch_norm", bn)
        object.__setattr__(self, "dropout", dr)

    @property
    def n_hidden(self):
        return len(self.layer_sizes) - 2

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return layout(self).total


class LayerSlices(NamedTuple):
    weight: slice
    bias: slice
    gamma: slice | None
    beta: slice | None
    running_mean: slice | None
    running_var: slice | None


class Layout(NamedTuple):
    layers: tuple
    total: int
    trainable: np.ndarray  # bool mask, False on running statistics


@lru_cache(maxsize=256)
def layout(arch):
    """Offsets of every block inside the flat parameter vector.

    Order: for each layer ``W`` (row-major, in x out), ``b``, then
    ``gamma, beta`` if that hidden layer is batch-normalized; the running
    means/variances of all normalized layers follow at the very end.
    """
    sizes = arch.layer_sizes
    pos = 0
    blocks = []
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = slice(pos, pos + n_in * n_out)
        pos = w.stop
        b = slice(pos, pos + n_out)
        pos = b.stop
        g = be = None
        if i < arch.n_hidden and arch.batch_norm[i]:
            g = slice(pos, pos + n_out)
            be = slice(pos + n_out, pos + 2 * n_out)
            pos += 2 * n_out
        blocks.append([w, b, g, be, None, None])
    n_trainable = pos
    for i in range(arch.n_hidden):
        if arch.batch_norm[i]:
            n_out = sizes[i + 1]
            blocks[i][4] = slice(pos, pos + n_out)
            blocks[i][5] = slice(pos + n_out, pos + 2 * n_out)
            pos += 2 * n_out
    mask = np.zeros(pos, dtype=bool)
    mask[:n_trainable] = True
    mask.setflags(write=False)
    return Layout(tuple(LayerSlices(*b) for b in blocks), pos, mask)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Architecture plus its flat float64 parameter vector (read-only)."""

    arch: ArchSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        expected = self.arch.n_params
        if values.shape[0] != expected:
            raise RejectedInputError(
                f"architecture implies {expected} values, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise RejectedInputError("parameter values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)

    __hash__ = None

    def replace(self, values):
        return ModelParams(self.arch, values)

    def weight(self, layer):
        sl = layout(self.arch).layers[layer]
        n_in, n_out = self.arch.layer_sizes[layer], self.arch.layer_sizes[layer + 1]
        return self.values[sl.weight].reshape(n_in, n_out)

    def bias(self, layer):
        return self.values[layout(self.arch).layers[layer].bias]

    @property
    def trainable_mask(self):
        return layout(self.arch).trainable


def init_params(arch, seed):
    """Glorot-uniform weights, zero biases, unit BN scale, unit running variance."""
    rng = np.random.default_rng(seed)
    lay = layout(arch)
    values = np.zeros(lay.total)
    sizes = arch.layer_sizes
    for i, sl in enumerate(lay.layers):
        n_in, n_out = sizes[i], sizes[i + 1]
        bound = np.sqrt(6.0 / (n_in + n_out))
        values[sl.weight] = rng.uniform(-bound, bound, size=n_in * n_out)
        if sl.gamma is not None:
            values[sl.gamma] = 1.0
            values[sl.running_var] = 1.0
    return ModelParams(arch, values)


def zero_params(arch):
    """All weights and biases zero (BN scale and running variance stay 1)."""
    lay = layout(arch)
    values = np.zeros(lay.total)
    for sl in lay.layers:
        if sl.gamma is not None:
            values[sl.gamma] = 1.0
            values[sl.running_var] = 1.0
    return ModelParams(arch, values)


def mlp_arch(n_in, hidden: Sequence[int], n_out, *, output_activation=SIGMOID,
             batch_norm=False, dropout=0.0, hidden_slope=0.01):
    """Convenience constructor: ``n_in -> hidden... -> n_out``."""
    return ArchSpec((n_in, *hidden, n_out), hidden_slope, output_activation,
                    batch_norm, dropout)
