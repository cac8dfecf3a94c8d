"""Central step-1 models and silo-local step-2 inference.

The central analyzer trains six directed cGANs (one per ordered pair of data
types) and one label classifier per (data type, disease). Each silo then
fills in its two missing data types with the cGANs and, unless it is a
clinic keeping its own outcomes, infers labels with its type's classifier.
"""

from dataclasses import dataclass, field
from itertools import permutations
from types import MappingProxyType

import numpy as np

from .cgan import CganHyperparams, CganModel, fit_cgan, impute_matrix
from .cohort import DATA_TYPES, CodeVector, stack_dense
from .estimators import NeuralNetClassifier
from .exceptions import DegenerateLabelError, RejectedInputError
from .nn import ModelParams, serialize_params
from .nn.fit import predict_in_chunks
from .silos import SiloKind

OBSERVED = "observed"
IMPUTED = "imputed"
TRUE = "true"
INFERRED = "inferred"
LABEL_MODES = ("clinic-true", "inferred-everywhere")
DIRECTIONS = tuple(permutations(DATA_TYPES, 2))


@dataclass(frozen=True)
class ClassifierHyperparams:
    hidden: tuple = (32,)
    learning_rate: float = 0.1
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 3
    validation_fraction: float = 0.2
    batch_norm: bool = False
    dropout: float = 0.0


@dataclass(frozen=True)
class LabelClassifier:
    src_type: str
    disease: int
    model: ModelParams

    def predict_proba(self, x):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.model.arch.n_inputs:
            raise RejectedInputError(
                f"{self.src_type} classifier needs {self.model.arch.n_inputs} columns, "
                f"got shape {x.shape}")
        return predict_in_chunks(self.model, x)[:, 0]


def _dense(records, data_type, width):
    return stack_dense([r.vector(data_type) for r in records], width)


def _vocab(records, data_type):
    for r in records:
        v = r.vector(data_type)
        if v is not None:
            return v.vocab_size
    return None


def train_cgan(records, src_type, tgt_type, hyperparams=None, seed=0, vocab_sizes=None):
    """Fit the ``src_type -> tgt_type`` cGAN on central records.

    Records lacking ``src_type`` are skipped; records lacking ``tgt_type``
    take part adversarially only.
    """
    hp = hyperparams or CganHyperparams()
    rows = [r for r in records if r.vector(src_type) is not None]
    if not rows:
        raise RejectedInputError(f"no central record has a {src_type} vector")
    vocab = dict(vocab_sizes or {})
    ws = vocab.get(src_type) or _vocab(rows, src_type)
    wt = vocab.get(tgt_type) or _vocab(records, tgt_type)
    if wt is None:
        raise RejectedInputError(f"width of {tgt_type} vectors unknown; pass vocab_sizes")
    paired = np.array([r.vector(tgt_type) is not None for r in rows])
    x_tgt = stack_dense([r.vector(tgt_type) if p else None for r, p in zip(rows, paired)], wt)
    return fit_cgan(_dense(rows, src_type, ws), x_tgt, paired, hp, seed, src_type, tgt_type)


def impute(cgan, x_src, z_seed):
    """Generator probabilities and binarized :class:`CodeVector` for one record."""
    if x_src.vocab_size != cgan.src_width:
        raise RejectedInputError(
            f"{cgan.src_type} vector has width {x_src.vocab_size}, model expects "
            f"{cgan.src_width}")
    probs, binary = impute_matrix(cgan, x_src.to_dense()[None, :], z_seed)
    return probs[0], CodeVector.from_dense(binary[0], cgan.tgt_type)


def train_label_classifier(records, src_type, disease, hyperparams=None, seed=0):
    """BCE classifier from one data type to one disease label."""
    hp = hyperparams or ClassifierHyperparams()
    rows = [r for r in records if r.vector(src_type) is not None]
    if not rows:
        raise RejectedInputError(f"no central record has a {src_type} vector")
    y = np.array([r.labels[disease] for r in rows], dtype=np.uint8)
    if y.min() == y.max():
        raise DegenerateLabelError(
            f"{src_type} records hold only label {y[0]} for disease {disease}")
    clf = NeuralNetClassifier(hidden_layer_sizes=hp.hidden, batch_norm=hp.batch_norm,
                              dropout=hp.dropout, learning_rate=hp.learning_rate,
                              batch_size=hp.batch_size, max_epochs=hp.max_epochs,
                              patience=hp.patience,
                              validation_fraction=hp.validation_fraction,
                              random_state=seed)
    clf.fit(_dense(rows, src_type, rows[0].vector(src_type).vocab_size), y)
    return LabelClassifier(src_type, disease, clf.params_)


@dataclass(frozen=True, eq=False)
class StepOneModels:
    """Everything the central analyzer ships to the silos before step 3."""

    cgans: dict  # (src_type, tgt_type) -> CganModel
    classifiers: dict  # (data_type, disease) -> LabelClassifier

    def parameter_files(self):
        """``name -> bytes`` in the parameter format, role encoded in each tag."""
        out = {}
        for (s, t), m in sorted(self.cgans.items()):
            out[f"cgan_{s}_{t}_generator.cfl"] = serialize_params(
                m.generator, f"role=generator src={s} tgt={t}")
            out[f"cgan_{s}_{t}_discriminator.cfl"] = serialize_params(
                m.discriminator, f"role=discriminator src={s} tgt={t}")
        for (t, d), c in sorted(self.classifiers.items()):
            out[f"classifier_{t}_{d}.cfl"] = serialize_params(
                c.model, f"role=classifier src={t} disease={d}")
        return out


def train_step_one(records, n_diseases, cgan_hp=None, classifier_hp=None, seed=0,
                   vocab_sizes=None):
    """Train the six cGANs and the per-(type, disease) label classifiers."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(2**63, size=len(DIRECTIONS) + len(DATA_TYPES) * n_diseases)
    cgans = {}
    for (s, t), k in zip(DIRECTIONS, seeds):
        cgans[s, t] = train_cgan(records, s, t, cgan_hp, int(k), vocab_sizes)
    classifiers = {}
    k = len(DIRECTIONS)
    for t in DATA_TYPES:
        for d in range(n_diseases):
            classifiers[t, d] = train_label_classifier(records, t, d, classifier_hp,
                                                       int(seeds[k]))
            k += 1
    return StepOneModels(cgans, classifiers)


@dataclass(frozen=True, eq=False)
class ImputedView:
    """A silo's records with all three data types and a label per disease.

    ``x`` maps each data type to an (n, vocab) uint8 matrix; ``tags`` says
    which of them is the silo's own data. ``label_tags`` holds one tag per
    disease column. All arrays are read-only.
    """

    silo_id: int
    local_ids: tuple
    x: dict
    tags: dict
    labels: np.ndarray
    label_tags: tuple
    probabilities: dict = field(default_factory=dict)

    def __post_init__(self):
        if sum(tag == OBSERVED for tag in self.tags.values()) != 1:
            raise RejectedInputError("an imputed view holds exactly one observed type")
        for m in (*self.x.values(), self.labels, *self.probabilities.values()):
            m.setflags(write=False)
        object.__setattr__(self, "x", MappingProxyType(dict(self.x)))
        object.__setattr__(self, "tags", MappingProxyType(dict(self.tags)))

    @property
    def n(self):
        return len(self.local_ids)

    @property
    def observed_type(self):
        return next(t for t, tag in self.tags.items() if tag == OBSERVED)

    def inputs(self, rows=None, types=DATA_TYPES):
        """Float task-model inputs ``x_diag ++ x_med ++ x_lab`` for ``rows``."""
        idx = slice(None) if rows is None else np.asarray(rows, dtype=int)
        return np.hstack([self.x[t][idx] for t in types]).astype(np.float64)


def build_imputed_view(silo, cgans, classifiers, label_mode="clinic-true", seed=0,
                       n_draws=1):
    """Fill in a silo's two missing types and its labels, inside the silo."""
    if label_mode not in LABEL_MODES:
        raise RejectedInputError(f"label_mode must be one of {LABEL_MODES}, got {label_mode!r}")
    own = silo.data_type
    n_diseases = len({d for (t, d) in classifiers if t == own})
    missing = [t for t in DATA_TYPES if t != own]
    for t in missing:
        if (own, t) not in cgans:
            raise RejectedInputError(f"no {own}->{t} cGAN for silo {silo.silo_id}")
    if n_diseases == 0:
        raise RejectedInputError(f"no {own} label classifier for silo {silo.silo_id}")

    rng = np.random.default_rng(seed)
    x = {own: np.array(silo.dense)}
    tags = {own: OBSERVED}
    probs = {}
    for t in missing:
        z_seed = int(rng.integers(2**63))
        cgan = cgans[own, t]
        if silo.n:
            probs[t], x[t] = impute_matrix(cgan, silo.dense, z_seed, n_draws)
        else:
            probs[t] = np.zeros((0, cgan.tgt_width))
            x[t] = np.zeros((0, cgan.tgt_width), dtype=np.uint8)
        tags[t] = IMPUTED

    if silo.kind is SiloKind.CLINIC and label_mode == "clinic-true":
        labels = (np.array(silo.true_labels) if silo.n
                  else np.zeros((0, n_diseases), dtype=np.uint8))
        label_tags = (TRUE,) * n_diseases
    else:
        labels = np.zeros((silo.n, n_diseases), dtype=np.uint8)
        for d in range(n_diseases):
            if (own, d) not in classifiers:
                raise RejectedInputError(f"no {own} classifier for disease {d}")
            if silo.n:
                labels[:, d] = classifiers[own, d].predict_proba(silo.dense) > 0.5
        label_tags = (INFERRED,) * n_diseases
    return ImputedView(silo.silo_id, silo.local_ids, {t: x[t] for t in DATA_TYPES},
                       {t: tags[t] for t in DATA_TYPES}, labels, label_tags, probs)


__all__ = [
    "CganHyperparams", "CganModel", "ClassifierHyperparams", "LabelClassifier",
    "StepOneModels", "ImputedView", "train_cgan", "impute", "train_label_classifier",
    "train_step_one", "build_imputed_view", "OBSERVED", "IMPUTED", "TRUE", "INFERRED",
    "LABEL_MODES", "DIRECTIONS",
]
