"""Seeded synthetic cohort with three correlated code-vector data types.

Each person gets a latent vector ``h``. Code ``j`` of data type ``k`` is
present with probability ``sigmoid(c_kj + W_kj . h + a_k)`` where ``a_k`` is
solved so the expected code count matches ``mean_codes[k]``. Disease signal
codes load on a disease-specific latent axis, which is what makes one data
type informative about another and about the outcome.

Outcomes are drawn in the follow-up window from a logistic function of the
signal-code counts observed in the feature window plus follow-up noise, with
the intercept calibrated to the target prevalence.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .exceptions import CalibrationError, ParseError, RejectedInputError

DATA_TYPES = ("diag", "med", "lab")

# People per state in the source study, used as the default heavy-tailed
# region-size profile.
STATE_SIZES = (
    154, 485, 163, 9074, 326, 1979, 254, 4759, 2279, 1522, 888, 124, 641, 399,
    1889, 2890, 163, 233, 229, 1898, 8188, 1260, 7346, 512, 134, 16557, 839,
    1439, 11411, 114, 1905, 514, 1391, 184,
)
SOURCE_COHORT_SIZE = 82143
SOURCE_CASES = {"diabetes": 16824, "psychological": 8265, "ischemic_heart": 8044}


def default_region_weights(n_regions):
    """Region weights following the state-size skew.

    For 34 regions these are the normalized state sizes; otherwise the sizes
    at evenly spaced ranks of the sorted profile.
    """
    if n_regions == len(STATE_SIZES):
        w = np.asarray(STATE_SIZES, dtype=float)
    else:
        ranked = np.sort(np.asarray(STATE_SIZES, dtype=float))[::-1]
        idx = np.round(np.linspace(0, len(ranked) - 1, n_regions)).astype(int)
        w = ranked[idx]
    return tuple(float(x) for x in w / w.sum())


@dataclass(frozen=True)
class CodeVector:
    """Sparse multi-hot vector over one vocabulary."""

    vocab_size: int
    set_indices: tuple = ()
    data_type: Optional[str] = None

    def __post_init__(self):
        idx = tuple(int(i) for i in self.set_indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise RejectedInputError("set_indices must be sorted and unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.vocab_size):
            raise RejectedInputError(
                f"indices must lie in [0, {self.vocab_size}), got {idx[0]}..{idx[-1]}")
        object.__setattr__(self, "set_indices", idx)

    @classmethod
    def from_dense(cls, row, data_type=None):
        row = np.asarray(row)
        return cls(row.shape[0], tuple(np.flatnonzero(row).tolist()), data_type)

    def to_dense(self, dtype=np.uint8):
        out = np.zeros(self.vocab_size, dtype=dtype)
        out[list(self.set_indices)] = 1
        return out

    def __len__(self):
        return len(self.set_indices)


def stack_dense(vectors, vocab_size, dtype=np.uint8):
    """Rows of ``vectors`` as a dense matrix; a None entry gives a zero row."""
    out = np.zeros((len(vectors), vocab_size), dtype=dtype)
    for r, v in enumerate(vectors):
        if v is not None and v.set_indices:
            out[r, list(v.set_indices)] = 1
    return out


@dataclass(frozen=True)
class DiseaseSpec:
    name: str
    target_prevalence: float
    signal_codes: dict  # data type -> tuple of code indices
    noise_level: float = 1.0
    signal_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.target_prevalence < 1.0:
            raise RejectedInputError(
                f"{self.name}: target_prevalence must be in (0, 1)")
        if self.noise_level < 0:
            raise RejectedInputError(f"{self.name}: noise_level must be >= 0")
        codes = {k: tuple(sorted(int(i) for i in v))
                 for k, v in dict(self.signal_codes).items() if len(v)}
        if not codes:
            raise RejectedInputError(f"{self.name}: needs signal codes for some data type")
        unknown = set(codes) - set(DATA_TYPES)
        if unknown:
            raise RejectedInputError(f"{self.name}: unknown data types {sorted(unknown)}")
        object.__setattr__(self, "signal_codes", codes)


def default_diseases(vocab_sizes=(500, 300, 200), n_signal=(12, 8, 6)):
    """Three outcomes with prevalences taken from the source study's case counts."""
    names = ("diabetes", "psychological", "ischemic_heart")
    out = []
    for d, name in enumerate(names):
        codes = {}
        for k, t in enumerate(DATA_TYPES):
            m = min(n_signal[k], vocab_sizes[k] // (2 * len(names)))
            codes[t] = tuple(range(d * m, (d + 1) * m))
        out.append(DiseaseSpec(name, round(SOURCE_CASES[name] / SOURCE_COHORT_SIZE, 3),
                               codes, noise_level=0.4, signal_weight=0.8))
    return tuple(out)


@dataclass(frozen=True)
class CohortConfig:
    n_people: int = 10000
    vocab_sizes: tuple = (500, 300, 200)
    mean_codes: tuple = (13.6, 6.9, 7.4)
    n_regions: int = 34
    region_weights: Optional[tuple] = None
    diseases: Optional[tuple] = None
    unpaired_fraction: float = 0.2
    latent_dim: int = 8
    signal_loading: float = 1.5
    loading_scale: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.n_people < 0:
            raise RejectedInputError("n_people must be >= 0")
        vs = tuple(int(v) for v in self.vocab_sizes)
        mc = tuple(float(m) for m in self.mean_codes)
        if len(vs) != 3 or len(mc) != 3 or min(vs) < 1:
            raise RejectedInputError("vocab_sizes and mean_codes need 3 positive entries")
        for t, m, v in zip(DATA_TYPES, mc, vs):
            if not 0 < m < v:
                raise RejectedInputError(f"mean_codes[{t}]={m} must be in (0, {v})")
        if self.n_regions < 1:
            raise RejectedInputError("n_regions must be >= 1")
        weights = self.region_weights
        if weights is None:
            weights = default_region_weights(self.n_regions)
        weights = tuple(float(w) for w in weights)
        if len(weights) != self.n_regions or min(weights) < 0:
            raise RejectedInputError("region_weights needs n_regions nonnegative entries")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise RejectedInputError(f"region_weights sum to {sum(weights)}, expected 1")
        diseases = self.diseases if self.diseases is not None else default_diseases(vs)
        for d in diseases:
            for t, codes in d.signal_codes.items():
                if codes and codes[-1] >= vs[DATA_TYPES.index(t)]:
                    raise RejectedInputError(f"{d.name}: signal code outside {t} vocabulary")
        if len(diseases) > self.latent_dim:
            raise RejectedInputError("latent_dim must be >= number of diseases")
        if not 0.0 <= self.unpaired_fraction < 1.0:
            raise RejectedInputError("unpaired_fraction must be in [0, 1)")
        object.__setattr__(self, "vocab_sizes", vs)
        object.__setattr__(self, "mean_codes", mc)
        object.__setattr__(self, "region_weights", weights)
        object.__setattr__(self, "diseases", tuple(diseases))

    def vocab(self, data_type):
        return self.vocab_sizes[DATA_TYPES.index(data_type)]


@dataclass(frozen=True, eq=False)
class PersonRecord:
    """One individual. ``x[t]`` is None when data type ``t`` is absent."""

    person_id: str
    region: int
    x_diag: Optional[CodeVector]
    x_med: Optional[CodeVector]
    x_lab: Optional[CodeVector]
    labels: tuple

    def __post_init__(self):
        if self.x_diag is None and self.x_med is None and self.x_lab is None:
            raise RejectedInputError(f"{self.person_id}: no data type present")

    def vector(self, data_type):
        return getattr(self, "x_" + data_type)

    @property
    def present(self):
        return tuple(t for t in DATA_TYPES if self.vector(t) is not None)

    @property
    def fully_paired(self):
        return len(self.present) == 3

    def __eq__(self, other):
        if not isinstance(other, PersonRecord):
            return NotImplemented
        return (self.person_id, self.region, self.x_diag, self.x_med, self.x_lab,
                self.labels) == (other.person_id, other.region, other.x_diag,
                                 other.x_med, other.x_lab, other.labels)


@dataclass(frozen=True, eq=False)
class Cohort(Sequence):
    """Generated people plus the follow-up-window draws behind their labels.

    ``followup_noise`` and ``followup_uniform`` have shape
    (n_people, n_diseases); ``intercepts`` holds the calibrated logistic
    offsets. These exist only in the generator's ground truth.
    """

    records: tuple
    config: CohortConfig
    intercepts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    followup_noise: Optional[np.ndarray] = None
    followup_uniform: Optional[np.ndarray] = None
    signal_counts: Optional[np.ndarray] = None  # (n_people, n_diseases) from full vectors

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        if isinstance(other, Cohort):
            return self.records == other.records
        return tuple(self) == tuple(other)

    def subset(self, keep):
        """Cohort restricted to record positions ``keep`` (order preserved)."""
        keep = list(keep)
        pick = lambda a: None if a is None else a[keep]  # noqa: E731
        return Cohort(tuple(self.records[i] for i in keep), self.config, self.intercepts,
                      pick(self.followup_noise), pick(self.followup_uniform),
                      pick(self.signal_counts))

    @property
    def disease_names(self):
        return tuple(d.name for d in self.config.diseases)


def _draw_codes(rng, logits):
    return (rng.random(logits.shape) < expit(logits)).astype(np.uint8)


def _solve_intercept(fn, target, name):
    try:
        return brentq(lambda a: fn(a) - target, -60.0, 60.0, xtol=1e-12)
    except ValueError:
        raise CalibrationError(f"cannot calibrate {name} to {target}") from None


def _type_model(rng, config):
    """Per-type code popularity, latent loadings and calibrated intercepts."""
    models = {}
    latent_probe = np.random.default_rng(rng.integers(2**63)).normal(
        size=(2000, config.latent_dim))
    for k, t in enumerate(DATA_TYPES):
        vocab = config.vocab_sizes[k]
        popularity = rng.normal(0.0, 1.0, size=vocab)
        loadings = rng.normal(0.0, config.loading_scale / math.sqrt(config.latent_dim),
                              size=(vocab, config.latent_dim))
        for d, disease in enumerate(config.diseases):
            codes = list(disease.signal_codes.get(t, ()))
            if codes:
                loadings[codes, d] += config.signal_loading
                # signal codes are at least as common as a typical code
                popularity[codes] = np.abs(popularity[codes])
        base = latent_probe @ loadings.T + popularity
        target = config.mean_codes[k]
        a = _solve_intercept(lambda a: expit(base + a).sum(axis=1).mean(), target,
                             f"{t} code rate")
        models[t] = (popularity + a, loadings)
    return models


def signal_counts(vectors, diseases):
    """Number of each disease's signal codes present, summed over data types.

    ``vectors`` maps data type to a dense (n, vocab) 0/1 matrix.
    """
    n = next(iter(vectors.values())).shape[0]
    out = np.zeros((n, len(diseases)))
    for d, disease in enumerate(diseases):
        for t, codes in disease.signal_codes.items():
            if t in vectors and codes:
                out[:, d] += vectors[t][:, list(codes)].sum(axis=1)
    return out


def label_probability(counts, noise, intercepts, diseases):
    """Outcome probability given signal counts and follow-up noise."""
    weights = np.array([d.signal_weight for d in diseases])
    levels = np.array([d.noise_level for d in diseases])
    return expit(intercepts + weights * counts + levels * noise)


def generate_cohort(config):
    """Draw ``config.n_people`` people deterministically from ``config.seed``."""
    n, diseases = config.n_people, config.diseases
    n_dis = len(diseases)
    if n == 0:
        return Cohort((), config, np.zeros(n_dis), np.zeros((0, n_dis)),
                      np.zeros((0, n_dis)), np.zeros((0, n_dis)))
    root = np.random.default_rng(config.seed)
    model_rng, person_rng, label_rng, mask_rng, region_rng = (
        np.random.default_rng(s) for s in root.integers(2**63, size=5))
    models = _type_model(model_rng, config)

    regions = region_rng.choice(config.n_regions, size=n, p=np.asarray(config.region_weights))
    latent = person_rng.normal(size=(n, config.latent_dim))
    dense = {}
    for t in DATA_TYPES:
        offset, loadings = models[t]
        dense[t] = _draw_codes(person_rng, latent @ loadings.T + offset)

    counts = signal_counts(dense, diseases)
    noise = label_rng.normal(size=(n, n_dis))
    uniform = label_rng.random(size=(n, n_dis))
    intercepts = np.zeros(n_dis)
    for d, disease in enumerate(diseases):
        w, lvl = disease.signal_weight, disease.noise_level
        intercepts[d] = _solve_intercept(
            lambda a: expit(a + w * counts[:, d] + lvl * noise[:, d]).mean(),
            disease.target_prevalence, f"{disease.name} prevalence")
    labels = (uniform < label_probability(counts, noise, intercepts, diseases)).astype(np.uint8)

    # which people lose one or two data types
    unpaired = mask_rng.random(n) < config.unpaired_fraction
    n_missing = mask_rng.integers(1, 3, size=n)
    order = np.argsort(mask_rng.random((n, 3)), axis=1)
    present = np.ones((n, 3), dtype=bool)
    for i in np.flatnonzero(unpaired):
        present[i, order[i, :n_missing[i]]] = False

    width = max(7, len(str(n)))
    records = []
    for i in range(n):
        vecs = [CodeVector(config.vocab_sizes[k], tuple(np.flatnonzero(dense[t][i]).tolist()), t)
                if present[i, k] else None for k, t in enumerate(DATA_TYPES)]
        records.append(PersonRecord(f"P{i:0{width}d}", int(regions[i]), *vecs,
                                    tuple(int(v) for v in labels[i])))
    return Cohort(tuple(records), config, intercepts, noise, uniform, counts)


@dataclass(frozen=True)
class CohortStats:
    n_people: int
    mean_codes: dict
    prevalence: dict
    region_counts: tuple
    unpaired_fraction: float

    def to_dict(self):
        return {"n_people": self.n_people, "mean_codes": self.mean_codes,
                "prevalence": self.prevalence, "region_counts": list(self.region_counts),
                "unpaired_fraction": self.unpaired_fraction}


def cohort_stats(records, disease_names=None, n_regions=None):
    """Empirical statistics; code means are over people having that type."""
    records = list(records)
    if not records:
        raise RejectedInputError("cohort_stats needs at least one record")
    if disease_names is None:
        disease_names = tuple(f"disease_{d}" for d in range(len(records[0].labels)))
    means = {}
    for t in DATA_TYPES:
        counts = [len(r.vector(t)) for r in records if r.vector(t) is not None]
        means[t] = float(np.mean(counts)) if counts else math.nan
    labels = np.array([r.labels for r in records], dtype=float)
    prevalence = {name: float(labels[:, d].mean()) for d, name in enumerate(disease_names)}
    n_regions = n_regions or (max(r.region for r in records) + 1)
    hist = np.bincount([r.region for r in records], minlength=n_regions)
    unpaired = sum(1 for r in records if not r.fully_paired) / len(records)
    return CohortStats(len(records), means, prevalence, tuple(int(h) for h in hist),
                       float(unpaired))


@dataclass(frozen=True)
class FeatureView:
    """Observation-window data only: ids and code vectors."""

    person_ids: tuple
    vectors: tuple  # per person: (x_diag, x_med, x_lab)


@dataclass(frozen=True)
class LabelView:
    """Follow-up-window data only: outcomes and the draws behind them."""

    person_ids: tuple
    labels: np.ndarray
    followup_noise: np.ndarray
    followup_uniform: np.ndarray


def split_windows(cohort):
    """Separate observation-window features from follow-up-window outcomes.

    The generator emits both views directly; this checks that they share
    no fields beyond the person id and returns them.
    """
    ids = tuple(r.person_id for r in cohort)
    features = FeatureView(ids, tuple((r.x_diag, r.x_med, r.x_lab) for r in cohort))
    n_dis = len(cohort.config.diseases)
    labels = np.array([r.labels for r in cohort], dtype=np.uint8).reshape(len(ids), n_dis)
    label_view = LabelView(ids, labels, cohort.followup_noise, cohort.followup_uniform)
    shared = set(vars(features)) & set(vars(label_view))
    assert shared == {"person_ids"}, shared
    return features, label_view


def relabel(cohort, noise_scale=1.0):
    """Recompute outcomes from the stored draws, optionally scaling follow-up noise.

    With ``noise_scale=1`` this reproduces the generated labels exactly;
    ``noise_scale=0`` gives the outcome implied by observed signal codes
    alone.
    """
    probs = label_probability(cohort.signal_counts, noise_scale * cohort.followup_noise,
                              cohort.intercepts, cohort.config.diseases)
    return (cohort.followup_uniform < probs).astype(np.uint8)


# ---------------------------------------------------------------------------
# plain-text export: one tab-separated line per person
# person_id  region  diag  med  lab  labels
# index lists are comma-separated, "-" marks an absent type, labels a bit string

_HEADER = "# confedlearn-cohort v1"


def _fmt_vec(v):
    return "-" if v is None else ",".join(str(i) for i in v.set_indices)


def export_cohort(cohort, path):
    cfg = cohort.config
    lines = [_HEADER,
             "# vocab=" + ",".join(str(v) for v in cfg.vocab_sizes),
             "# diseases=" + ",".join(d.name for d in cfg.diseases),
             "# fields=person_id\tregion\tdiag\tmed\tlab\tlabels"]
    for r in cohort:
        lines.append("\t".join([r.person_id, str(r.region), _fmt_vec(r.x_diag),
                                _fmt_vec(r.x_med), _fmt_vec(r.x_lab),
                                "".join(str(b) for b in r.labels)]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def import_cohort(path):
    """Read an exported cohort back as a list of :class:`PersonRecord`."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _HEADER:
        raise ParseError(f"{path}: missing cohort header")
    vocab = None
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("# vocab="):
            vocab = tuple(int(v) for v in line[8:].split(","))
            continue
        if line.startswith("#") or not line:
            continue
        parts = line.split("\t")
        if len(parts) != 6 or vocab is None:
            raise ParseError(f"{path}:{lineno}: malformed record")
        try:
            vecs = [None if s == "-" else
                    CodeVector(vocab[k], tuple(int(i) for i in s.split(",")) if s else (), t)
                    for k, (t, s) in enumerate(zip(DATA_TYPES, parts[2:5]))]
            records.append(PersonRecord(parts[0], int(parts[1]), *vecs,
                                        tuple(int(b) for b in parts[5])))
        except (ValueError, RejectedInputError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return records
