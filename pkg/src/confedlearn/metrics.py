"""Splits, ranking metrics and the screening operating point."""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .cohort import DATA_TYPES, stack_dense
from .exceptions import RejectedInputError, UndefinedMetricError

METHOD_ORDER = ("centralized", "central_only", "federated_single_type", "confederated")
METHOD_TITLES = {
    "centralized": "Data with no separation (centralized)",
    "central_only": "Use only data with central analyzer",
    "federated_single_type": "Federated learning using a single data type",
    "confederated": "Confederated learning",
}


@dataclass(frozen=True)
class SplitPlan:
    test_fraction: float = 0.2
    central_validation_fraction: float = 0.2
    silo_validation_fraction: float = 0.2
    seed: int = 0
    final_fit: bool = False

    def __post_init__(self):
        for name in ("test_fraction", "central_validation_fraction",
                     "silo_validation_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise RejectedInputError(f"{name} must be in (0, 1), got {v}")


@dataclass(frozen=True)
class SplitAssignment:
    """Person-level test/validation/train sets plus per-silo validation rows.

    ``silo_validation`` maps silo id to sorted record positions inside that
    silo; silos know nothing about person ids.
    """

    test_ids: frozenset
    central_validation_ids: frozenset
    train_ids: frozenset
    silo_validation: dict = field(default_factory=dict)
    final_fit: bool = False

    def role(self, person_id):
        if person_id in self.test_ids:
            return "test"
        if person_id in self.central_validation_ids:
            return "validation"
        return "train"

    def silo_train_rows(self, silo):
        if self.final_fit:
            return np.arange(silo.n)
        val = set(self.silo_validation.get(silo.silo_id, ()))
        return np.array([i for i in range(silo.n) if i not in val], dtype=int)


def _take(rng, pool, fraction, what):
    k = int(round(fraction * len(pool)))
    if k == 0 or k == len(pool):
        raise RejectedInputError(f"{what} split of {len(pool)} people at {fraction} is empty")
    picked = rng.permutation(len(pool))[:k]
    return frozenset(pool[i] for i in picked)


def make_splits(cohort, plan, network=None):
    """Draw the global test set, and with ``network`` the validation sets.

    The test set depends only on the cohort and ``plan.seed``, so it is the
    same whichever region acts as central analyzer. Build the network from
    the non-test people, then call again with it to add validation sets.
    """
    ids = [r.person_id for r in cohort]
    root = np.random.default_rng(plan.seed)
    test_rng, central_rng, silo_rng = (np.random.default_rng(s)
                                       for s in root.integers(2**63, size=3))
    test = _take(test_rng, ids, plan.test_fraction, "test")
    if network is None:
        return SplitAssignment(test, frozenset(), frozenset(ids) - test,
                               final_fit=plan.final_fit)
    central = [p for p in network.central.person_ids if p not in test]
    if len(central) < len(network.central):
        raise RejectedInputError("network was built from people in the test set")
    central_val = _take(central_rng, central, plan.central_validation_fraction,
                        "central validation")
    silo_val = {}
    for silo in network.silos:
        k = int(round(plan.silo_validation_fraction * silo.n))
        rows = np.sort(np.random.default_rng(silo_rng.integers(2**63))
                       .permutation(silo.n)[:k])
        silo_val[silo.silo_id] = tuple(int(i) for i in rows)
    train = frozenset(ids) - test - central_val
    return SplitAssignment(test, central_val, train, silo_val, plan.final_fit)


# ---------------------------------------------------------------------------
# metrics

def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise RejectedInputError(f"{s.shape[0]} scores but {y.shape[0]} labels")
    if not np.isin(y, (0, 1)).all():
        raise RejectedInputError("labels must be binary")
    return s, y.astype(bool)


def auc_roc(scores, labels):
    """P(random positive outscores random negative), ties counting 1/2."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUCROC needs both classes")
    ranks = rankdata(s)  # average ranks resolve ties as half-wins
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pr(scores, labels):
    """Average precision: mean over positives of precision at their rank.

    Ranking is by descending score; within a tie negatives come first, so
    ties never flatter the score.
    """
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUCPR needs at least one positive")
    order = np.lexsort((y, -s))
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1.0
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def ppv_npv_at_quantile(scores, labels, q=0.95):
    """PPV and NPV when flagging scores at or above the nearest-rank q-quantile.

    Returns ``(ppv, npv, threshold)``; a ratio with a zero denominator is
    reported as None.
    """
    s, y = _scores_labels(scores, labels)
    n = s.shape[0]
    if n == 0:
        raise UndefinedMetricError("no scores")
    if y.all() or not y.any():
        raise UndefinedMetricError("PPV/NPV need both classes")
    if not 0.0 < q <= 1.0:
        raise RejectedInputError("q must be in (0, 1]")
    k = min(max(math.ceil(q * n - 1e-9), 1), n)
    threshold = float(np.sort(s)[k - 1])
    flagged = s >= threshold
    tp = int((flagged & y).sum())
    fp = int((flagged & ~y).sum())
    tn = int((~flagged & ~y).sum())
    fn = int((~flagged & y).sum())
    ppv = tp / (tp + fp) if tp + fp else None
    npv = tn / (tn + fn) if tn + fn else None
    return ppv, npv, threshold


@dataclass(frozen=True)
class TestSet:
    """Fully paired held-out people with their true outcomes."""

    person_ids: tuple
    x: dict  # data type -> (n, vocab) uint8
    labels: np.ndarray  # (n, n_diseases)

    def __len__(self):
        return len(self.person_ids)


def build_test_set(cohort, split):
    people = [r for r in cohort if r.person_id in split.test_ids and r.fully_paired]
    if not people:
        raise RejectedInputError("test split holds no fully paired person")
    cfg = cohort.config
    x = {t: stack_dense([r.vector(t) for r in people], cfg.vocab(t)) for t in DATA_TYPES}
    labels = np.array([r.labels for r in people], dtype=np.uint8)
    return TestSet(tuple(r.person_id for r in people), x, labels)


@dataclass(frozen=True)
class MetricsReport:
    disease: str
    method: str
    aucroc: float
    aucpr: float
    ppv: Optional[float]
    npv: Optional[float]
    threshold: float
    n_test: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def evaluate(model, test, disease, method="", disease_name=None):
    """Score ``test`` with ``model`` in eval mode and compute all four metrics."""
    scores = np.asarray(model.predict_scores(test.x)).ravel()
    y = test.labels[:, disease]
    ppv, npv, thr = ppv_npv_at_quantile(scores, y)
    return MetricsReport(disease_name or str(disease), method, auc_roc(scores, y),
                         auc_pr(scores, y), ppv, npv, thr, int(y.shape[0]))


def _fmt(v):
    return "   n/a" if v is None else f"{v:6.3f}"


def _title(method):
    base, _, detail = method.partition(":")
    title = METHOD_TITLES.get(base, base)
    return f"{title} ({detail})" if detail else title


def _method_key(method):
    base = method.partition(":")[0]
    rank = METHOD_ORDER.index(base) if base in METHOD_ORDER else len(METHOD_ORDER)
    return (rank, method)


def format_table(reports, diseases=None):
    """Text table laid out like the published comparison: one block per disease.

    Rows follow the centralized, central-only, single-type, confederated
    order; a method suffix such as ``:med`` is shown in parentheses.
    """
    reports = list(reports)
    if diseases is None:
        diseases = list(dict.fromkeys(r.disease for r in reports))
    titles = [_title(r.method) for r in reports] + list(METHOD_TITLES.values())
    width = max(len(t) for t in titles)
    lines = [f"{'':{width}}  AUCROC  AUCPR    PPV    NPV"]
    for disease in diseases:
        lines.append(disease)
        rows = {r.method: r for r in reports if r.disease == disease}
        for method in sorted(rows, key=_method_key):
            r = rows[method]
            lines.append(f"{_title(method):{width}}  {_fmt(r.aucroc)} {_fmt(r.aucpr)} "
                         f"{_fmt(r.ppv)} {_fmt(r.npv)}")
    return "\n".join(lines) + "\n"
