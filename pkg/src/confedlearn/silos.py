"""Silo topology: one central analyzer plus single-type silos per region.

Three separations are enforced structurally:

* by data type: a silo stores vectors of exactly one type;
* by individual: each non-central region's people go to that region's silos;
* by identity: a person's three type-views get independent random local ids,
  each silo is shuffled independently, and no join table is kept.

The only thing allowed to leave a silo is a :class:`ParamMessage`.
"""

import enum
import json
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np

from .cohort import DATA_TYPES, stack_dense
from .exceptions import AuditFailure, ParseError, RejectedInputError
from .nn import Batch, parse_param_file


class SiloKind(str, enum.Enum):
    CLINIC = "clinic"
    PHARMACY = "pharmacy"
    LAB = "lab"

    @property
    def data_type(self):
        return _KIND_TYPE[self]

    @classmethod
    def for_type(cls, data_type):
        return _TYPE_KIND[data_type]


_KIND_TYPE = {SiloKind.CLINIC: "diag", SiloKind.PHARMACY: "med", SiloKind.LAB: "lab"}
_TYPE_KIND = {v: k for k, v in _KIND_TYPE.items()}
_KIND_CODE = {None: 0, SiloKind.CLINIC: 1, SiloKind.PHARMACY: 2, SiloKind.LAB: 3}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}
CENTRAL = -1


class SiloRecord(NamedTuple):
    local_id: str
    x: object  # CodeVector
    true_labels: Optional[tuple]


@dataclass(frozen=True, eq=False)
class Silo:
    silo_id: int
    kind: SiloKind
    region: int
    records: tuple
    vocab_size: int

    def __len__(self):
        return len(self.records)

    @property
    def n(self):
        return len(self.records)

    @property
    def data_type(self):
        return self.kind.data_type

    @cached_property
    def local_ids(self):
        return tuple(r.local_id for r in self.records)

    @cached_property
    def dense(self):
        """Records as a read-only (n, vocab) uint8 matrix."""
        m = stack_dense([r.x for r in self.records], self.vocab_size)
        m.setflags(write=False)
        return m

    @cached_property
    def true_labels(self):
        if self.kind is not SiloKind.CLINIC or not self.records:
            return None
        y = np.array([r.true_labels for r in self.records], dtype=np.uint8)
        y.setflags(write=False)
        return y


@dataclass(frozen=True, eq=False)
class CentralData:
    """The central analyzer's fully connected, ID-matched records."""

    region: int
    records: tuple

    def __len__(self):
        return len(self.records)

    @property
    def person_ids(self):
        return tuple(r.person_id for r in self.records)


@dataclass(frozen=True, eq=False)
class SiloNetwork:
    central: CentralData
    silos: tuple
    vocab_sizes: dict
    disease_names: tuple
    n_regions: int

    @property
    def S(self):
        return len(self.silos)

    @property
    def N(self):
        """Record count summed over all silos (the aggregation denominator)."""
        return sum(s.n for s in self.silos)

    def silos_of(self, kind):
        kind = SiloKind(kind)
        return tuple(s for s in self.silos if s.kind is kind)

    def with_silos(self, silos):
        return SiloNetwork(self.central, tuple(silos), self.vocab_sizes, self.disease_names,
                           self.n_regions)


def _fresh_ids(rng, count, taken):
    out = []
    while len(out) < count:
        token = rng.bytes(8).hex()
        if token not in taken:
            taken.add(token)
            out.append(token)
    return out


def partition(cohort, central_region, seed, n_regions=None):
    """Split ``cohort`` into the central analyzer and 3 silos per other region.

    Regions with nobody in them still get (empty) silos.
    """
    records = list(cohort)
    config = getattr(cohort, "config", None)
    if n_regions is None:
        if config is None:
            raise RejectedInputError("n_regions is required for a plain record list")
        n_regions = config.n_regions
    if not 0 <= central_region < n_regions:
        raise RejectedInputError(f"central region {central_region} not in [0, {n_regions})")
    if config is not None:
        vocab = dict(zip(DATA_TYPES, config.vocab_sizes))
        names = tuple(d.name for d in config.diseases)
    else:
        vocab = {}
        for r in records:
            for t in r.present:
                vocab.setdefault(t, r.vector(t).vocab_size)
        names = tuple(f"disease_{d}" for d in range(len(records[0].labels))) if records else ()

    rng = np.random.default_rng(seed)
    central = CentralData(central_region,
                          tuple(r for r in records if r.region == central_region))
    by_region = {}
    for r in records:
        if r.region != central_region:
            by_region.setdefault(r.region, []).append(r)

    taken = set()
    silos = []
    for region in range(n_regions):
        if region == central_region:
            continue
        people = by_region.get(region, [])
        for kind in SiloKind:
            t = kind.data_type
            holders = [r for r in people if r.vector(t) is not None]
            ids = _fresh_ids(rng, len(holders), taken)
            order = rng.permutation(len(holders))
            rows = tuple(
                SiloRecord(ids[j], holders[i].vector(t),
                           holders[i].labels if kind is SiloKind.CLINIC else None)
                for j, i in enumerate(order))
            silos.append(Silo(len(silos), kind, region, rows, vocab.get(t, 0)))
    return SiloNetwork(central, tuple(silos), vocab, names, n_regions)


def silo_batches(silo, view, batch_size, seed, disease=None, rows=None, types=DATA_TYPES):
    """Shuffled mini-batches of a silo's imputed view.

    ``view`` must be aligned with ``silo`` record by record (same local ids
    in the same order). ``rows`` restricts batching to a subset of record
    positions; ``disease`` selects one label column and ``types`` the input
    blocks.
    """
    if tuple(view.local_ids) != silo.local_ids:
        raise RejectedInputError(f"view is not aligned with silo {silo.silo_id}")
    if batch_size < 1:
        raise RejectedInputError("batch_size must be >= 1")
    idx = np.arange(silo.n) if rows is None else np.asarray(rows, dtype=int)
    idx = idx[np.random.default_rng(seed).permutation(idx.shape[0])]
    labels = view.labels if disease is None else view.labels[:, [disease]]
    for start in range(0, idx.shape[0], batch_size):
        take = idx[start:start + batch_size]
        yield Batch(view.inputs(take, types), labels[take].astype(np.float64))


# ---------------------------------------------------------------------------
# messages

_MSG_HEADER = struct.Struct("<4sIiB3x")
MSG_MAGIC = b"CFPM"


@dataclass(frozen=True)
class ParamMessage:
    """Serialized model parameters sent between a silo and the central analyzer."""

    round: int
    payload: bytes
    sender: int = CENTRAL
    kind: Optional[SiloKind] = None

    def to_bytes(self):
        return _MSG_HEADER.pack(MSG_MAGIC, self.round, self.sender,
                                _KIND_CODE[self.kind]) + self.payload

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _MSG_HEADER.size:
            raise ParseError("message shorter than its 16-byte header")
        magic, rnd, sender, code = _MSG_HEADER.unpack_from(data)
        if magic != MSG_MAGIC:
            raise ParseError("bad message magic")
        if code not in _CODE_KIND:
            raise ParseError(f"unknown kind code {code}")
        return cls(rnd, bytes(data[_MSG_HEADER.size:]), sender, _CODE_KIND[code])


class Violation(NamedTuple):
    silo: object
    rule: str
    detail: str


def check_message(msg, forbidden=()):
    """Rule (b) for one message; returns a list of violations."""
    out = []
    try:
        _, tag = parse_param_file(msg.payload)
    except ParseError as exc:
        return [Violation(msg.sender, "b", f"payload is not a parameter file: {exc}")]
    leaked = [tok for tok in forbidden if tok and tok in tag]
    if leaked:
        out.append(Violation(msg.sender, "b", f"tag embeds identifiers {leaked[:3]}"))
    return out


@dataclass
class MessageLog:
    """Checks every message as it is posted and keeps a compact summary."""

    n_messages: int = 0
    n_bytes: int = 0
    violations: list = field(default_factory=list)

    def post(self, msg):
        self.n_messages += 1
        self.n_bytes += len(msg.payload)
        self.violations.extend(check_message(msg))
        return msg


@dataclass
class AuditReport:
    violations: list
    n_silos: int
    n_messages: int

    @property
    def passed(self):
        return not self.violations

    def to_text(self):
        head = (f"isolation audit: {'PASS' if self.passed else 'FAIL'} "
                f"({self.n_silos} silos, {self.n_messages} messages checked)")
        lines = [head]
        for v in self.violations:
            lines.append(f"  silo {v.silo}: rule ({v.rule}) {v.detail}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self):
        rows = [{"silo": v.silo, "rule": v.rule, "detail": v.detail} for v in self.violations]
        rows.append({"summary": True, "passed": self.passed, "n_silos": self.n_silos,
                     "n_messages": self.n_messages})
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)

    def raise_if_failed(self):
        if self.violations:
            v = self.violations[0]
            raise AuditFailure(v.silo, v.rule, v.detail)


def isolation_audit(network, messages=(), person_ids=None):
    """Check the three isolation rules.

    (a) every silo record carries exactly the silo's data type;
    (b) every message is a bare parameter file;
    (c) local ids are silo-scoped and no object holds a cross-silo id mapping.
    """
    violations = []
    for silo in network.silos:
        t = silo.data_type
        for rec in silo.records:
            x = rec.x
            if (x.data_type not in (None, t) or x.vocab_size != network.vocab_sizes.get(t)
                    or x.vocab_size != silo.vocab_size):
                violations.append(Violation(
                    silo.silo_id, "a",
                    f"{silo.kind.value} silo holds a {x.data_type or 'foreign'} vector "
                    f"of width {x.vocab_size}"))
                break
        if silo.kind is not SiloKind.CLINIC and any(r.true_labels is not None
                                                    for r in silo.records):
            violations.append(Violation(silo.silo_id, "a",
                                        "non-clinic silo stores outcome labels"))

    n_messages = 0
    if isinstance(messages, MessageLog):
        n_messages = messages.n_messages
        violations.extend(messages.violations)
    else:
        for msg in messages:
            n_messages += 1
            violations.extend(check_message(msg))

    seen = {}
    for silo in network.silos:
        for lid in silo.local_ids:
            other = seen.setdefault(lid, silo.silo_id)
            if other != silo.silo_id:
                violations.append(Violation(silo.silo_id, "c",
                                            f"local id shared with silo {other}"))
                break
    globals_ = set(person_ids or ()) | set(network.central.person_ids)
    for silo in network.silos:
        if globals_.intersection(silo.local_ids):
            violations.append(Violation(silo.silo_id, "c", "local id equals a person id"))
    for owner in (network, network.central, *network.silos):
        for name, value in vars(owner).items():
            if isinstance(value, Mapping) and any(k in seen for k in list(value)[:1000]):
                violations.append(Violation(getattr(owner, "silo_id", "network"), "c",
                                            f"attribute {name!r} maps local ids"))
    return AuditReport(violations, network.S, n_messages)
