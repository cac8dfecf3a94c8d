import json
from collections import Counter

import numpy as np
import pytest

from confedlearn.cohort import DATA_TYPES, CodeVector, CohortConfig, generate_cohort
from confedlearn.exceptions import AuditFailure, ParseError, RejectedInputError
from confedlearn.imputation import IMPUTED, OBSERVED, INFERRED, ImputedView
from confedlearn.nn import init_params, mlp_arch, serialize_params
from confedlearn.silos import (
    CENTRAL,
    MessageLog,
    ParamMessage,
    Silo,
    SiloKind,
    SiloRecord,
    isolation_audit,
    partition,
    silo_batches,
)
import confedlearn.silos as silos_module


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(CohortConfig(n_people=1500, n_regions=6, seed=2))


@pytest.fixture(scope="module")
def paired_cohort():
    return generate_cohort(CohortConfig(n_people=800, n_regions=5, unpaired_fraction=0.0,
                                        seed=4))


def _view(silo, n_diseases=1, seed=0):
    """A minimal aligned view: observed own type, random imputed others."""
    rng = np.random.default_rng(seed)
    widths = {"diag": 7, "med": 5, "lab": 3}
    widths[silo.data_type] = silo.vocab_size
    x = {t: (np.array(silo.dense) if t == silo.data_type
             else (rng.random((silo.n, widths[t])) < 0.3).astype(np.uint8)) for t in DATA_TYPES}
    tags = {t: OBSERVED if t == silo.data_type else IMPUTED for t in DATA_TYPES}
    labels = (rng.random((silo.n, n_diseases)) < 0.5).astype(np.uint8)
    return ImputedView(silo.silo_id, silo.local_ids, x, tags, labels,
                       (INFERRED,) * n_diseases)


def _message(sender=0, tag=""):
    params = init_params(mlp_arch(3, (2,), 1), 0)
    return ParamMessage(1, serialize_params(params, tag), sender, SiloKind.CLINIC)


class TestPartition:
    def test_full_scale_silo_count(self):
        cohort = generate_cohort(CohortConfig(n_people=3000, n_regions=34, seed=0))
        network = partition(cohort, central_region=7, seed=0)
        assert network.S == 99

    def test_two_regions(self):
        cohort = generate_cohort(CohortConfig(n_people=100, n_regions=2, seed=0))
        network = partition(cohort, central_region=0, seed=0)
        assert network.S == 3
        assert {s.kind for s in network.silos} == set(SiloKind)

    def test_conservation(self, paired_cohort):
        network = partition(paired_cohort, central_region=2, seed=1)
        clinic_total = sum(s.n for s in network.silos_of(SiloKind.CLINIC))
        assert clinic_total + len(network.central) == len(paired_cohort)
        for kind in SiloKind:
            assert sum(s.n for s in network.silos_of(kind)) == clinic_total

    def test_central_people_excluded_and_complete(self, cohort):
        network = partition(cohort, central_region=1, seed=0)
        expected = [r.person_id for r in cohort if r.region == 1]
        assert list(network.central.person_ids) == expected
        assert all(s.region != 1 for s in network.silos)

    def test_silo_contents_recount(self, cohort):
        """Each silo holds exactly the region's vectors of its type."""
        network = partition(cohort, central_region=0, seed=3)
        for silo in network.silos:
            t = silo.data_type
            expected = Counter(r.vector(t).set_indices for r in cohort
                               if r.region == silo.region and r.vector(t) is not None)
            assert Counter(rec.x.set_indices for rec in silo.records) == expected
            if silo.kind is SiloKind.CLINIC:
                assert all(rec.true_labels is not None for rec in silo.records)
            else:
                assert all(rec.true_labels is None for rec in silo.records)

    def test_type_purity(self, cohort):
        network = partition(cohort, central_region=0, seed=0)
        for silo in network.silos:
            assert all(rec.x.vocab_size == network.vocab_sizes[silo.data_type]
                       for rec in silo.records)

    def test_local_ids_disjoint_and_opaque(self, cohort):
        network = partition(cohort, central_region=0, seed=0)
        ids = [lid for s in network.silos for lid in s.local_ids]
        assert len(ids) == len(set(ids))
        assert not set(ids) & {r.person_id for r in cohort}

    def test_deterministic(self, cohort):
        a = partition(cohort, central_region=3, seed=5)
        b = partition(cohort, central_region=3, seed=5)
        c = partition(cohort, central_region=3, seed=6)
        assert [s.records for s in a.silos] == [s.records for s in b.silos]
        assert [s.local_ids for s in a.silos] != [s.local_ids for s in c.silos]

    def test_empty_region_gives_empty_silos(self):
        weights = (0.5, 0.0, 0.5)
        cohort = generate_cohort(CohortConfig(n_people=60, n_regions=3,
                                              region_weights=weights, seed=0))
        network = partition(cohort, central_region=0, seed=0)
        empty = [s for s in network.silos if s.region == 1]
        assert len(empty) == 3 and all(s.n == 0 for s in empty)

    def test_bad_central_region(self, cohort):
        with pytest.raises(RejectedInputError):
            partition(cohort, central_region=6, seed=0)

    def test_no_linkage_api(self):
        public = [name for name in dir(silos_module) if not name.startswith("_")]
        for name in public:
            assert not any(word in name.lower() for word in ("link", "join", "match_ids"))


@pytest.fixture(scope="module")
def silo(cohort):
    network = partition(cohort, central_region=0, seed=0)
    return max(network.silos_of(SiloKind.PHARMACY), key=lambda s: s.n)


class TestBatches:
    def test_single_batch(self, silo):
        batches = list(silo_batches(silo, _view(silo), silo.n + 5, seed=0))
        assert len(batches) == 1 and len(batches[0]) == silo.n

    def test_same_seed_same_sequence(self, silo):
        view = _view(silo)
        a = list(silo_batches(silo, view, 32, seed=7))
        b = list(silo_batches(silo, view, 32, seed=7))
        for x, y in zip(a, b, strict=True):
            np.testing.assert_array_equal(x.inputs, y.inputs)
            np.testing.assert_array_equal(x.targets, y.targets)

    def test_rows_covered_exactly_once(self, silo):
        view = _view(silo)
        full = view.inputs()
        seen = Counter()
        for batch in silo_batches(silo, view, 17, seed=1):
            for row in batch.inputs:
                seen[row.tobytes()] += 1
        assert seen == Counter(row.tobytes() for row in full)

    def test_disease_column(self, silo):
        view = _view(silo, n_diseases=3)
        batch = next(silo_batches(silo, view, silo.n, seed=0, disease=2))
        assert batch.targets.shape == (silo.n, 1)
        assert sorted(batch.targets[:, 0]) == sorted(view.labels[:, 2])

    def test_misaligned_view(self, silo):
        view = _view(silo)
        other = ImputedView(silo.silo_id, tuple(reversed(silo.local_ids)), dict(view.x),
                            dict(view.tags), np.array(view.labels), view.label_tags)
        with pytest.raises(RejectedInputError):
            next(silo_batches(silo, other, 8, seed=0))


class TestMessages:
    def test_round_trip(self):
        msg = _message(sender=4)
        assert ParamMessage.from_bytes(msg.to_bytes()) == msg
        assert len(msg.to_bytes()) == len(msg.payload) + 16

    def test_central_sender(self):
        msg = ParamMessage(3, _message().payload)
        back = ParamMessage.from_bytes(msg.to_bytes())
        assert back.sender == CENTRAL and back.kind is None

    def test_bad_bytes(self):
        with pytest.raises(ParseError):
            ParamMessage.from_bytes(b"short")
        with pytest.raises(ParseError):
            ParamMessage.from_bytes(b"XXXX" + _message().to_bytes()[4:])


class TestAudit:
    def test_fresh_network_passes(self, cohort):
        network = partition(cohort, central_region=0, seed=0)
        report = isolation_audit(network, [_message(s.silo_id) for s in network.silos[:5]])
        assert report.passed
        report.raise_if_failed()
        assert "PASS" in report.to_text()

    def test_foreign_vector_fails_rule_a(self, cohort):
        network = partition(cohort, central_region=0, seed=0)
        pharmacy = network.silos_of(SiloKind.PHARMACY)[0]
        bad_record = SiloRecord("deadbeef00000000", CodeVector(500, (1, 2), "diag"), None)
        bad = Silo(pharmacy.silo_id, pharmacy.kind, pharmacy.region,
                   pharmacy.records + (bad_record,), pharmacy.vocab_size)
        silos = [bad if s.silo_id == bad.silo_id else s for s in network.silos]
        report = isolation_audit(network.with_silos(silos))
        assert not report.passed
        assert report.violations[0].rule == "a"
        assert report.violations[0].silo == pharmacy.silo_id
        with pytest.raises(AuditFailure):
            report.raise_if_failed()

    def test_unparseable_payload_fails_rule_b(self, cohort):
        network = partition(cohort, central_region=0, seed=0)
        bad = ParamMessage(1, b"raw records here", 3, SiloKind.LAB)
        report = isolation_audit(network, [bad])
        assert [v.rule for v in report.violations] == ["b"]

    def test_message_log_checks_on_post(self, cohort):
        network = partition(cohort, central_region=0, seed=0)
        log = MessageLog()
        log.post(_message(1))
        log.post(ParamMessage(1, b"nope", 2))
        report = isolation_audit(network, log)
        assert report.n_messages == 2
        assert [v.rule for v in report.violations] == ["b"]

    def test_shared_local_id_fails_rule_c(self, cohort):
        network = partition(cohort, central_region=0, seed=0)
        a, b = network.silos[0], network.silos[1]
        stolen = SiloRecord(a.local_ids[0], b.records[0].x, b.records[0].true_labels)
        b2 = Silo(b.silo_id, b.kind, b.region, (stolen,) + b.records[1:], b.vocab_size)
        silos = [b2 if s.silo_id == b.silo_id else s for s in network.silos]
        rules = {v.rule for v in isolation_audit(network.with_silos(silos)).violations}
        assert rules == {"c"}

    def test_jsonl(self, cohort):
        network = partition(cohort, central_region=0, seed=0)
        rows = [json.loads(line)
                for line in isolation_audit(network, [ParamMessage(1, b"x", 2)]).to_jsonl()
                .splitlines()]
        assert rows[0]["rule"] == "b"
        assert rows[-1]["summary"] and not rows[-1]["passed"]
