"""Config-driven experiments: the four-method comparison and the central sweep.

A config is a nested YAML document whose sections mirror the dataclasses
below. Unknown keys and wrongly typed values raise :class:`ConfigError`
naming the offending field path. Every run is a function of the resolved
config alone; ``seed`` fans out into independent streams for the cohort,
the splits, the partition, step 1, step 2 and task training.
"""

import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml
from scipy.stats import spearmanr

from . import __version__
from .cgan import CganHyperparams
from .cohort import (
    DATA_TYPES,
    STATE_SIZES,
    CohortConfig,
    cohort_stats,
    default_diseases,
    export_cohort,
    generate_cohort,
)
from .exceptions import ConfigError, RejectedInputError
from .imputation import LABEL_MODES, ClassifierHyperparams, train_step_one
from .metrics import METHOD_ORDER, SplitPlan, build_test_set, evaluate, format_table, make_splits
from .silos import MessageLog, isolation_audit, partition
from .training import (
    AGGREGATE_MODES,
    TrainConfig,
    build_views,
    history_to_jsonl,
    run_central_only,
    run_centralized,
    run_confederated,
    run_single_type_federated,
)

DESK_REGION_WEIGHTS = (0.265, 0.18, 0.14, 0.11, 0.09, 0.08, 0.06, 0.05, 0.025)
PRESETS = ("desk", "paper-scale")
SINGLE_TYPE = "federated_single_type"


@dataclass(frozen=True)
class CohortSection:
    n_people: int = 10000
    vocab_sizes: tuple = (500, 300, 200)
    mean_codes: tuple = (13.6, 6.9, 7.4)
    n_regions: int = 9
    region_weights: Optional[tuple] = DESK_REGION_WEIGHTS
    unpaired_fraction: float = 0.2
    latent_dim: int = 8
    signal_loading: float = 1.5
    loading_scale: float = 0.6
    signal_weight: float = 0.8
    noise_level: float = 0.4
    n_signal: tuple = (12, 8, 6)

    def cohort_config(self, seed):
        diseases = tuple(
            dataclasses.replace(d, signal_weight=self.signal_weight,
                                noise_level=self.noise_level)
            for d in default_diseases(self.vocab_sizes, self.n_signal))
        return CohortConfig(self.n_people, self.vocab_sizes, self.mean_codes, self.n_regions,
                            self.region_weights, diseases, self.unpaired_fraction,
                            self.latent_dim, self.signal_loading, self.loading_scale, seed)


@dataclass(frozen=True)
class TopologySection:
    central_region: int = 5
    label_mode: str = "clinic-true"


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = (32,)
    batch_norm: bool = False
    dropout: float = 0.0


@dataclass(frozen=True)
class ModelsSection:
    generator: ModelSpec = ModelSpec((128,), True, 0.0)
    discriminator: ModelSpec = ModelSpec((64,), True, 0.0)
    classifier: ModelSpec = ModelSpec((32,), False, 0.0)
    task: ModelSpec = ModelSpec((32,), False, 0.0)


@dataclass(frozen=True)
class CganSection:
    noise_dim: int = 100
    lambda_match: float = 10.0
    match_loss: str = "l1"
    generator_lr: float = 0.5
    discriminator_lr: float = 0.05
    batch_size: int = 64
    epochs: int = 30
    validation_fraction: float = 0.2
    binarize: str = "threshold"
    n_draws: int = 1


@dataclass(frozen=True)
class ClassifierSection:
    learning_rate: float = 0.1
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 3
    validation_fraction: float = 0.2


@dataclass(frozen=True)
class TrainingSection:
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 1.0
    patience: int = 3
    max_rounds: int = 200
    aggregate: str = "weighted"


@dataclass(frozen=True)
class EvaluationSection:
    test_fraction: float = 0.2
    central_validation_fraction: float = 0.2
    silo_validation_fraction: float = 0.2
    final_fit: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    cohort: CohortSection = CohortSection()
    topology: TopologySection = TopologySection()
    models: ModelsSection = ModelsSection()
    cgan: CganSection = CganSection()
    classifier: ClassifierSection = ClassifierSection()
    training: TrainingSection = TrainingSection()
    evaluation: EvaluationSection = EvaluationSection()
    methods: tuple = METHOD_ORDER
    single_types: tuple = ("diag",)
    sweep: Optional[tuple] = None
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("methods", "at least one method is required")
        unknown = [m for m in self.methods if m not in METHOD_ORDER]
        if unknown:
            raise ConfigError("methods", f"unknown methods {unknown}; choose from {METHOD_ORDER}")
        bad = [t for t in self.single_types if t not in DATA_TYPES]
        if bad or not self.single_types:
            raise ConfigError("single_types", f"must be data types from {DATA_TYPES}")
        n = self.cohort.n_regions
        if not 0 <= self.topology.central_region < n:
            raise ConfigError("topology.central_region",
                              f"region {self.topology.central_region} not in [0, {n})")
        if self.topology.label_mode not in LABEL_MODES:
            raise ConfigError("topology.label_mode", f"must be one of {LABEL_MODES}")
        if self.training.aggregate not in AGGREGATE_MODES:
            raise ConfigError("training.aggregate", f"must be one of {AGGREGATE_MODES}")
        if self.cgan.binarize not in ("threshold", "bernoulli"):
            raise ConfigError("cgan.binarize", "must be threshold or bernoulli")
        if self.cgan.match_loss not in ("l1", "bce"):
            raise ConfigError("cgan.match_loss", "must be l1 or bce")
        if self.sweep is not None:
            if not self.sweep:
                raise ConfigError("sweep", "sweep list must be nonempty when given")
            if any(isinstance(r, bool) or not isinstance(r, int) for r in self.sweep):
                raise ConfigError("sweep", "regions must be integers")

    # -- derived component settings ------------------------------------

    def cohort_config(self):
        return self.cohort.cohort_config(self.seed)

    def split_plan(self):
        e = self.evaluation
        return SplitPlan(e.test_fraction, e.central_validation_fraction,
                         e.silo_validation_fraction, self.seed, e.final_fit)

    def cgan_hyperparams(self):
        c, g, d = self.cgan, self.models.generator, self.models.discriminator
        if g.batch_norm != d.batch_norm or g.dropout != d.dropout:
            raise ConfigError("models.discriminator",
                              "generator and discriminator share batch_norm and dropout")
        return CganHyperparams(
            generator_hidden=g.hidden, discriminator_hidden=d.hidden, noise_dim=c.noise_dim,
            lambda_match=c.lambda_match, match_loss=c.match_loss,
            generator_lr=c.generator_lr, discriminator_lr=c.discriminator_lr,
            batch_size=c.batch_size, epochs=c.epochs, batch_norm=g.batch_norm,
            dropout=g.dropout, validation_fraction=c.validation_fraction,
            binarize=c.binarize)

    def classifier_hyperparams(self):
        c, m = self.classifier, self.models.classifier
        return ClassifierHyperparams(m.hidden, c.learning_rate, c.batch_size, c.max_epochs,
                                     c.patience, c.validation_fraction, m.batch_norm,
                                     m.dropout)

    def train_config(self, seed):
        t, m = self.training, self.models.task
        return TrainConfig(t.local_epochs, t.batch_size, t.lr, t.patience, t.max_rounds,
                           seed, m.hidden, m.batch_norm, m.dropout, t.aggregate)

    def seeds(self):
        """Named component seeds derived from the top-level seed."""
        names = ("partition", "step_one", "step_two", "training")
        values = np.random.default_rng(self.seed).integers(2**31, size=len(names))
        out = {"seed": self.seed, "cohort": self.seed, "splits": self.seed}
        out.update({k: int(v) for k, v in zip(names, values)})
        return out

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# parsing

def _coerce(value, default, path):
    """Convert a YAML value to the type of ``default`` or raise with the path.

    A None default accepts None or a list of numbers.
    """
    if dataclasses.is_dataclass(default):
        return _build(type(default), value, path, default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if value is None:
        return None
    if isinstance(value, (str, int, float)) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list):
        raise ConfigError(path, f"expected a list, got {value!r}")
    proto = default[0] if default else 0.0
    out = []
    for i, v in enumerate(value):
        sub = f"{path}[{i}]"
        if default:
            out.append(_coerce(v, proto, sub))
        elif isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(sub, f"expected a number, got {v!r}")
        else:
            out.append(v)
    return tuple(out)


def _build(cls, data, path, base=None):
    base = base if base is not None else cls()
    if data is None:
        return base
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigError(sub, f"unknown key; expected one of {sorted(fields)}")
        values[key] = _coerce(value, getattr(base, key), sub)
    try:
        return dataclasses.replace(base, **values)
    except ConfigError:
        raise
    except (RejectedInputError, TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def preset(name="desk"):
    """Baseline config for a named scale."""
    if name == "desk":
        return ExperimentConfig()
    if name == "paper-scale":
        # 34 regions sized like the source study's states; the central region
        # is the one closest to the source study's 5,433-person analyzer
        central = int(np.argmin(np.abs(np.asarray(STATE_SIZES) - 5433)))
        return ExperimentConfig(
            cohort=CohortSection(n_people=82143, n_regions=len(STATE_SIZES),
                                 region_weights=None),
            topology=TopologySection(central_region=central))
    raise ConfigError("preset", f"unknown preset {name!r}; choose from {PRESETS}")


def config_from_dict(data, base=None):
    config = _build(ExperimentConfig, data, "", base or ExperimentConfig())
    # validate the cohort section by building it once
    try:
        config.cohort_config()
    except RejectedInputError as exc:
        raise ConfigError("cohort", str(exc)) from None
    return config


def load_config(path=None, preset_name="desk", seed=None, output_dir=None):
    """Preset, then the YAML file at ``path`` on top, then explicit overrides."""
    base = preset(preset_name)
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"{path} is not valid YAML: {exc}") from None
    config = config_from_dict(data, base)
    if seed is not None:
        config = dataclasses.replace(config, seed=int(seed))
    if output_dir is not None:
        config = dataclasses.replace(config, output_dir=str(output_dir))
    return config


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=None)


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class Prepared:
    cohort: object
    split: object
    network: object
    test: object


def prepare(config, cohort=None, central_region=None):
    """Cohort, global test split, partition of the non-test people, validation splits."""
    seeds = config.seeds()
    cohort = cohort if cohort is not None else generate_cohort(config.cohort_config())
    if len(cohort) == 0:
        raise RejectedInputError("cohort is empty; n_people must be positive")
    plan = config.split_plan()
    test_split = make_splits(cohort, plan)
    keep = [i for i, r in enumerate(cohort) if r.person_id not in test_split.test_ids]
    region = config.topology.central_region if central_region is None else central_region
    network = partition(cohort.subset(keep), region, seeds["partition"])
    split = make_splits(cohort, plan, network)
    return Prepared(cohort, split, network, build_test_set(cohort, split))


def single_type_name(data_type):
    return f"{SINGLE_TYPE}:{data_type}"


@dataclass
class RunResult:
    reports: list
    histories: dict  # (method, disease name) -> history rows
    audit: object
    timings: dict
    n_central: int
    message_log: MessageLog = field(default_factory=MessageLog)


def run_methods(config, prep, methods=None):
    """Train and evaluate every requested method for every disease."""
    methods = tuple(methods or config.methods)
    seeds = config.seeds()
    net, split, test = prep.network, prep.split, prep.test
    names = prep.cohort.disease_names
    train_cfg = config.train_config(seeds["training"])
    log = MessageLog()
    timings = {}
    views = None
    if {"confederated", SINGLE_TYPE} & set(methods):
        start = time.perf_counter()
        central = [r for r in net.central.records
                   if r.person_id not in split.central_validation_ids]
        step_one = train_step_one(central, len(names), config.cgan_hyperparams(),
                                  config.classifier_hyperparams(), seeds["step_one"],
                                  net.vocab_sizes)
        timings["step_one_s"] = time.perf_counter() - start
        start = time.perf_counter()
        views = build_views(net, step_one, config.topology.label_mode, seeds["step_two"],
                            config.cgan.n_draws)
        timings["step_two_s"] = time.perf_counter() - start

    reports, histories = [], {}
    for method in METHOD_ORDER:
        if method not in methods:
            continue
        start = time.perf_counter()
        for d, name in enumerate(names):
            runs = []
            try:
                if method == "centralized":
                    runs.append((method, run_centralized(prep.cohort, d, train_cfg, split)))
                elif method == "central_only":
                    runs.append((method, run_central_only(net, d, train_cfg, split)))
                elif method == SINGLE_TYPE:
                    for t in config.single_types:
                        runs.append((single_type_name(t), run_single_type_federated(
                            net, views, t, d, train_cfg, split, log)))
                else:
                    runs.append((method, run_confederated(net, views, d, train_cfg, split,
                                                          log)))
            except Exception as exc:
                raise type(exc)(f"{method}/{name}: {exc}") from exc
            for label, (model, history) in runs:
                reports.append(evaluate(model, test, d, label, name))
                histories[label, name] = history
        timings[f"{method}_s"] = time.perf_counter() - start
    audit = isolation_audit(net, log, [r.person_id for r in prep.cohort])
    return RunResult(reports, histories, audit, timings, len(net.central), log)


def run_experiment(config, cohort=None):
    prep = prepare(config, cohort)
    return run_methods(config, prep)


def mean_metrics(reports, method):
    rows = [r for r in reports if r.method == method]
    if not rows:
        raise KeyError(method)
    return (float(np.mean([r.aucroc for r in rows])), float(np.mean([r.aucpr for r in rows])))


SWEEP_COLUMNS = ("region", "n_central", "confed_mean_aucroc", "confed_mean_aucpr",
                 "central_only_mean_aucroc", "central_only_mean_aucpr")


def run_sweep(config, cohort=None):
    """Confederated vs central-only for each candidate central region.

    Returns ``(rows, skipped, audits)``; regions that do not exist or hold
    nobody are skipped with a warning.
    """
    if not config.sweep:
        raise ConfigError("sweep", "no regions to sweep")
    cohort = cohort if cohort is not None else generate_cohort(config.cohort_config())
    rows, skipped, audits = [], [], []
    for region in config.sweep:
        reason = None
        if not 0 <= region < config.cohort.n_regions:
            reason = f"region {region} does not exist"
        elif not any(r.region == region for r in cohort):
            reason = f"region {region} holds nobody"
        if reason is None:
            try:
                prep = prepare(config, cohort, central_region=region)
                result = run_methods(config, prep, ("central_only", "confederated"))
            except RejectedInputError as exc:
                reason = f"region {region}: {exc}"
        if reason is not None:
            warnings.warn(f"sweep skips {reason}", RuntimeWarning, stacklevel=2)
            skipped.append({"region": region, "reason": reason})
            continue
        cf = mean_metrics(result.reports, "confederated")
        co = mean_metrics(result.reports, "central_only")
        rows.append({"region": region, "n_central": result.n_central,
                     "confed_mean_aucroc": cf[0], "confed_mean_aucpr": cf[1],
                     "central_only_mean_aucroc": co[0], "central_only_mean_aucpr": co[1]})
        audits.append(result.audit)
    return rows, skipped, audits


def sweep_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def sweep_table(rows):
    lines = [f"{'region':>6} {'n_central':>9} {'confed AUCROC':>13} {'confed AUCPR':>12} "
             f"{'central AUCROC':>14} {'central AUCPR':>13}"]
    for r in rows:
        lines.append(f"{r['region']:>6} {r['n_central']:>9} {r['confed_mean_aucroc']:>13.3f} "
                     f"{r['confed_mean_aucpr']:>12.3f} {r['central_only_mean_aucroc']:>14.3f} "
                     f"{r['central_only_mean_aucpr']:>13.3f}")
    if len(rows) >= 2:
        rho = spearmanr([r["n_central"] for r in rows],
                        [r["confed_mean_aucroc"] for r in rows])[0]
        lines.append(f"Spearman(n_central, confed mean AUCROC) = {rho:.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# output files

def write_atomic(path, data):
    """Write via a temp file in the same directory, then rename into place."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def versions():
    import scipy
    import sklearn
    return {"confedlearn": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__}


def write_manifest(out_dir, config, files, timings, extra=None):
    """Manifest listing every output file with its sha256."""
    manifest = {"config_hash": config.config_hash(), "seeds": config.seeds(),
                "versions": versions(), "timings": {k: round(v, 3) for k, v in timings.items()},
                "files": {name: _sha256(os.path.join(out_dir, name)) for name in sorted(files)}}
    manifest.update(extra or {})
    write_atomic(os.path.join(out_dir, "manifest.json"),
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def report_name(method, disease):
    return f"{method.replace(':', '-')}__{disease}"


def write_run(out_dir, config, result):
    """All cmd_run outputs; returns the manifest."""
    files = []

    def put(name, data):
        write_atomic(os.path.join(out_dir, name), data)
        files.append(name)

    put("config.yaml", dump_config(config))
    for r in result.reports:
        put(f"reports/{report_name(r.method, r.disease)}.json", r.to_json() + "\n")
    for (method, disease), history in sorted(result.histories.items()):
        put(f"histories/{report_name(method, disease)}.jsonl", history_to_jsonl(history))
    put("summary.txt", format_table(result.reports))
    put("audit.txt", result.audit.to_text())
    put("audit.jsonl", result.audit.to_jsonl())
    return write_manifest(out_dir, config, files, result.timings,
                          {"kind": "run", "n_central": result.n_central,
                           "audit_passed": result.audit.passed,
                           "messages": result.message_log.n_messages})


__all__ = [
    "ExperimentConfig", "CohortSection", "TopologySection", "ModelSpec", "ModelsSection",
    "CganSection", "ClassifierSection", "TrainingSection", "EvaluationSection", "preset",
    "config_from_dict", "load_config", "dump_config", "prepare", "run_methods",
    "run_experiment", "run_sweep", "sweep_csv", "sweep_table", "mean_metrics", "write_atomic",
    "write_manifest", "write_run", "RunResult", "Prepared", "SWEEP_COLUMNS", "PRESETS",
    "single_type_name", "cohort_stats", "export_cohort",
]
