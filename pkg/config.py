"""
Configuration settings for metaopf experiments.
"""

import functools
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import jsonschema


METHODS = ("mtl", "scratch", "pretrain1", "pretrain2")
SWEEP_AXES = ("samples", "tasks", "gamma")
CONFIG_SCHEMA = Path(__file__).resolve().parent / "schemas" / "experiment.schema.json"


class ConfigError(ValueError):
    """Raised when a configuration is invalid."""

    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("invalid configuration: " + "; ".join(problems))


@functools.lru_cache(maxsize=None)
def _config_validator() -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(json.loads(CONFIG_SCHEMA.read_text(encoding="utf-8")))


def schema_problems(doc: Dict[str, Any]) -> List[str]:
    """Violations of the experiment schema, one line per offending key."""
    errors = sorted(_config_validator().iter_errors(doc), key=lambda e: str(list(e.absolute_path)))
    return [f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]


def _env_flag(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


@dataclass
class ExperimentConfig:
    """Experiment configuration settings."""

    # Case and storage
    case_path: str = "cases/case14.m"
    corpus_dir: str = "corpus"
    run_dir: str = "runs"

    # Corpus
    m_total: int = 20
    m_offline: int = 14
    k_per_topology: int = 300
    test_samples: int = 100  # held-out samples per online topology
    max_removed_lines: int = 2
    impedance_range: float = 0.3
    load_fraction: float = 0.7
    calibration_lambda: float = 0.005
    seed: int = 7

    # Predictor
    hidden_dims: Optional[Tuple[int, ...]] = None  # None -> per-case table widths

    # Offline training (pretrain1 / pretrain2 / outer MTL step)
    offline_lr: float = 0.001
    offline_epochs: int = 1000
    offline_weight_decay: float = 0.001

    # Meta-training
    meta_beta: float = 0.1
    meta_epochs: int = 1000
    task_batch_size: int = 10
    inner_steps: int = 1
    inner_sample_count: int = 50
    meta_order: str = "first_order"

    # Online adaptation
    methods: Tuple[str, ...] = METHODS
    gamma: float = 0.1
    online_weight_decay: float = 0.001
    adapt_epochs: int = 100
    adapt_samples: int = 50
    report_epochs: Tuple[int, ...] = (0, 1, 10, 100)
    enforce_q_limits: bool = True
    record_wall_clock: bool = False

    # Sweeps
    sample_counts: Tuple[int, ...] = (1, 10, 20, 50, 100, 700)
    task_counts: Tuple[int, ...] = (5, 20, 45, 70)
    gamma_values: Tuple[float, ...] = (0.01, 0.05, 0.1, 0.5)

    # Runtime
    threads: int = 1
    progress: bool = True

    @property
    def case_name(self) -> str:
        return Path(self.case_path).stem

    @property
    def corpus_path(self) -> Path:
        return Path(self.corpus_dir) / self.case_name

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir) / self.case_name

    def validate(self, require_case: bool = True) -> "ExperimentConfig":
        problems = []
        if require_case and not Path(self.case_path).exists():
            problems.append(f"case file {self.case_path} does not exist")
        if self.m_total < 2:
            problems.append("m_total must be at least 2")
        if not 1 <= self.m_offline < self.m_total:
            problems.append(f"m_offline ({self.m_offline}) must be at least 1 and below m_total ({self.m_total})")
        if self.k_per_topology < 1:
            problems.append("k_per_topology must be positive")
        if self.test_samples < 1:
            problems.append("test_samples must be positive")
        if self.calibration_lambda < 0:
            problems.append("calibration_lambda must be nonnegative")
        if not 0 <= self.impedance_range < 1:
            problems.append("impedance_range must lie in [0, 1)")
        if not 0 <= self.load_fraction <= 1:
            problems.append("load_fraction must lie in [0, 1]")
        if self.max_removed_lines < 0:
            problems.append("max_removed_lines must be nonnegative")
        for name in ("offline_lr", "gamma"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.meta_beta < 0:
            problems.append("meta_beta must be nonnegative")
        for name in ("offline_weight_decay", "online_weight_decay"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be nonnegative")
        for name in ("offline_epochs", "meta_epochs", "adapt_epochs"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be nonnegative")
        if self.inner_steps < 1 or self.task_batch_size < 1 or self.inner_sample_count < 1 or self.adapt_samples < 1:
            problems.append("inner_steps, task_batch_size, inner_sample_count and adapt_samples must be positive")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            problems.append(f"unknown methods {unknown}")
        if self.meta_order not in ("first_order", "second_order_fd"):
            problems.append(f"unknown meta_order {self.meta_order!r}")
        if self.hidden_dims is not None and any(h <= 0 for h in self.hidden_dims):
            problems.append("hidden_dims must be positive")
        if self.threads < 1:
            problems.append("threads must be at least 1")
        if problems:
            raise ConfigError(problems)
        return self

    def corpus_fields(self) -> Dict[str, Any]:
        keys = (
            "case_path", "m_total", "m_offline", "k_per_topology", "test_samples", "max_removed_lines",
            "impedance_range", "load_fraction", "calibration_lambda", "seed",
        )
        return {k: getattr(self, k) for k in keys}

    def config_hash(self) -> str:
        doc = json.dumps(self.corpus_fields(), sort_keys=True)
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        return doc

    def merged(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """Copy with the given non-None fields replaced."""
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError([f"unknown configuration keys {unknown}"])
        clean = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if isinstance(value, list):
                value = tuple(value)
            clean[key] = value
        return replace(self, **clean)

    @classmethod
    def from_json(cls, path: Union[str, Path], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file {path} does not exist"])
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError([f"config file {path} is not valid JSON: {e}"]) from e
        if not isinstance(doc, dict):
            raise ConfigError([f"config file {path} must hold a JSON object"])
        problems = schema_problems(doc)
        if problems:
            raise ConfigError([f"config file {path}: {p}" for p in problems])
        return (base or cls()).merged(doc)

    @classmethod
    def from_env(cls, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """Overlay METAOPF_* environment variables on ``base`` (or the defaults)."""
        overrides: Dict[str, Any] = {}
        try:
            if os.getenv("METAOPF_CASE"):
                overrides["case_path"] = os.environ["METAOPF_CASE"]
            if os.getenv("METAOPF_CORPUS_DIR"):
                overrides["corpus_dir"] = os.environ["METAOPF_CORPUS_DIR"]
            if os.getenv("METAOPF_RUN_DIR"):
                overrides["run_dir"] = os.environ["METAOPF_RUN_DIR"]
            if os.getenv("METAOPF_SEED"):
                overrides["seed"] = int(os.environ["METAOPF_SEED"])
            if os.getenv("METAOPF_THREADS"):
                overrides["threads"] = max(1, int(os.environ["METAOPF_THREADS"]))
            if os.getenv("METAOPF_LAMBDA"):
                overrides["calibration_lambda"] = float(os.environ["METAOPF_LAMBDA"])
            if os.getenv("METAOPF_PROGRESS"):
                overrides["progress"] = _env_flag(os.environ["METAOPF_PROGRESS"])
        except ValueError as e:
            raise ConfigError([f"bad METAOPF_* environment value: {e}"]) from e
        return (base or cls()).merged(overrides)
