"""
Meta-learning corpus generation.

A corpus is a set of perturbed topologies of one base case. Each topology
gets its own load samples and OPF labels; the first ``m_offline`` topologies
form the offline (meta-training) pool and the rest are held back as new
tasks for online adaptation.

Randomness is counter-based: every draw is seeded from
``(seed, stream, topology_id, counter)`` so results do not depend on the
order in which topologies or samples are processed.
"""

import hashlib
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from grid import Network, OpfProblem, dumps_network, load_network, save_network, solve_opf, with_branch_status
from neuralnet import scale_targets, target_bounds


logger = logging.getLogger(__name__)

TOPOLOGY_STREAM = 1
LOAD_STREAM = 2
SNAP_TOL = 1e-6


class TopologySamplingError(RuntimeError):
    def __init__(self, message: str, achieved: int):
        self.achieved = achieved
        super().__init__(f"{message} (achieved {achieved})")


class CorpusError(ValueError):
    """Raised for malformed or missing corpus files."""


class CorpusExistsError(FileExistsError):
    """Raised when a corpus directory already exists and overwriting was not requested."""


@dataclass(frozen=True)
class PerturbationConfig:
    max_removed_lines: int = 2
    impedance_range: float = 0.3
    load_fraction: float = 0.7
    max_topology_attempts: int = 200
    max_sample_attempts_factor: int = 20

    def __post_init__(self):
        if self.max_removed_lines < 0:
            raise ValueError("max_removed_lines must be nonnegative")
        if not 0.0 <= self.impedance_range < 1.0:
            raise ValueError("impedance_range must lie in [0, 1)")
        if not 0.0 <= self.load_fraction <= 1.0:
            raise ValueError("load_fraction must lie in [0, 1]")

    @property
    def varies_topology(self) -> bool:
        return self.max_removed_lines > 0 or self.impedance_range > 0.0


@dataclass(frozen=True)
class TopologySpec:
    base_case: str
    removed_branches: Tuple[int, ...]
    impedance_scale: Tuple[float, ...]
    seed: int
    topology_id: int

    def key(self) -> Tuple[Tuple[int, ...], Tuple[float, ...]]:
        return self.removed_branches, self.impedance_scale

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base_case": self.base_case,
            "removed_branches": list(self.removed_branches),
            "impedance_scale": list(self.impedance_scale),
            "seed": self.seed,
            "topology_id": self.topology_id,
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "TopologySpec":
        return cls(
            base_case=doc["base_case"],
            removed_branches=tuple(int(k) for k in doc["removed_branches"]),
            impedance_scale=tuple(float(s) for s in doc["impedance_scale"]),
            seed=int(doc["seed"]),
            topology_id=int(doc["topology_id"]),
        )


@dataclass
class OpfSample:
    sample_id: int
    x: np.ndarray
    y: np.ndarray
    raw_y: np.ndarray
    objective: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "sample_id": self.sample_id,
                "x": self.x.tolist(),
                "y": self.y.tolist(),
                "raw_y": self.raw_y.tolist(),
                "objective": float(self.objective),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "OpfSample":
        doc = json.loads(line)
        return cls(
            sample_id=int(doc["sample_id"]),
            x=np.array(doc["x"], dtype=float),
            y=np.array(doc["y"], dtype=float),
            raw_y=np.array(doc["raw_y"], dtype=float),
            objective=float(doc["objective"]),
        )


@dataclass
class TaskDataset:
    topology: TopologySpec
    samples: List[OpfSample]
    split: str  # "offline" | "online"
    train_indices: Tuple[int, ...] = ()
    test_indices: Tuple[int, ...] = ()
    excluded: int = 0

    @property
    def topology_id(self) -> int:
        return self.topology.topology_id

    def inputs(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.array([s.x for s in chosen])

    def targets(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.array([s.y for s in chosen])

    def train_arrays(self, limit: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        idx = list(self.train_indices)[:limit] if limit is not None else list(self.train_indices)
        return self.inputs(idx), self.targets(idx)

    def test_samples(self) -> List[OpfSample]:
        return [self.samples[i] for i in self.test_indices]


@dataclass
class Corpus:
    base: Network
    offline: List[TaskDataset]
    online: List[TaskDataset]
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def offline_ids(self) -> List[int]:
        return [t.topology_id for t in self.offline]

    def network_for(self, task: TaskDataset) -> Network:
        return apply_topology(self.base, task.topology)


def _rng(seed: int, stream: int, topology_id: int, counter: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, topology_id, counter])


def apply_topology(base: Network, spec: TopologySpec) -> Network:
    """Base network with the topology's line removals and impedance scaling applied."""
    if len(spec.impedance_scale) != len(base.branches):
        raise ValueError(
            f"topology {spec.topology_id} scales {len(spec.impedance_scale)} branches, base has {len(base.branches)}"
        )
    branches = tuple(
        replace(br, r=br.r * s, x=br.x * s) for br, s in zip(base.branches, spec.impedance_scale)
    )
    return with_branch_status(replace(base, branches=branches, topology_id=spec.topology_id), spec.removed_branches)


def _draw_topology(
    base: Network, config: PerturbationConfig, seed: int, topology_id: int, attempt: int
) -> TopologySpec:
    rng = _rng(seed, TOPOLOGY_STREAM, topology_id, attempt)
    n_remove = int(rng.integers(0, config.max_removed_lines + 1))
    candidates = [k for k, br in enumerate(base.branches) if br.in_service]
    removed: Tuple[int, ...] = ()
    n_remove = min(n_remove, len(candidates))
    if n_remove:
        removed = tuple(sorted(int(k) for k in rng.choice(candidates, size=n_remove, replace=False)))
    if config.impedance_range > 0:
        r = config.impedance_range
        scale = tuple(float(s) for s in rng.uniform(1.0 - r, 1.0 + r, len(base.branches)))
    else:
        scale = tuple(1.0 for _ in base.branches)
    return TopologySpec(base.name, removed, scale, seed, topology_id)


def sample_topologies(
    base: Network,
    m_total: int,
    config: PerturbationConfig = PerturbationConfig(),
    seed: int = 0,
    calibration_lambda: float = 0.005,
    check_opf: bool = True,
) -> List[TopologySpec]:
    """Draw ``m_total`` connected, pairwise distinct topologies with a feasible base-load OPF."""
    if m_total < 1:
        raise ValueError("m_total must be at least 1")
    specs: List[TopologySpec] = []
    seen = set()
    for topology_id in range(m_total):
        for attempt in range(config.max_topology_attempts):
            spec = _draw_topology(base, config, seed, topology_id, attempt)
            net = apply_topology(base, spec)
            if not net.is_connected():
                logger.debug(f"Topology {topology_id} attempt {attempt}: removal {spec.removed_branches} islands the grid")
                continue
            if config.varies_topology and spec.key() in seen:
                continue
            if check_opf and not solve_opf(OpfProblem(net, calibration_lambda)).ok:
                logger.debug(f"Topology {topology_id} attempt {attempt}: base-load OPF infeasible")
                continue
            specs.append(spec)
            seen.add(spec.key())
            break
        else:
            raise TopologySamplingError(
                f"no feasible connected topology {topology_id} within {config.max_topology_attempts} attempts",
                achieved=len(specs),
            )
    logger.info(f"Sampled {len(specs)} topologies of {base.name}")
    return specs


def draw_load(
    base: Network, config: PerturbationConfig, seed: int, topology_id: int, sample_id: int
) -> Tuple[np.ndarray, np.ndarray]:
    pd, qd = base.demand()
    rng = _rng(seed, LOAD_STREAM, topology_id, sample_id)
    f = config.load_fraction
    p_factor = rng.uniform(1.0 - f, 1.0 + f, pd.size)
    q_factor = rng.uniform(1.0 - f, 1.0 + f, qd.size)
    return pd * p_factor, qd * q_factor


def sample_loads(
    base: Network,
    k: int,
    config: PerturbationConfig = PerturbationConfig(),
    seed: int = 0,
    topology_id: int = 0,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """``k`` demand vectors, each bus scaled uniformly within the load fraction."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return [draw_load(base, config, seed, topology_id, i) for i in range(k)]


def _label(net: Network, state) -> Tuple[np.ndarray, np.ndarray]:
    """Snap-and-clip OPF dispatch into the original box, then scale."""
    lo, hi = target_bounds(net)
    v_gen = state.v_mag[[g.bus for g in net.generators]]
    raw = np.concatenate([state.p_gen[net.non_slack_generators], v_gen])
    raw = np.where(np.abs(raw - lo) <= SNAP_TOL, lo, raw)
    raw = np.where(np.abs(hi - raw) <= SNAP_TOL, hi, raw)
    raw = np.clip(raw, lo, hi)
    n_p = net.n_gen - 1
    return raw, scale_targets(net, raw[:n_p], raw[n_p:])


def generate_task_samples(
    base: Network,
    spec: TopologySpec,
    k: int,
    config: PerturbationConfig,
    calibration_lambda: float,
) -> Tuple[List[OpfSample], int]:
    """Solve OPF on fresh load draws until ``k`` optimal samples exist; returns samples and exclusions."""
    net = apply_topology(base, spec)
    load_buses = base.load_buses
    samples: List[OpfSample] = []
    excluded = 0
    sample_id = 0
    limit = k * config.max_sample_attempts_factor
    while len(samples) < k:
        if sample_id >= limit:
            raise TopologySamplingError(
                f"topology {spec.topology_id}: only {len(samples)} feasible samples in {limit} draws",
                achieved=len(samples),
            )
        pd, qd = draw_load(base, config, spec.seed, spec.topology_id, sample_id)
        sol = solve_opf(OpfProblem(net, calibration_lambda, p_demand=pd, q_demand=qd))
        if sol.ok:
            raw, y = _label(net, sol.state)
            x = np.concatenate([pd[load_buses], qd[load_buses]])
            samples.append(OpfSample(sample_id, x, y, raw, sol.objective))
        else:
            excluded += 1
            logger.debug(f"Topology {spec.topology_id} sample {sample_id}: OPF {sol.status}, excluded")
        sample_id += 1
    return samples, excluded


def _generate_task_job(args) -> Tuple[List[OpfSample], int]:
    return generate_task_samples(*args)


def _partition(k: int, split: str, test_samples: int) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    if split == "offline":
        return tuple(range(k)), ()
    n_test = min(test_samples, max(1, k // 2)) if k > 1 else 0
    return tuple(range(k - n_test)), tuple(range(k - n_test, k))


def corpus_config(
    base: Network,
    m_total: int,
    m_offline: int,
    k_per_topology: int,
    seed: int,
    config: PerturbationConfig,
    calibration_lambda: float,
    test_samples: int,
) -> Dict[str, Any]:
    return {
        "case": base.name,
        "network_sha256": hashlib.sha256(dumps_network(base).encode("utf-8")).hexdigest(),
        "m_total": m_total,
        "m_offline": m_offline,
        "k_per_topology": k_per_topology,
        "seed": seed,
        "perturbation": asdict(config),
        "calibration_lambda": calibration_lambda,
        "test_samples": test_samples,
    }


def config_hash(doc: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def build_corpus(
    base: Network,
    m_total: int,
    m_offline: int,
    k_per_topology: int,
    seed: int,
    config: PerturbationConfig = PerturbationConfig(),
    calibration_lambda: float = 0.005,
    test_samples: int = 100,
    workers: int = 1,
    progress: bool = False,
) -> Corpus:
    """Sample topologies and labelled load samples, split offline/online."""
    if not 1 <= m_offline < m_total:
        raise ValueError(f"need 1 <= m_offline < m_total, got m_offline={m_offline}, m_total={m_total}")
    if k_per_topology < 1:
        raise ValueError("k_per_topology must be at least 1")

    specs = sample_topologies(base, m_total, config, seed, calibration_lambda)
    jobs = [(base, spec, k_per_topology, config, calibration_lambda) for spec in specs]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_generate_task_job, jobs), total=len(jobs), desc="tasks", disable=not progress))
    else:
        results = [_generate_task_job(job) for job in tqdm(jobs, desc="tasks", disable=not progress)]

    offline: List[TaskDataset] = []
    online: List[TaskDataset] = []
    for spec, (samples, excluded) in zip(specs, results):
        split = "offline" if spec.topology_id < m_offline else "online"
        train, test = _partition(len(samples), split, test_samples)
        task = TaskDataset(spec, samples, split, train, test, excluded)
        (offline if split == "offline" else online).append(task)
        if excluded:
            logger.warning(f"Topology {spec.topology_id}: excluded {excluded} infeasible samples")

    cfg = corpus_config(base, m_total, m_offline, k_per_topology, seed, config, calibration_lambda, test_samples)
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "load_buses": base.load_buses,
        "topologies": [t.topology.to_dict() for t in offline + online],
        "split": {str(t.topology_id): t.split for t in offline + online},
        "exclusions": {str(t.topology_id): t.excluded for t in offline + online},
        "partitions": {
            str(t.topology_id): {"train": len(t.train_indices), "test": len(t.test_indices)} for t in offline + online
        },
    }
    total_excluded = sum(t.excluded for t in offline + online)
    logger.info(
        f"Built corpus for {base.name}: {len(offline)} offline / {len(online)} online tasks, "
        f"{k_per_topology} samples each, {total_excluded} samples excluded"
    )
    return Corpus(base=base, offline=offline, online=online, manifest=manifest)


def write_corpus(corpus: Corpus, directory: Union[str, Path], force: bool = False) -> Path:
    """Write ``manifest.json``, ``network.json`` and one ``task_<m>.jsonl`` per topology."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise CorpusExistsError(f"corpus exists at {directory}; pass --force to overwrite")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_network(corpus.base, directory / "network.json")
    for task in corpus.offline + corpus.online:
        with open(directory / f"task_{task.topology_id}.jsonl", "w", encoding="utf-8") as f:
            for sample in task.samples:
                f.write(sample.to_json() + "\n")
    (directory / "manifest.json").write_text(json.dumps(corpus.manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote corpus to {directory}")
    return directory


def load_corpus(directory: Union[str, Path]) -> Corpus:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CorpusError(f"no corpus manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        base = load_network(directory / "network.json")
        test_samples = int(manifest["config"]["test_samples"])
        offline: List[TaskDataset] = []
        online: List[TaskDataset] = []
        for doc in manifest["topologies"]:
            spec = TopologySpec.from_dict(doc)
            split = manifest["split"][str(spec.topology_id)]
            path = directory / f"task_{spec.topology_id}.jsonl"
            with open(path, encoding="utf-8") as f:
                samples = [OpfSample.from_json(line) for line in f if line.strip()]
            train, test = _partition(len(samples), split, test_samples)
            excluded = int(manifest["exclusions"].get(str(spec.topology_id), 0))
            task = TaskDataset(spec, samples, split, train, test, excluded)
            (offline if split == "offline" else online).append(task)
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise CorpusError(f"malformed corpus at {directory}: {e}") from e
    return Corpus(base=base, offline=offline, online=online, manifest=manifest)
