"""
Experiment orchestration: corpus generation, offline training, online
adaptation sweeps and report tables.
"""

import json
import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from tqdm import tqdm

from config import METHODS, ExperimentConfig
from datagen import (
    Corpus,
    CorpusError,
    CorpusExistsError,
    PerturbationConfig,
    TaskDataset,
    build_corpus,
    load_corpus,
    write_corpus,
)
from evaluate import MetricsReport, ReportError, TaskEvaluator, read_trace, write_trace
from grid import Network, OpfProblem, audit_solution, parse_case, solve_opf
from meta import (
    MetaConfig,
    OfflineConfig,
    PretrainBank,
    adapt,
    meta_train,
    pretrain_bank,
    pretrain_joint,
    rank_bank,
    scratch_baseline,
)
from neuralnet import MlpArch, MlpParams, arch_for_network, init_params, load_checkpoint, save_checkpoint


logger = logging.getLogger(__name__)

OFFLINE_METHODS = ("mtl", "pretrain1", "pretrain2")
METRICS = ("eta1", "eta2", "eta3")


def _run_cell(job: Tuple[str, MlpParams, Network, TaskDataset, Dict[str, Any]]) -> Tuple[str, int, List[MetricsReport]]:
    """One (method, topology) adaptation; module-level so it can run in a worker process."""
    method, init, net, task, opts = job
    evaluator = TaskEvaluator(net, task.test_samples(), task.topology_id, opts.pop("enforce_q_limits"))
    seed = opts.pop("seed")
    if method == "scratch":
        result = scratch_baseline(init.arch, seed, task, evaluator=evaluator, **opts)
    else:
        result = adapt(init, task, evaluator=evaluator, **opts)
    return method, task.topology_id, result.trace


class ExperimentRunner:
    """Wires the pipeline stages together for one case."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self._corpus: Optional[Corpus] = None

    # ------------------------------------------------------------------
    # paths
    # ------------------------------------------------------------------

    @property
    def checkpoint_dir(self) -> Path:
        return self.config.run_path / "checkpoints"

    @property
    def trace_dir(self) -> Path:
        return self.config.run_path / "traces"

    @property
    def report_dir(self) -> Path:
        return self.config.run_path / "reports"

    # ------------------------------------------------------------------
    # corpus
    # ------------------------------------------------------------------

    def perturbation(self) -> PerturbationConfig:
        cfg = self.config
        return PerturbationConfig(
            max_removed_lines=cfg.max_removed_lines,
            impedance_range=cfg.impedance_range,
            load_fraction=cfg.load_fraction,
        )

    def generate(self, force: bool = False) -> Corpus:
        """Build the corpus and write it under ``corpus_dir/<case>``."""
        cfg = self.config
        target = cfg.corpus_path
        if target.exists() and any(target.iterdir()) and not force:
            raise CorpusExistsError(f"corpus exists at {target}; pass --force to overwrite")
        base = parse_case(cfg.case_path)
        logger.info(f"Generating corpus for {base.name}: M={cfg.m_total}, M*={cfg.m_offline}, K={cfg.k_per_topology}")
        corpus = build_corpus(
            base,
            m_total=cfg.m_total,
            m_offline=cfg.m_offline,
            k_per_topology=cfg.k_per_topology,
            seed=cfg.seed,
            config=self.perturbation(),
            calibration_lambda=cfg.calibration_lambda,
            test_samples=cfg.test_samples,
            workers=cfg.threads,
            progress=cfg.progress,
        )
        write_corpus(corpus, target, force=force)
        self._corpus = corpus
        return corpus

    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.config.corpus_path)
        return self._corpus

    def arch(self) -> MlpArch:
        return arch_for_network(self.corpus().base, self.config.hidden_dims)

    # ------------------------------------------------------------------
    # offline training
    # ------------------------------------------------------------------

    def meta_config(self) -> MetaConfig:
        cfg = self.config
        return MetaConfig(
            alpha=cfg.offline_lr,
            beta=cfg.meta_beta,
            gamma=cfg.gamma,
            inner_steps=cfg.inner_steps,
            task_batch_size=cfg.task_batch_size,
            meta_epochs=cfg.meta_epochs,
            inner_sample_count=cfg.inner_sample_count,
            order=cfg.meta_order,
            weight_decay=cfg.offline_weight_decay,
        )

    def offline_config(self) -> OfflineConfig:
        cfg = self.config
        return OfflineConfig(cfg.offline_lr, cfg.offline_epochs, cfg.offline_weight_decay)

    def _header(self, method: str, **extra) -> Dict[str, Any]:
        return {
            "method": method,
            "seed": self.config.seed,
            "config_hash": self.config.config_hash(),
            "corpus_hash": self.corpus().manifest.get("config_hash"),
            **extra,
        }

    def train(self, methods: Sequence[str]) -> Dict[str, float]:
        """Run the requested offline methods; returns wall-clock seconds per method."""
        corpus = self.corpus()
        arch = self.arch()
        cfg = self.config
        timings: Dict[str, float] = {}
        saved: Dict[str, int] = {}
        for method in methods:
            if method not in OFFLINE_METHODS:
                logger.info(f"Method {method} has no offline phase; skipping")
                continue
            started = time.perf_counter()
            if method == "mtl":
                model = meta_train(corpus.offline, arch, self.meta_config(), seed=cfg.seed, progress=cfg.progress)
                timings[method] = time.perf_counter() - started
                save_checkpoint(self.checkpoint_dir / "mtl.json", model.w_mtl, self._header("mtl"))
                curve = pd.DataFrame({"epoch": range(len(model.manifest["meta_loss"])), "meta_loss": model.manifest["meta_loss"]})
                curve.to_csv(cfg.run_path / "meta_loss.csv", index=False)
                saved[method] = 1
            elif method == "pretrain1":
                params = pretrain_joint(corpus.offline, arch, self.offline_config(), seed=cfg.seed, progress=cfg.progress)
                timings[method] = time.perf_counter() - started
                save_checkpoint(self.checkpoint_dir / "pretrain1.json", params, self._header("pretrain1"))
                saved[method] = 1
            else:
                bank = pretrain_bank(corpus.offline, arch, self.offline_config(), seed=cfg.seed, progress=cfg.progress)
                timings[method] = time.perf_counter() - started
                for tid, params in bank.models.items():
                    save_checkpoint(
                        self.checkpoint_dir / "pretrain2" / f"task_{tid}.json",
                        params,
                        self._header("pretrain2", topology_id=tid),
                    )
                saved[method] = len(bank.models)
            logger.info(f"Offline {method}: {timings[method]:.2f}s, {saved[method]} checkpoint(s)")
        self._record_timings(timings, saved)
        return timings

    def _record_timings(self, timings: Dict[str, float], saved: Dict[str, int]) -> None:
        if not timings:
            return
        path = self.config.run_path / "timings.csv"
        rows = pd.DataFrame(
            [{"method": m, "wall_clock_s": t, "checkpoints": saved[m]} for m, t in timings.items()]
        )
        if path.exists():
            previous = pd.read_csv(path)
            rows = pd.concat([previous[~previous["method"].isin(timings)], rows], ignore_index=True)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows.to_csv(path, index=False)

    def load_bank(self) -> PretrainBank:
        directory = self.checkpoint_dir / "pretrain2"
        files = sorted(directory.glob("task_*.json")) if directory.exists() else []
        if not files:
            raise FileNotFoundError(f"no pretrain2 checkpoints in {directory}")
        bank = PretrainBank()
        for path in files:
            params, header = load_checkpoint(path)
            bank.models[int(header["topology_id"])] = params
        return bank

    def initialisations(self, methods: Sequence[str]) -> Dict[str, Any]:
        inits: Dict[str, Any] = {}
        if "mtl" in methods:
            inits["mtl"], _ = load_checkpoint(self.checkpoint_dir / "mtl.json")
        if "pretrain1" in methods:
            inits["pretrain1"], _ = load_checkpoint(self.checkpoint_dir / "pretrain1.json")
        if "pretrain2" in methods:
            inits["pretrain2"] = self.load_bank()
        return inits

    # ------------------------------------------------------------------
    # online adaptation
    # ------------------------------------------------------------------

    def _cell_options(self, gamma: Optional[float] = None, n_train: Optional[int] = None) -> Dict[str, Any]:
        cfg = self.config
        return {
            "gamma": cfg.gamma if gamma is None else gamma,
            "epochs": cfg.adapt_epochs,
            "n_train": cfg.adapt_samples if n_train is None else n_train,
            "weight_decay": cfg.online_weight_decay,
            "eval_epochs": tuple(cfg.report_epochs),
            "offline_ids": tuple(self.corpus().offline_ids),
            "record_wall_clock": cfg.record_wall_clock,
            "enforce_q_limits": cfg.enforce_q_limits,
            "seed": cfg.seed,
        }

    def _starting_point(self, method: str, inits: Dict[str, Any], task: TaskDataset, n_train: int) -> MlpParams:
        if method == "pretrain2":
            x, y = task.train_arrays(n_train)
            ranking = rank_bank(inits["pretrain2"], x, y)
            loss, best = ranking[0]
            logger.info(f"Topology {task.topology_id}: closest bank model is topology {best} (loss {loss:.5f})")
            return inits["pretrain2"].models[best]
        if method == "scratch":
            return inits.get("scratch_template")
        return inits[method]

    def _run_cells(self, jobs: List[Tuple]) -> List[Tuple[str, int, List[MetricsReport]]]:
        desc = "adapt"
        if self.config.threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.config.threads) as pool:
                return list(tqdm(pool.map(_run_cell, jobs), total=len(jobs), desc=desc, disable=not self.config.progress))
        return [_run_cell(job) for job in tqdm(jobs, desc=desc, disable=not self.config.progress)]

    def _adapt_methods(
        self,
        methods: Sequence[str],
        inits: Dict[str, Any],
        gamma: Optional[float] = None,
        n_train: Optional[int] = None,
    ) -> Dict[str, List[MetricsReport]]:
        corpus = self.corpus()
        n_train = self.config.adapt_samples if n_train is None else n_train
        jobs = []
        for task in corpus.online:
            net = corpus.network_for(task)
            for method in methods:
                init = self._starting_point(method, inits, task, n_train)
                jobs.append((method, init, net, task, self._cell_options(gamma, n_train)))
        traces: Dict[str, List[MetricsReport]] = {m: [] for m in methods}
        for method, _, trace in self._run_cells(jobs):
            traces[method].extend(trace)
        return traces

    def adapt(self, methods: Sequence[str], sweep: Optional[str] = None) -> List[Path]:
        """Adapt every method on every online topology; returns the trace files written."""
        methods = [m for m in METHODS if m in methods]
        needed = set(methods) | ({"mtl"} if sweep in ("samples", "gamma") else set())
        inits = self.initialisations([m for m in needed if m in OFFLINE_METHODS])
        inits["scratch_template"] = init_params(self.arch(), self.config.seed)
        written: List[Path] = []

        if sweep is None:
            traces = self._adapt_methods(methods, inits)
            for method in methods:
                written.append(write_trace(self.trace_dir / f"trace_{method}.csv", method, traces[method]))
        elif sweep == "samples":
            pool = min(len(t.train_indices) for t in self.corpus().online)
            for count in self.config.sample_counts:
                used = min(count, pool)
                if used < count:
                    logger.warning(f"Sample sweep: {count} exceeds the training pool, using {used}")
                traces = self._adapt_methods(["mtl"], inits, n_train=used)
                written.append(write_trace(self.trace_dir / f"sweep_samples_{count}.csv", "mtl", traces["mtl"]))
        elif sweep == "tasks":
            corpus = self.corpus()
            for count in self.config.task_counts:
                used = min(count, len(corpus.offline))
                if used < count:
                    logger.warning(f"Task sweep: {count} exceeds the offline pool, using {used}")
                model = meta_train(corpus.offline[:used], self.arch(), self.meta_config(), seed=self.config.seed)
                traces = self._adapt_methods(["mtl"], {**inits, "mtl": model.w_mtl})
                written.append(write_trace(self.trace_dir / f"sweep_tasks_{count}.csv", "mtl", traces["mtl"]))
        elif sweep == "gamma":
            for gamma in self.config.gamma_values:
                traces = self._adapt_methods(["mtl", "scratch"], inits, gamma=gamma)
                path = self.trace_dir / f"sweep_gamma_{gamma:g}.csv"
                write_trace(path, "mtl", traces["mtl"])
                written.append(write_trace(path, "scratch", traces["scratch"], append=True))
        else:
            raise ValueError(f"unknown sweep axis {sweep!r}")
        logger.info(f"Wrote {len(written)} trace file(s) to {self.trace_dir}")
        return written

    # ------------------------------------------------------------------
    # reports
    # ------------------------------------------------------------------

    def report(self, trace_paths: Sequence[Path] = ()) -> Dict[str, Any]:
        """Aggregate traces into table and figure CSVs; returns a summary dict."""
        if not trace_paths:
            trace_paths = sorted(self.trace_dir.glob("*.csv")) if self.trace_dir.exists() else []
        if not trace_paths:
            raise ReportError(f"no trace files found in {self.trace_dir}")
        main, sweeps = [], []
        for path in trace_paths:
            frame = read_trace(path)
            frame["source"] = Path(path).stem
            (sweeps if Path(path).stem.startswith("sweep_") else main).append(frame)

        out = self.report_dir
        out.mkdir(parents=True, exist_ok=True)
        summary: Dict[str, Any] = {"case": self.config.case_name, "files": []}

        if main:
            traces = pd.concat(main, ignore_index=True)
            table_ii = online_table(traces, self.config.report_epochs)
            table_ii.to_csv(out / "table_online_metrics.csv", index=False)
            table_iii = feasibility_table(traces, self.config.case_name)
            table_iii.to_csv(out / "table_feasibility.csv", index=False)
            for metric in METRICS + ("feasibility_rate",):
                curve = traces.groupby(["epoch", "method"])[metric].mean().unstack("method")
                curve.to_csv(out / f"fig_online_{metric}.csv")
            summary["online"] = table_ii.to_dict(orient="records")
            summary["feasibility"] = table_iii.to_dict(orient="records")
            summary["files"] += ["table_online_metrics.csv", "table_feasibility.csv"]

        if sweeps:
            series = sweep_series(pd.concat(sweeps, ignore_index=True))
            for axis, frame in series.items():
                frame.to_csv(out / f"fig_sweep_{axis}.csv", index=False)
                summary["files"].append(f"fig_sweep_{axis}.csv")
                summary[f"sweep_{axis}"] = frame.to_dict(orient="records")

        timings = self.config.run_path / "timings.csv"
        if timings.exists():
            table_iv = pd.read_csv(timings).sort_values("wall_clock_s")
            table_iv.to_csv(out / "table_offline_cost.csv", index=False)
            summary["offline_cost"] = table_iv.to_dict(orient="records")
            summary["files"].append("table_offline_cost.csv")

        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
        return summary

    # ------------------------------------------------------------------
    # audit
    # ------------------------------------------------------------------

    def audit(self, load_scale: float = 1.0, topology_id: Optional[int] = None) -> str:
        """Solve the OPF at scaled base load (optionally on a corpus topology) and audit it."""
        if topology_id is None:
            net = parse_case(self.config.case_path)
        else:
            corpus = self.corpus()
            tasks = {t.topology_id: t for t in corpus.offline + corpus.online}
            if topology_id not in tasks:
                raise CorpusError(f"topology {topology_id} is not in the corpus")
            net = corpus.network_for(tasks[topology_id])
        pd_base, qd_base = net.demand()
        prob = OpfProblem(net, self.config.calibration_lambda, p_demand=pd_base * load_scale, q_demand=qd_base * load_scale)
        sol = solve_opf(prob)
        if not sol.ok:
            return json.dumps({"status": sol.status, "iterations": sol.iterations}, indent=2)
        report = audit_solution(prob, sol)
        doc = json.loads(report.to_json())
        doc.update({"status": sol.status, "objective": sol.objective, "iterations": sol.iterations})
        return json.dumps(doc, indent=2)


def online_table(traces: pd.DataFrame, epochs: Sequence[int]) -> pd.DataFrame:
    """Rows (metric, method), one column per reported epoch, averaged over topologies."""
    chosen = traces[traces["epoch"].isin(list(epochs))]
    means = chosen.groupby(["method", "epoch"])[list(METRICS)].mean()
    rows = []
    order = [m for m in METHODS if m in set(chosen["method"])]
    for metric in METRICS:
        for method in order:
            row: Dict[str, Any] = {"metric": metric, "method": method}
            for epoch in epochs:
                key = (method, epoch)
                row[f"epoch_{epoch}"] = float(means.loc[key, metric]) if key in means.index else float("nan")
            rows.append(row)
    return pd.DataFrame(rows)


def feasibility_table(traces: pd.DataFrame, case_name: str) -> pd.DataFrame:
    """Feasibility rate at each method's final epoch, one column per case."""
    final = traces[traces["epoch"] == traces.groupby("method")["epoch"].transform("max")]
    rates = final.groupby("method")["feasibility_rate"].mean()
    order = [m for m in METHODS if m in rates.index]
    return pd.DataFrame({"method": order, case_name: [float(rates[m]) for m in order]})


_SWEEP_RE = re.compile(r"sweep_(?P<axis>[a-z]+)_(?P<value>.+)")


def sweep_series(traces: pd.DataFrame) -> Dict[str, pd.DataFrame]:
    """Final-epoch metrics per sweep value, averaged over topologies."""
    parsed = traces["source"].str.extract(_SWEEP_RE)
    traces = traces.assign(axis=parsed["axis"], value=pd.to_numeric(parsed["value"], errors="coerce"))
    final = traces[traces["epoch"] == traces.groupby(["source", "method"])["epoch"].transform("max")]
    series = {}
    for axis, frame in final.groupby("axis"):
        agg = frame.groupby(["value", "method"])[list(METRICS) + ["feasibility_rate"]].mean().reset_index()
        series[axis] = agg.sort_values(["method", "value"]).reset_index(drop=True)
    return series
