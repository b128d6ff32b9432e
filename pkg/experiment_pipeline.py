"""
Main Experiment Pipeline for the MABE Laboratory
Orchestrates training, decoding, sweeps, theory checks, evaluation and reports
"""

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from checkpoints import load_checkpoint, save_checkpoint
from config import ARTIFACT_VERSION, DEFAULT_MAX_WORKERS, MAX_WORKERS_ENV
from decoder_evaluation import draw_instances, evaluate_decoders
from decoders import Scorer, run_rule
from experiment_config import ExperimentConfig, parse_config
from mabe_trainer import LOG_COLUMNS, mabe_train
from q_models import QModel, init_model
from random_streams import stream
from report_generators import emit_report, write_csv, write_json
from synthetic_tasks import build_task
from theory_checks import (
    j_landscape, map_optimality_check, random_p_true, sampling_soundness_check,
    tabular_fixed_point, verify_gradient_identity,
)


logger = logging.getLogger(__name__)

DETERMINISTIC_LOG_COLUMNS = [column for column in LOG_COLUMNS if column != "wall_clock_ms"]
COMMANDS = ("train", "decode", "sweep", "theorem", "gradcheck", "evaluate", "report")


class ManifestEntry(BaseModel):
    path: str
    sha256: str
    bytes: int


class RunManifest(BaseModel):
    command: str
    config_hash: str
    artifact_version: str = ARTIFACT_VERSION
    started_at: str
    finished_at: Optional[str] = None
    complete: bool = False
    error: Optional[str] = None
    files: List[ManifestEntry] = Field(default_factory=list)


def max_workers(branches: int) -> int:
    cap = os.environ.get(MAX_WORKERS_ENV)
    limit = int(cap) if cap else min(DEFAULT_MAX_WORKERS, os.cpu_count() or 1)
    return max(1, min(limit, branches))


def _sweep_branch(config_data: Dict[str, Any], lam: float, seed: int) -> List[Dict[str, Any]]:
    """One (lambda, seed) training run; top-level so worker processes can import it"""
    config = parse_config(config_data)
    task = build_task(config.task)
    model = init_model(config.model, task.vocab_size, seed)
    train = config.train.model_copy(update={"lambda_": lam, "seed": seed})
    _, rows = mabe_train(model, task, train)
    return [{"lambda": lam, "seed": seed, **row.model_dump()} for row in rows]


class MabeLaboratory:
    """Experiment orchestrator: one method per CLI subcommand, each writing into the run directory"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.task = build_task(config.task)
        self.files: List[str] = []
        logger.info(f"MABE laboratory initialized: task={config.task.kind}, model={config.model.kind}, out={self.output_dir}")

    def run(self, command: str) -> Dict[str, Any]:
        """Run one subcommand; failures are logged and reported, and a manifest is always written"""
        manifest = RunManifest(
            command=command,
            config_hash=self.config.config_hash(),
            started_at=datetime.now(timezone.utc).isoformat(),
        )
        try:
            if command not in COMMANDS:
                raise ValueError(f"Unknown command: {command}")
            result = getattr(self, command)()
        except Exception as e:
            logger.error(f"Error running {command}: {str(e)}")
            result = {
                'success': False,
                'error': type(e).__name__,
                'message': f"Failed to run {command}: {str(e)}"
            }
        manifest.complete = bool(result.get('success'))
        manifest.error = None if manifest.complete else result.get('message')
        self._write_manifest(manifest)
        return result

    def _write_manifest(self, manifest: RunManifest) -> None:
        manifest.finished_at = datetime.now(timezone.utc).isoformat()
        for path in sorted(self.output_dir.rglob("*")):
            relative = path.relative_to(self.output_dir)
            if not path.is_file() or relative.parts[0] == "logs" or relative.name == "manifest.json":
                continue
            data = path.read_bytes()
            manifest.files.append(ManifestEntry(path=relative.as_posix(), sha256=hashlib.sha256(data).hexdigest(), bytes=len(data)))
        write_json(manifest.model_dump(), self.output_dir / "manifest.json")

    def _record(self, path: str) -> str:
        self.files.append(path)
        return path

    def _checkpoint_path(self) -> Path:
        if self.config.checkpoint:
            return Path(self.config.checkpoint)
        return self.output_dir / "checkpoints" / "final.json"

    def _load_model(self) -> QModel:
        path = self._checkpoint_path()
        if not path.exists():
            raise FileNotFoundError(f"No checkpoint at {path}; run 'train' first or set 'checkpoint'")
        return load_checkpoint(str(path), vocab_size=self.task.vocab_size)

    def train(self) -> Dict[str, Any]:
        config = self.config.train_config()
        model = init_model(self.config.model, self.task.vocab_size, self.config.seed)
        checkpoint_dir = self.output_dir / "checkpoints"

        def checkpoint(trained: QModel, step: int) -> None:
            self._record(save_checkpoint(trained, str(checkpoint_dir / f"step_{step:06d}.json")))

        trained, rows = mabe_train(model, self.task, config, checkpoint)
        log = pd.DataFrame([row.model_dump() for row in rows], columns=LOG_COLUMNS)
        self._record(write_csv(log[DETERMINISTIC_LOG_COLUMNS], self.output_dir / "train_log.csv"))
        self._record(write_csv(log[["step", "wall_clock_ms"]], self.output_dir / "timings.csv"))
        self._record(save_checkpoint(trained, str(checkpoint_dir / "final.json")))

        final = rows[-1]
        return {
            'success': True,
            'steps': trained.steps,
            'final_j_token': final.j_token,
            'final_greedy_exact_match': final.greedy_exact_match,
            'files': list(self.files),
            'message': f"Training finished after {trained.steps} updates"
        }

    def decode(self) -> Dict[str, Any]:
        model = self._load_model()
        suite = self.config.decode
        instances = draw_instances(self.task, self.config.eval_instances, self.config.seed)
        records = []
        for spec in suite.expand():
            for scorer in suite.scorers:
                for inst in instances:
                    rng = stream(self.config.seed, worker_id=inst.index, purpose="decode")
                    result = run_rule(spec.rule, model, inst.x, Scorer(scorer), self.task.max_rule,
                                      spec.beam_size, spec.beta, rng, suite.node_budget)
                    records.append({"instance": inst.index, "x": list(inst.x), "rule": spec.label, **result.to_record()})
        self._record(write_json(records, self.output_dir / "decode_results.json"))
        return {'success': True, 'decoded': len(records), 'files': list(self.files),
                'message': f"Decoded {len(instances)} instances with {len(suite.expand())} rules"}

    def sweep(self) -> Dict[str, Any]:
        """Lambda sweep; every branch with the same seed consumes the same data stream"""
        settings = self.config.sweep
        seeds = settings.seeds or [self.config.seed]
        branches = [(lam, seed) for lam in settings.lambdas for seed in seeds]
        config_data = self.config.model_dump(mode="json", by_alias=True)

        workers = max_workers(len(branches))
        logger.info(f"Sweeping {len(branches)} branches on {workers} workers")
        if workers == 1:
            results = [_sweep_branch(config_data, lam, seed) for lam, seed in branches]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_sweep_branch, config_data, lam, seed) for lam, seed in branches]
                results = [future.result() for future in futures]

        sweep = pd.DataFrame([row for rows in results for row in rows])
        sweep = sweep.sort_values(["lambda", "seed", "step"], kind="mergesort").reset_index(drop=True)
        self._record(write_csv(sweep[["lambda", "seed"] + DETERMINISTIC_LOG_COLUMNS], self.output_dir / "sweep.csv"))
        final = sweep.groupby(["lambda", "seed"], sort=True).tail(1)
        self._record(write_csv(final[["lambda", "seed", "step", "greedy_exact_match", "j_token"]],
                               self.output_dir / "sweep_final.csv"))
        return {'success': True, 'branches': len(branches), 'files': list(self.files),
                'message': f"Swept lambda over {settings.lambdas}"}

    def theorem(self) -> Dict[str, Any]:
        """Fixed points and landscapes for the configured and random P_true, plus the utility oracles"""
        settings = self.config.theorem
        targets = [np.asarray(p, dtype=np.float64) for p in settings.p_true]
        rng = stream(self.config.seed, purpose="check")
        for _ in range(settings.random_instances):
            d = int(rng.integers(2, settings.max_vocab + 1))
            targets.append(random_p_true(rng, d, int(rng.integers(1, d))))

        reports, summary, landscape_rows = [], [], []
        for index, probs in enumerate(targets):
            report = tabular_fixed_point(probs)
            reports.append(report.model_dump())
            dual_error = float(np.max(np.abs(np.array(report.dual_probs) - probs)))
            summary.append({
                "index": index, "d": len(probs), "support": int(np.count_nonzero(probs)),
                "max_residual": report.max_residual, "margin": report.margin,
                "undesired_spread": report.undesired_spread, "dual_error": dual_error,
                "converged": report.converged,
            })
            if settings.landscape and len(probs) == 2:
                landscape = j_landscape(probs)
                landscape_rows.extend({"index": index, "q_free": q, "j": j}
                                      for q, j in zip(landscape.q_free, landscape.j_values))
                summary[-1]["landscape_maxima"] = len(landscape.maxima)

        utility = self.config.utility
        n = self.config.eval_instances
        oracle_rng = stream(self.config.seed, worker_id=1, purpose="check")
        oracles = [map_optimality_check(self.task, utility, n, oracle_rng),
                   sampling_soundness_check(self.task, utility, n, oracle_rng)]

        self._record(write_json(reports, self.output_dir / "fixed_points.json"))
        self._record(write_csv(pd.DataFrame(summary), self.output_dir / "fixed_points.csv"))
        if landscape_rows:
            self._record(write_csv(pd.DataFrame(landscape_rows), self.output_dir / "landscape.csv"))
        self._record(write_json([o.model_dump() | {"passed": o.passed} for o in oracles],
                                self.output_dir / "oracle_checks.json"))

        strict = [row for row in summary if row["margin"] is not None and row["converged"]]
        passed = (all(row["converged"] for row in summary)
                  and all(row["max_residual"] <= 1e-8 and row["dual_error"] <= 1e-8 for row in summary)
                  and all(row["margin"] > 1 and row["undesired_spread"] <= 1e-8 for row in strict)
                  and all(o.passed for o in oracles))
        return {'success': passed, 'fixed_points': len(reports), 'files': list(self.files),
                'message': "Theory checks passed" if passed else "Theory checks reported violations"}

    def gradcheck(self) -> Dict[str, Any]:
        settings = self.config.gradcheck
        model = init_model(self.config.model, self.task.vocab_size, self.config.seed)
        rng = stream(self.config.seed, purpose="check")
        if model.family_kind == "tabular":
            model.params[:] = rng.normal(size=model.layout.size)
        batch = [self.task.sample_pair(rng) for _ in range(settings.pairs)]
        report = verify_gradient_identity(model, batch, settings.h, settings.tolerance)
        self._record(write_json(report.model_dump(), self.output_dir / "gradcheck.json"))
        return {'success': report.passed, 'max_relative_residual': report.max_relative_residual,
                'files': list(self.files),
                'message': f"Gradient identity residual {report.max_relative_residual:.3e} (tolerance {settings.tolerance:g})"}

    def evaluate(self) -> Dict[str, Any]:
        model = self._load_model()
        suite = self.config.decode
        table = evaluate_decoders(model, self.task, suite.scorers, suite.expand(), self.config.eval_instances,
                                  self.config.seed, self.config.utility, suite.node_budget)
        self._record(write_csv(table.to_frame(), self.output_dir / "eval_table.csv"))
        self._record(write_json(table.model_dump(), self.output_dir / "eval_table.json"))
        return {'success': True, 'rows': len(table.rows), 'files': list(self.files),
                'message': f"Evaluated {len(table.rows)} (rule, scorer) pairs"}

    def report(self) -> Dict[str, Any]:
        result = emit_report(str(self.output_dir))
        self.files.extend(result["files"])
        return result
