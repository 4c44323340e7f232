"""
Experiment runner with routing by kind, resumable JSONL output and a summary.
"""
import json
import logging
import threading
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

from ..errors import EmptyGrid, ExperimentError, SpecError
from ..workers import parallel_map
from .base_experiment import BaseExperiment, ExperimentContext, ExperimentSpec, ResultRow, point_key
from .cloud_metrics import MetricsVsK, MetricsVsLayer
from .dh_ablation import DHAblation
from .fact_recall import FactRecall
from .filter_sweep import FilterSweep
from .head_scan import HeadScan
from .pca_export import PcaExport
from .verbalization import Verbalization

logger = logging.getLogger(__name__)

PointResult = Tuple[Dict[str, Any], Optional[List[ResultRow]], Optional[Exception], float]


class ExperimentRunner:
    """Routes an ExperimentSpec to its experiment and persists the rows"""

    def __init__(self):
        # Initialize all experiment kinds
        self.experiments: Dict[str, Type[BaseExperiment]] = {
            "filter_sweep": FilterSweep,
            "metrics_vs_k": MetricsVsK,
            "metrics_vs_layer": MetricsVsLayer,
            "head_scan": HeadScan,
            "dh_ablation": DHAblation,
            "verbalization": Verbalization,
            "fact_recall": FactRecall,
            "pca_export": PcaExport,
        }

    def create(self, spec: ExperimentSpec) -> BaseExperiment:
        try:
            cls = self.experiments[spec.kind]
        except KeyError:
            raise SpecError(f"unknown experiment kind {spec.kind!r}") from None
        return cls(ExperimentContext(spec))

    @staticmethod
    def paths(spec: ExperimentSpec) -> Dict[str, Path]:
        out = Path(spec.out)
        return {"rows": out / f"{spec.kind}.jsonl",
                "resume": out / f"{spec.kind}.resume.json",
                "summary": out / f"{spec.kind}.summary.json"}

    # --------------------------------------------------------------------------
    # Run
    # --------------------------------------------------------------------------

    def run(self, spec: ExperimentSpec) -> Path:
        """Run every grid point not already done; returns the JSONL path"""
        started = time.perf_counter()
        try:
            Path(spec.out).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise SpecError(f"cannot write to {spec.out}: {e}") from e
        paths = self.paths(spec)
        experiment = self.create(spec)

        grid = experiment.grid()
        if not grid:
            raise EmptyGrid(f"{spec.kind}: the grid has no points")
        keys = [point_key(c) for c in grid]
        if len(set(keys)) != len(keys):
            raise SpecError(f"{spec.kind}: grid contains repeated points")

        done = self._load_resume(paths["resume"], spec, set(keys))
        if done:
            logger.info("%s: resuming with %d/%d points done", spec.kind, len(done), len(grid))
        try:
            experiment.prepare()
        except Exception as e:
            raise ExperimentError(spec.kind, {"stage": "prepare"}, e) from e

        todo = [c for c, key in zip(grid, keys) if key not in done]
        logger.info("%s: %d grid points to run", spec.kind, len(todo))
        timings: Dict[str, float] = {}
        failed = threading.Event()

        def work(coords: Dict[str, Any]) -> PointResult:
            if failed.is_set():
                return coords, None, None, 0.0
            t0 = time.perf_counter()
            try:
                rows = experiment.run_point(coords)
            except Exception as e:
                failed.set()
                return coords, None, e, time.perf_counter() - t0
            elapsed = time.perf_counter() - t0
            if spec.record_timing:
                for row in rows:
                    row.wall_clock = elapsed
            logger.info("%s %s: %d rows in %.1fs", spec.kind, coords, len(rows), elapsed)
            return coords, rows, None, elapsed

        failures = []
        for coords, rows, error, elapsed in parallel_map(work, todo, spec.workers):
            if rows is not None:
                done[point_key(coords)] = rows
                timings[point_key(coords)] = elapsed
            elif error is not None:
                failures.append((coords, error))

        self._write_rows(paths["rows"], keys, done)
        if failures:
            self._write_resume(paths["resume"], spec, done)
            coords, error = failures[0]
            logger.error("%s failed at %s; %d/%d points kept for resume", spec.kind, coords, len(done), len(grid))
            raise ExperimentError(spec.kind, coords, error) from error

        extras = experiment.finalize([row for key in keys for row in done[key]])
        paths["resume"].unlink(missing_ok=True)
        self._write_summary(paths["summary"], spec, experiment, grid, keys, done, timings,
                            time.perf_counter() - started, extras)
        return paths["rows"]

    # --------------------------------------------------------------------------
    # Persistence
    # --------------------------------------------------------------------------

    @staticmethod
    def _spec_fingerprint(spec: ExperimentSpec) -> Dict[str, Any]:
        return spec.model_dump(mode="json", exclude={"workers"})

    def _load_resume(self, path: Path, spec: ExperimentSpec, keys: set) -> Dict[str, List[ResultRow]]:
        if not path.exists():
            return {}
        state = json.loads(path.read_text(encoding="utf-8"))
        if state.get("spec") != self._spec_fingerprint(spec):
            logger.warning("%s belongs to a different spec; starting over", path)
            return {}
        done: Dict[str, List[ResultRow]] = {}
        for key, rows in state.get("points", {}).items():
            if key in keys:
                done[key] = [ResultRow(kind=spec.kind, coords=r["coords"], metric=r["metric"], value=r["value"],
                                       seed=spec.seed, extra=r.get("extra", {}), wall_clock=r.get("wall_clock"))
                             for r in rows]
        return done

    def _write_resume(self, path: Path, spec: ExperimentSpec, done: Dict[str, List[ResultRow]]) -> None:
        points = {key: [{"coords": r.coords, "metric": r.metric, "value": r.value, "extra": r.extra,
                         "wall_clock": r.wall_clock} for r in rows]
                  for key, rows in done.items()}
        # key order inside coords/extra is the JSONL column order: keep it
        path.write_text(json.dumps({"spec": self._spec_fingerprint(spec), "points": points}), encoding="utf-8")

    @staticmethod
    def _write_rows(path: Path, keys: Sequence[str], done: Dict[str, List[ResultRow]]) -> None:
        lines = [row.to_json() for key in keys if key in done for row in done[key]]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @staticmethod
    def _write_summary(path: Path, spec: ExperimentSpec, experiment: BaseExperiment, grid, keys,
                       done: Dict[str, List[ResultRow]], timings: Dict[str, float], total: float,
                       extras: Dict[str, Any]) -> None:
        summary = {
            "kind": spec.kind,
            "description": experiment.description,
            "spec": spec.model_dump(mode="json"),
            "points": len(grid),
            "rows": sum(len(done[key]) for key in keys),
            "resumed_points": len(grid) - len(timings),
            "model_checksum": experiment.context.model.checksum(),
            "timings": {"total_s": round(total, 3),
                        "points": [{"coords": c, "seconds": round(timings[k], 3)}
                                   for c, k in zip(grid, keys) if k in timings]},
        }
        summary.update(extras)
        path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        logger.info("%s: wrote %d rows, summary %s", spec.kind, summary["rows"], path)
