"""
Base class for all experiments, the validated ExperimentSpec and the shared
ExperimentContext (model, task world, cached prompts, runs and filters).
"""
import hashlib
import json
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from ..config import substream
from ..errors import InvalidConfig, SpecError
from ..evaluation import PromptRun, eval_accuracy, run_prompts
from ..model import InterventionSpec, ModelBundle, load_model
from ..tasks import DemoMode, Example, InstructionMode, PromptInstance, TaskWorld, build_world
from ..train import TrainConfig, train_filter
from ..tvs_filter import TVSFilter, load_filter, save_filter

logger = logging.getLogger(__name__)

ExperimentKind = Literal[
    "filter_sweep",
    "metrics_vs_k",
    "metrics_vs_layer",
    "head_scan",
    "dh_ablation",
    "verbalization",
    "fact_recall",
    "pca_export",
]

# mode names accepted on the command line besides the DemoMode values
INSTRUCTION_MODES = {"instruct": InstructionMode.BASIC, "instruct_ls": InstructionMode.WITH_LABEL_SPACE}


def resolve_mode(mode: str, k: int) -> Tuple[DemoMode, InstructionMode]:
    """'gold' | 'random_label' | 'unseen' | 'seen' | 'random_sample' | 'instruct' | 'instruct_ls'"""
    if mode in INSTRUCTION_MODES:
        return DemoMode.GOLD, INSTRUCTION_MODES[mode]
    demo = DemoMode.parse(mode)
    if k == 0:
        return DemoMode.GOLD, InstructionMode.NONE
    return demo, InstructionMode.NONE


# ==============================================================================
# SPEC AND RESULT ROWS
# ==============================================================================

class ExperimentSpec(BaseModel):
    """One experiment: which figure/table it reproduces, on which model and grid"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ExperimentKind
    model: Path
    task: Optional[str] = None            # preset or TSV path; None: the world stored with the model
    tasks: Optional[List[str]] = None     # tasks inside the world; None: all of them
    layers: Optional[List[int]] = None    # None: every layer
    ranks: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 64])
    shots: List[int] = Field(default_factory=lambda: [0, 1, 2, 4, 8])
    modes: List[str] = Field(default_factory=lambda: ["gold"])
    seed: int = 0
    out: Path = Path("results")

    n_train: int = Field(default=2048, ge=1)
    n_val: int = Field(default=512, ge=1)
    n_test: int = Field(default=256, ge=2)
    per_query: int = Field(default=2, ge=1)
    flux_rank: int = Field(default=8, ge=1)
    eval_shots: int = Field(default=8, ge=0)
    train: TrainConfig = Field(default_factory=TrainConfig)

    theta: float = Field(default=0.035, gt=0.0)
    ablation_theta: float = Field(default=0.05, gt=0.0)
    overlap_k: float = Field(default=0.01, gt=0.0, le=1.0)
    control_trials: int = Field(default=10, ge=0)
    ablation_configs: List[str] = Field(default_factory=lambda: ["random_sample", "seen", "unseen"])
    read_offset: int = Field(default=0, ge=0)
    pca_dims: List[int] = Field(default_factory=lambda: [1, 2, 3])

    record_timing: bool = False
    workers: Optional[int] = Field(default=None, ge=1)

    @field_validator("ranks")
    @classmethod
    def _positive_ranks(cls, ranks: List[int]) -> List[int]:
        if any(r < 1 for r in ranks):
            raise ValueError("ranks must be >= 1")
        return ranks

    @field_validator("shots", "layers")
    @classmethod
    def _non_negative(cls, values: Optional[List[int]]) -> Optional[List[int]]:
        if values is not None and any(v < 0 for v in values):
            raise ValueError("values must be >= 0")
        return values

    @field_validator("modes", "ablation_configs")
    @classmethod
    def _known_modes(cls, modes: List[str]) -> List[str]:
        for mode in modes:
            if mode not in INSTRUCTION_MODES:
                try:
                    DemoMode.parse(mode)
                except SpecError as e:
                    raise ValueError(str(e)) from e
        return modes

    @classmethod
    def build(cls, **values: Any) -> "ExperimentSpec":
        try:
            return cls(**values)
        except ValidationError as e:
            raise InvalidConfig(str(e)) from e


@dataclass
class ResultRow:
    kind: str
    coords: Dict[str, Any]
    metric: str
    value: Optional[float]
    seed: int
    extra: Dict[str, Any] = field(default_factory=dict)
    wall_clock: Optional[float] = None

    def as_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        out.update(self.coords)
        out.update(self.extra)
        out["metric"] = self.metric
        out["value"] = self.value
        out["seed"] = self.seed
        if self.wall_clock is not None:
            out["wall_clock"] = round(self.wall_clock, 6)
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), ensure_ascii=False)


def point_key(coords: Dict[str, Any]) -> str:
    return json.dumps(coords, sort_keys=True)


# ==============================================================================
# CONTEXT
# ==============================================================================

class ExperimentContext:
    """Lazily loaded model and world plus caches shared by every grid point"""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self._model: Optional[ModelBundle] = None
        self._world: Optional[TaskWorld] = None
        self._lock = threading.Lock()
        self._key_locks: Dict[tuple, threading.Lock] = {}
        self._prompts: Dict[tuple, List[PromptInstance]] = {}
        self._runs: Dict[tuple, PromptRun] = {}
        self._filters: Dict[tuple, Tuple[TVSFilter, float]] = {}

    # --------------------------------------------------------------------------
    # Model and world
    # --------------------------------------------------------------------------

    @property
    def model(self) -> ModelBundle:
        if self._model is None:
            path = Path(self.spec.model)
            if not path.exists():
                raise SpecError(f"model file {path} does not exist")
            self._model = load_model(path)
            logger.info("loaded %s: %s", path, self._model.config)
        return self._model

    @property
    def world(self) -> TaskWorld:
        if self._world is None:
            stored = self.model.meta.get("world")
            if stored is not None and self.spec.task in (None, stored.get("preset"), stored.get("tsv")):
                self._world = TaskWorld.from_meta(stored)
            elif self.spec.task is not None:
                self._world = build_world(self.spec.task, seed=self.spec.seed)
            else:
                raise SpecError("model metadata does not describe a task world; pass --task")
            if self._world.tokenizer.vocab != self.model.vocab:
                raise SpecError("task world vocabulary does not match the model's")
        return self._world

    @property
    def task_names(self) -> List[str]:
        names = self.spec.tasks or self.world.task_names
        for name in names:
            self.world.task(name)
        return list(names)

    @property
    def layers(self) -> List[int]:
        n_layers = self.model.config.n_layers
        layers = list(range(n_layers)) if self.spec.layers is None else list(self.spec.layers)
        bad = [l for l in layers if l >= n_layers]
        if bad:
            raise SpecError(f"layers {bad} outside a {n_layers}-layer model")
        return layers

    def rng(self, *names: Any) -> np.random.Generator:
        return substream(self.spec.seed, "/".join(str(n) for n in names))

    def derived_seed(self, *names: Any) -> int:
        return int(self.rng(*names).integers(2 ** 31))

    def _key_lock(self, key: tuple) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())

    # --------------------------------------------------------------------------
    # Prompts
    # --------------------------------------------------------------------------

    def queries(self, task: str, split: str, n: int) -> List[Example]:
        """Up to n examples of a split, sampled without replacement, in dataset order"""
        data = self.world.task(task)
        pool = data.train if split == "train" else data.test
        if n >= len(pool):
            return list(pool)
        idx = np.sort(self.rng("queries", task, split).choice(len(pool), size=n, replace=False))
        return [pool[i] for i in idx]

    def zero_shot(self, task: str, split: str, n: int,
                  verbalize: Optional[Dict[str, str]] = None) -> List[PromptInstance]:
        key = ("zero", task, split, n, tuple(sorted((verbalize or {}).items())))
        with self._key_lock(key):
            if key not in self._prompts:
                self._prompts[key] = self.world.prompts(task, self.queries(task, split, n), 0, DemoMode.GOLD,
                                                        self.rng("zero-shot", task, split), verbalize=verbalize)
            return self._prompts[key]

    def k_shot(self, task: str, k: int, mode: str) -> List[PromptInstance]:
        """per_query demonstration sequences for every held-out query (cloud size 2 x |test|)

        At k=0 every sequence of a query is the same prompt, so each query appears once.
        """
        key = ("k", task, k, mode)
        with self._key_lock(key):
            if key not in self._prompts:
                demo, instruction = resolve_mode(mode, k)
                queries = self.queries(task, "test", self.spec.n_test)
                per_query = self.spec.per_query if k > 0 else 1
                prompts = self.world.prompts(task, queries, k, demo, self.rng("demos", task, k, mode),
                                             instruction, per_query=per_query)
                self._prompts[key] = prompts
            return self._prompts[key]

    def clean_run(self, task: str, k: int, mode: str) -> PromptRun:
        """One decode over k-shot prompts, residuals captured at every layer"""
        key = ("run", task, k, mode)
        with self._key_lock(key):
            if key not in self._runs:
                layers = tuple(range(self.model.config.n_layers))
                self._runs[key] = run_prompts(self.model, self.k_shot(task, k, mode), layers=layers,
                                              workers=self.spec.workers)
                logger.info("clean run %s k=%d %s: accuracy %.3f", task, k, mode, self._runs[key].accuracy)
            return self._runs[key]

    # --------------------------------------------------------------------------
    # Filters
    # --------------------------------------------------------------------------

    def filter_training(self, task: str, layer: int, rank: int) -> Tuple[TrainConfig, str]:
        """Training config for one filter and a digest of everything that determines its weights"""
        cfg = self.spec.train.model_copy(update={"seed": self.derived_seed("filter", task, layer, rank)})
        provenance = {"model": self.model.checksum(), "world": self.world.to_meta(), "task": task,
                      "layer": layer, "rank": rank, "n_train": self.spec.n_train,
                      "train": cfg.model_dump(mode="json")}
        digest = hashlib.sha256(json.dumps(provenance, sort_keys=True).encode("utf-8")).hexdigest()
        return cfg, digest[:12]

    def filter_path(self, task: str, layer: int, rank: int) -> Path:
        _, digest = self.filter_training(task, layer, rank)
        return Path(self.spec.out) / "filters" / f"{Path(task).stem}_L{layer}_r{rank}_{digest}.tvs"

    def filter_for(self, task: str, layer: int, rank: int) -> Tuple[TVSFilter, float]:
        """Trained rank-r filter at `layer` with its zero-shot val accuracy (cached on disk)"""
        key = ("filter", task, layer, rank)
        with self._key_lock(key):
            if key in self._filters:
                return self._filters[key]
            path = self.filter_path(task, layer, rank)
            val = self.zero_shot(task, "test", self.spec.n_val)
            if path.exists():
                filt = load_filter(path)
                if filt.layer != layer or filt.r != rank or filt.d != self.model.config.d_model:
                    raise SpecError(f"{path} holds a layer-{filt.layer} rank-{filt.r} filter")
                logger.info("reusing %s", path)
            else:
                cfg, _ = self.filter_training(task, layer, rank)
                train = self.zero_shot(task, "train", self.spec.n_train)
                filt, _ = train_filter(self.model, layer, rank, train, val, cfg, label_map=self.world.label_map(task))
                # fresh and reused filters must be bit-identical
                filt = load_filter(save_filter(filt, path))
            acc = eval_accuracy(self.model, val, InterventionSpec.inject(filt), self.spec.workers)
            logger.info("%s L%d r%d: val accuracy %.3f", task, layer, rank, acc)
            self._filters[key] = (filt, acc)
            return self._filters[key]


# ==============================================================================
# BASE EXPERIMENT
# ==============================================================================

class BaseExperiment(ABC):
    """Base class for all experiments: a grid of points, each producing result rows"""

    kind: str = ""
    description: str = ""

    def __init__(self, context: ExperimentContext):
        self.context = context
        self.spec = context.spec

    @abstractmethod
    def grid(self) -> List[Dict[str, Any]]:
        """Grid coordinates in canonical order"""
        pass

    @abstractmethod
    def run_point(self, coords: Dict[str, Any]) -> List[ResultRow]:
        """All rows for one grid point - must be implemented by subclasses"""
        pass

    def prepare(self) -> None:
        """Work shared by every point, run once before the grid"""

    def finalize(self, rows: Sequence[ResultRow]) -> Dict[str, Any]:
        """Extra artifacts after the whole grid; returns entries for the summary"""
        return {}

    def row(self, coords: Dict[str, Any], metric: str, value: Optional[float], **extra: Any) -> ResultRow:
        value = None if value is None else float(value)
        if value is not None and not np.isfinite(value):
            value = None
        return ResultRow(kind=self.kind, coords=dict(coords), metric=metric, value=value,
                         seed=self.spec.seed, extra=extra)

    def valid_ranks(self) -> List[int]:
        d = self.context.model.config.d_model
        kept = [r for r in self.spec.ranks if r <= d]
        if len(kept) < len(self.spec.ranks):
            logger.warning("dropping ranks %s above d_model=%d", [r for r in self.spec.ranks if r > d], d)
        return kept

    def write_json(self, name: str, payload: Any) -> Path:
        path = Path(self.spec.out) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
