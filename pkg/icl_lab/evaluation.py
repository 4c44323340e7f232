"""
Open-end accuracy and label cross-entropy.

Every accuracy in the lab (clean baselines included) goes through run_prompts,
so the empty intervention and the clean model share one code path.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import SpecError
from .hidden_io import HiddenCloud
from .model import InterventionSpec, ModelBundle, TraceSpec, decode_batch, forward_batch
from .tasks import PromptInstance
from .workers import parallel_map

logger = logging.getLogger(__name__)

DEFAULT_BATCH = 64


@dataclass
class PromptRun:
    correct: np.ndarray
    predictions: List[Tuple[int, ...]]
    resid: Dict[int, np.ndarray] = field(default_factory=dict)
    last_attention: Dict[int, List[np.ndarray]] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.correct))

    def cloud(self, layer: int, k: int, mode: str) -> HiddenCloud:
        return HiddenCloud(matrix=self.resid[layer], layer=layer, k=k, mode=mode)


def _chunks(prompts: Sequence[PromptInstance], key, batch_size: int) -> List[List[int]]:
    """Indices grouped by key (first-seen order), split into batches"""
    groups: "OrderedDict[tuple, List[int]]" = OrderedDict()
    for i, p in enumerate(prompts):
        groups.setdefault(key(p), []).append(i)
    return [idx[s:s + batch_size] for idx in groups.values() for s in range(0, len(idx), batch_size)]


def run_prompts(model: ModelBundle, prompts: Sequence[PromptInstance], layers: Sequence[int] = (),
                attention_layers: Sequence[int] = (), intervention: Optional[InterventionSpec] = None,
                batch_size: int = DEFAULT_BATCH, workers: Optional[int] = None) -> PromptRun:
    """Greedy-decode len(gold) tokens per prompt, capturing last-token residuals on the way"""
    if not prompts:
        raise SpecError("no prompts to evaluate")
    if any(not p.gold_ids for p in prompts):
        raise SpecError("every prompt needs gold label tokens")
    spec = TraceSpec(layers=tuple(layers), positions="last", attention=bool(attention_layers),
                     internal_layers=tuple(attention_layers) or None)

    def work(idx: List[int]):
        tokens = np.array([prompts[i].token_ids for i in idx], dtype=np.int64)
        ids, trace = decode_batch(model, tokens, len(prompts[idx[0]].gold_ids), spec, intervention)
        return idx, ids, trace

    n = len(prompts)
    correct = np.zeros(n, dtype=bool)
    predictions: List[Tuple[int, ...]] = [()] * n
    resid = {l: np.zeros((n, model.config.d_model)) for l in layers}
    attention: Dict[int, List[np.ndarray]] = {l: [None] * n for l in attention_layers}
    for idx, ids, trace in parallel_map(work, _chunks(prompts, lambda p: (p.length, len(p.gold_ids)), batch_size), workers):
        for row, i in enumerate(idx):
            predictions[i] = tuple(int(t) for t in ids[row])
            correct[i] = predictions[i] == prompts[i].gold_ids
            for l in layers:
                resid[l][i] = trace.resid(l)[row]
            for l in attention_layers:
                attention[l][i] = trace.attention(l)[row, :, -1, :].astype(np.float64)
    return PromptRun(correct=correct, predictions=predictions, resid=resid, last_attention=attention)


def eval_accuracy(model: ModelBundle, prompts: Sequence[PromptInstance],
                  intervention: Optional[InterventionSpec] = None, workers: Optional[int] = None) -> float:
    """Fraction of prompts whose greedy decode of exactly len(gold) tokens equals gold"""
    return run_prompts(model, prompts, intervention=intervention, workers=workers).accuracy


def label_cross_entropy(model: ModelBundle, prompts: Sequence[PromptInstance],
                        intervention: Optional[InterventionSpec] = None,
                        batch_size: int = DEFAULT_BATCH, workers: Optional[int] = None) -> np.ndarray:
    """Teacher-forced mean cross-entropy over each prompt's gold label tokens"""
    if not prompts:
        raise SpecError("no prompts to evaluate")
    intervention = intervention or InterventionSpec()

    def work(idx: List[int]):
        first = prompts[idx[0]]
        n, p0 = len(first.gold_ids), first.last_index
        tokens = np.array([p.token_ids + p.gold_ids[:-1] for p in (prompts[i] for i in idx)], dtype=np.int64)
        logits, _ = forward_batch(model, tokens, None, intervention.pinned(p0))
        targets = np.array([prompts[i].gold_ids for i in idx], dtype=np.int64)
        losses, _ = ops.cross_entropy(logits[:, p0:p0 + n].reshape(-1, logits.shape[-1]).astype(np.float64),
                                      targets.reshape(-1))
        return idx, losses.reshape(len(idx), n).mean(axis=1)

    out = np.zeros(len(prompts))
    for idx, ce in parallel_map(work, _chunks(prompts, lambda p: (p.length, len(p.gold_ids)), batch_size), workers):
        out[idx] = ce
    return out


def eval_cross_entropy(model: ModelBundle, prompts: Sequence[PromptInstance],
                       intervention: Optional[InterventionSpec] = None, workers: Optional[int] = None) -> float:
    return float(np.mean(label_cross_entropy(model, prompts, intervention, workers=workers)))
