"""
Filter-injection accuracy over layers and ranks, with zero-shot and few-shot baselines.
"""
from typing import Any, Dict, List

from ..evaluation import eval_accuracy
from ..metrics import effective_rank
from .base_experiment import BaseExperiment, ResultRow


class FilterSweep(BaseExperiment):
    kind = "filter_sweep"
    description = "open-end accuracy of zero-shot prompts with a trained filter injected"

    def grid(self) -> List[Dict[str, Any]]:
        ranks = self.valid_ranks()
        points: List[Dict[str, Any]] = []
        for task in self.context.task_names:
            # rank 0: no filter, the baselines
            points.append({"task": task, "layer": None, "rank": 0})
            points.extend({"task": task, "layer": l, "rank": r} for l in self.context.layers for r in ranks)
        return points

    def run_point(self, coords: Dict[str, Any]) -> List[ResultRow]:
        ctx, task = self.context, coords["task"]
        if coords["rank"] == 0:
            zero = eval_accuracy(ctx.model, ctx.zero_shot(task, "test", self.spec.n_val), workers=self.spec.workers)
            icl = eval_accuracy(ctx.model, ctx.k_shot(task, self.spec.eval_shots, "gold"), workers=self.spec.workers)
            return [self.row(coords, "zero_shot_accuracy", zero),
                    self.row(coords, "icl_accuracy", icl, k=self.spec.eval_shots)]
        filt, acc = ctx.filter_for(task, coords["layer"], coords["rank"])
        return [self.row(coords, "val_accuracy", acc),
                self.row(coords, "effective_rank", effective_rank(filt))]
