"""
Fact recall through a filter, scored by label cross-entropy: bijective facts
(one code per item) against clustered facts (few shared groups).
"""
from typing import Any, Dict, List

from ..evaluation import eval_accuracy, eval_cross_entropy
from ..model import InterventionSpec
from .base_experiment import BaseExperiment, ResultRow


class FactRecall(BaseExperiment):
    kind = "fact_recall"
    description = "label cross-entropy of zero-shot fact queries with a filter injected"

    def grid(self) -> List[Dict[str, Any]]:
        ranks = self.valid_ranks()
        points: List[Dict[str, Any]] = []
        for task in self.context.task_names:
            points.append({"task": task, "layer": None, "rank": 0})
            points.extend({"task": task, "layer": l, "rank": r} for l in self.context.layers for r in ranks)
        return points

    def run_point(self, coords: Dict[str, Any]) -> List[ResultRow]:
        ctx, task = self.context, coords["task"]
        val = ctx.zero_shot(task, "test", self.spec.n_val)
        if coords["rank"] == 0:
            icl = ctx.k_shot(task, self.spec.eval_shots, "gold")
            return [self.row(coords, "zero_shot_ce", eval_cross_entropy(ctx.model, val, workers=self.spec.workers)),
                    self.row(coords, "icl_ce", eval_cross_entropy(ctx.model, icl, workers=self.spec.workers),
                             k=self.spec.eval_shots)]
        filt, _ = ctx.filter_for(task, coords["layer"], coords["rank"])
        intervention = InterventionSpec.inject(filt)
        return [self.row(coords, "filter_ce", eval_cross_entropy(ctx.model, val, intervention, self.spec.workers)),
                self.row(coords, "filter_accuracy", eval_accuracy(ctx.model, val, intervention, self.spec.workers))]
