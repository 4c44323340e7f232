"""
Accuracy with the denoising heads zeroed, against matched random-head controls,
under random-sample, seen-label and unseen-label demonstrations.
"""
import itertools
import logging
from typing import Any, Dict, FrozenSet, List

import numpy as np

from ..heads import ablated_accuracy, head_scan, matched_random_heads, select_ablation_set
from ..model import HeadId
from .base_experiment import BaseExperiment, ResultRow

logger = logging.getLogger(__name__)

CONDITIONS = ("clean", "dh", "controls")


class DHAblation(BaseExperiment):
    kind = "dh_ablation"
    description = "ablated accuracy of denoising heads vs random heads"

    def __init__(self, context):
        super().__init__(context)
        self.ablation_sets: Dict[str, FrozenSet[HeadId]] = {}
        self.controls: Dict[str, List[FrozenSet[HeadId]]] = {}

    def grid(self) -> List[Dict[str, Any]]:
        return [{"task": t, "config": c, "condition": cond}
                for t, c, cond in itertools.product(self.context.task_names, self.spec.ablation_configs, CONDITIONS)]

    def prepare(self) -> None:
        ctx = self.context
        for task in ctx.task_names:
            prompts = ctx.k_shot(task, self.spec.eval_shots, self.spec.modes[0])
            reports = [head_scan(ctx.model, layer, prompts, ctx.filter_for(task, layer, self.spec.flux_rank)[0],
                                 workers=self.spec.workers)
                       for layer in ctx.layers]
            heads = select_ablation_set(reports, self.spec.ablation_theta)
            self.ablation_sets[task] = heads
            self.controls[task] = matched_random_heads(heads, ctx.rng("controls", task), self.spec.control_trials,
                                                       ctx.model.config.n_heads)
            logger.info("%s: ablating %d heads %s", task, len(heads), sorted(str(h) for h in heads))
        self.write_json("ablation_set.json", {
            task: {"heads": sorted(str(h) for h in self.ablation_sets[task]),
                   "controls": [sorted(str(h) for h in c) for c in self.controls[task]],
                   "theta": self.spec.ablation_theta}
            for task in ctx.task_names
        })

    def run_point(self, coords: Dict[str, Any]) -> List[ResultRow]:
        ctx = self.context
        task, config, condition = coords["task"], coords["config"], coords["condition"]
        prompt_sets = {config: ctx.k_shot(task, self.spec.eval_shots, config)}
        heads = self.ablation_sets[task]
        if condition == "clean":
            return [self.row(coords, "accuracy", ablated_accuracy(ctx.model, (), prompt_sets, self.spec.workers)[config],
                             n_heads=0)]
        if condition == "dh":
            acc = ablated_accuracy(ctx.model, heads, prompt_sets, self.spec.workers)[config]
            return [self.row(coords, "accuracy", acc, n_heads=len(heads))]

        accs = [ablated_accuracy(ctx.model, control, prompt_sets, self.spec.workers)[config]
                for control in self.controls[task]]
        rows = [self.row(coords, "accuracy", acc, n_heads=len(heads), trial=t) for t, acc in enumerate(accs)]
        if accs:
            rows.append(self.row(coords, "control_mean", float(np.mean(accs)), n_heads=len(heads)))
            rows.append(self.row(coords, "control_std", float(np.std(accs)), n_heads=len(heads)))
        return rows
