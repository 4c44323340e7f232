"""
Verbalization transfer: a filter trained on the original labels is retrained
on substitute label words with only some of its tensors unfrozen.
"""
import itertools
from typing import Any, Dict, List

from ..errors import SpecError
from ..evaluation import eval_accuracy
from ..model import InterventionSpec
from ..train import finetune_filter_part
from .base_experiment import BaseExperiment, ResultRow

# trained part -> frozen part
TRAINED_PARTS = {"pre": None, "both": "none", "enc": "dec", "dec": "enc"}


class Verbalization(BaseExperiment):
    kind = "verbalization"
    description = "accuracy after retraining filter parts for a new verbalization"

    def grid(self) -> List[Dict[str, Any]]:
        ranks = self.valid_ranks()
        return [{"task": t, "layer": l, "rank": r, "trained": part}
                for t, l, r, part in itertools.product(self.context.task_names, self.context.layers, ranks,
                                                       TRAINED_PARTS)]

    def run_point(self, coords: Dict[str, Any]) -> List[ResultRow]:
        ctx = self.context
        task = coords["task"]
        alternates = dict(ctx.world.task(task).alternates)
        if not alternates:
            raise SpecError(f"task {task!r} has no substitute label words")
        filt, _ = ctx.filter_for(task, coords["layer"], coords["rank"])
        val = ctx.zero_shot(task, "test", self.spec.n_val, verbalize=alternates)
        chance = 1.0 / len(alternates)
        freeze = TRAINED_PARTS[coords["trained"]]
        if freeze is None:
            acc = eval_accuracy(ctx.model, val, InterventionSpec.inject(filt), self.spec.workers)
            return [self.row(coords, "transfer_accuracy", acc, chance=chance)]

        train = ctx.zero_shot(task, "train", self.spec.n_train, verbalize=alternates)
        cfg = self.spec.train.model_copy(update={"seed": ctx.derived_seed("transfer", *coords.values())})
        new_labels = ctx.world.label_map(task, alternates)
        _, acc = finetune_filter_part(ctx.model, filt, freeze, new_labels, train, val, cfg)
        return [self.row(coords, "transfer_accuracy", acc, chance=chance)]
