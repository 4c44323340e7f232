"""
Single-head ablation scans: relative metric changes, induction magnitudes and
the denoising-head selection they imply.
"""
import itertools
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence

from ..heads import attention_export, dh_overlap, head_scan, identify_dh
from ..model import HeadId
from .base_experiment import BaseExperiment, ResultRow

logger = logging.getLogger(__name__)

ATTENTION_PROMPTS = 8


def flux_changes(rows: Sequence[ResultRow]) -> Dict[str, Dict[HeadId, float]]:
    """task -> {head: d_flux} rebuilt from scan rows"""
    out: Dict[str, Dict[HeadId, float]] = {}
    for row in rows:
        if row.metric == "d_flux" and row.extra.get("head") is not None and row.value is not None:
            out.setdefault(row.coords["task"], {})[HeadId(row.coords["layer"], row.extra["head"])] = row.value
    return out


class HeadScan(BaseExperiment):
    kind = "head_scan"
    description = "per-head ablation effect on eccentricity, covariance flux and accuracy"

    @property
    def mode(self) -> str:
        return self.spec.modes[0]

    def read_layer(self, layer: int) -> int:
        return min(layer + self.spec.read_offset, self.context.model.config.n_layers - 1)

    def grid(self) -> List[Dict[str, Any]]:
        return [{"task": t, "layer": l} for t, l in itertools.product(self.context.task_names, self.context.layers)]

    def run_point(self, coords: Dict[str, Any]) -> List[ResultRow]:
        ctx = self.context
        task, layer = coords["task"], coords["layer"]
        read_layer = self.read_layer(layer)
        prompts = ctx.k_shot(task, self.spec.eval_shots, self.mode)
        filt, _ = ctx.filter_for(task, read_layer, self.spec.flux_rank)
        report = head_scan(ctx.model, layer, prompts, filt, read_layer=read_layer, workers=self.spec.workers)

        rows = [self.row(coords, metric, report.clean[metric], head=None, read_layer=read_layer)
                for metric in ("eccentricity", "covariance_flux", "accuracy")]
        for scan in report.rows:
            flags = {"head": scan.head.head, "read_layer": read_layer,
                     "acc_absolute": scan.acc_absolute, "degenerate": scan.degenerate}
            rows += [self.row(coords, "d_ecc", scan.d_ecc, **flags),
                     self.row(coords, "d_flux", scan.d_flux, **flags),
                     self.row(coords, "d_acc", scan.d_acc, **flags),
                     self.row(coords, "induction", scan.induction, **flags)]
        return rows

    def finalize(self, rows: Sequence[ResultRow]) -> Dict[str, Any]:
        ctx = self.context
        n_total = ctx.model.config.n_layers * ctx.model.config.n_heads
        changes = flux_changes(rows)
        selection: Dict[str, Any] = {}
        for task in ctx.task_names:
            picked = identify_dh(changes.get(task, {}), self.spec.theta)
            entry = picked.as_dict()
            entry["coverage"] = len(ctx.layers) * ctx.model.config.n_heads / n_total
            selection[task] = entry
            if picked.dh_set:
                frame = attention_export(ctx.model, ctx.k_shot(task, self.spec.eval_shots, self.mode)[:ATTENTION_PROMPTS],
                                         sorted(picked.dh_set))
                path = Path(self.spec.out) / "attention" / f"{Path(task).stem}_dh.csv"
                path.parent.mkdir(parents=True, exist_ok=True)
                frame.to_csv(path, index=False)
            logger.info("%s: %d DH, %d anti-DH", task, len(picked.dh_set), len(picked.anti_dh_set))

        tasks = ctx.task_names
        overlap = {f"{a}|{b}": dh_overlap(changes.get(a, {}), changes.get(b, {}), self.spec.overlap_k)
                   for a, b in itertools.combinations(tasks, 2)}
        path = self.write_json("dh_selection.json", {"tasks": selection, "overlap": overlap,
                                                     "overlap_k": self.spec.overlap_k})
        return {"dh_selection": str(path)}
