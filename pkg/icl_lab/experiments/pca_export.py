"""
PCA coordinates of hidden-state clouds for scatter plots, plus HSC1 dumps of
the clouds themselves.
"""
import itertools
from pathlib import Path
from typing import Any, Dict, List

from ..hidden_io import write_dump
from ..linalg import pca
from ..metrics import pca_projection, write_pca_csv
from .base_experiment import BaseExperiment, ResultRow


class PcaExport(BaseExperiment):
    kind = "pca_export"
    description = "principal-component projections of last-token hidden states"

    def grid(self) -> List[Dict[str, Any]]:
        return [{"task": t, "mode": m, "layer": l, "k": k}
                for t, m, l, k in itertools.product(self.context.task_names, self.spec.modes,
                                                    self.context.layers, self.spec.shots)]

    def run_point(self, coords: Dict[str, Any]) -> List[ResultRow]:
        ctx = self.context
        task, mode, layer, k = coords["task"], coords["mode"], coords["layer"], coords["k"]
        prompts = ctx.k_shot(task, k, mode)
        cloud = ctx.clean_run(task, k, mode).cloud(layer, k, mode)
        stem = f"{Path(task).stem}_{mode}_L{layer}_k{k}"
        frame = pca_projection(cloud, self.spec.pca_dims, [p.gold_label for p in prompts])
        write_pca_csv(frame, Path(self.spec.out) / "pca" / f"{stem}.csv")
        write_dump(cloud, Path(self.spec.out) / "clouds" / f"{stem}.hsc")

        ratios = pca(cloud.matrix, max(self.spec.pca_dims)).explained_ratio
        return [self.row(coords, "explained_ratio", ratios[d - 1], dim=d) for d in self.spec.pca_dims]
