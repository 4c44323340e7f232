"""
Eccentricity, covariance flux and related cloud metrics of few-shot hidden
states, swept over demonstration counts or over layers.
"""
import itertools
import logging
from typing import Any, Dict, List

from ..metrics import covariance_flux, eccentricity, principal_tvs_alignment, remaining_cov_ratio
from .base_experiment import BaseExperiment, ResultRow

logger = logging.getLogger(__name__)


class CloudMetrics(BaseExperiment):
    """Grid over (task, mode, layer, k); subclasses choose the nesting order"""

    axes = ("task", "mode", "layer", "k")

    def grid(self) -> List[Dict[str, Any]]:
        d = self.context.model.config.d_model
        if self.spec.flux_rank > d:
            logger.warning("flux rank %d exceeds d_model=%d; no points", self.spec.flux_rank, d)
            return []
        values = {"task": self.context.task_names, "mode": list(self.spec.modes),
                  "layer": self.context.layers, "k": list(self.spec.shots)}
        return [dict(zip(self.axes, combo)) for combo in itertools.product(*(values[a] for a in self.axes))]

    def run_point(self, coords: Dict[str, Any]) -> List[ResultRow]:
        ctx = self.context
        task, mode, layer, k = coords["task"], coords["mode"], coords["layer"], coords["k"]
        run = ctx.clean_run(task, k, mode)
        cloud = run.cloud(layer, k, mode)
        filt, _ = ctx.filter_for(task, layer, self.spec.flux_rank)
        return [
            self.row(coords, "eccentricity", eccentricity(cloud)),
            self.row(coords, "covariance_flux", covariance_flux(cloud, filt)),
            self.row(coords, "remaining_cov_ratio", remaining_cov_ratio(cloud, self.spec.flux_rank)),
            self.row(coords, "principal_tvs_alignment", principal_tvs_alignment(cloud, filt)),
            self.row(coords, "accuracy", run.accuracy),
        ]


class MetricsVsK(CloudMetrics):
    kind = "metrics_vs_k"
    description = "cloud metrics against the number of demonstrations"
    axes = ("task", "mode", "layer", "k")


class MetricsVsLayer(CloudMetrics):
    kind = "metrics_vs_layer"
    description = "cloud metrics against depth"
    axes = ("task", "mode", "k", "layer")
