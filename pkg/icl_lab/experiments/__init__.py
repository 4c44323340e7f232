# Experiments Package
from .base_experiment import BaseExperiment, ExperimentContext, ExperimentSpec, ResultRow
from .cloud_metrics import MetricsVsK, MetricsVsLayer
from .dh_ablation import DHAblation
from .fact_recall import FactRecall
from .filter_sweep import FilterSweep
from .head_scan import HeadScan
from .pca_export import PcaExport
from .plot_data import FIGURES, emit_plot_data
from .runner import ExperimentRunner
from .verbalization import Verbalization

__all__ = [
    'BaseExperiment',
    'ExperimentContext',
    'ExperimentSpec',
    'ResultRow',
    'ExperimentRunner',
    'FilterSweep',
    'MetricsVsK',
    'MetricsVsLayer',
    'HeadScan',
    'DHAblation',
    'Verbalization',
    'FactRecall',
    'PcaExport',
    'FIGURES',
    'emit_plot_data',
]
