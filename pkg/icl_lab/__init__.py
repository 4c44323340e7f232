# ICL Lab Package
from .errors import (
    DegenerateCloud,
    ExperimentError,
    IclLabError,
    InvalidIntervention,
    NumericalError,
    NumericalFailure,
    SpecError,
)
from .evaluation import eval_accuracy, eval_cross_entropy, run_prompts
from .heads import head_scan, identify_dh, induction_score, select_ablation_set
from .hidden_io import HiddenCloud, read_dump, write_dump
from .metrics import covariance_flux, eccentricity, effective_rank, enc_alignment, remaining_cov_ratio
from .model import (
    HeadId,
    InterventionSpec,
    ModelBundle,
    ModelConfig,
    TraceSpec,
    forward,
    greedy_decode,
    load_model,
    save_model,
)
from .tasks import DemoMode, InstructionMode, Template, TaskWorld, build_prompt, build_world, sample_demos
from .train import TrainConfig, finetune_filter_part, grad_filter, pretrain_toy, train_filter
from .tvs_filter import TVSFilter, load_filter, save_filter

__version__ = "0.1.0"

__all__ = [
    'IclLabError',
    'SpecError',
    'NumericalError',
    'NumericalFailure',
    'DegenerateCloud',
    'InvalidIntervention',
    'ExperimentError',
    'ModelConfig',
    'ModelBundle',
    'HeadId',
    'TraceSpec',
    'InterventionSpec',
    'forward',
    'greedy_decode',
    'load_model',
    'save_model',
    'TVSFilter',
    'load_filter',
    'save_filter',
    'Template',
    'DemoMode',
    'InstructionMode',
    'TaskWorld',
    'build_world',
    'build_prompt',
    'sample_demos',
    'HiddenCloud',
    'read_dump',
    'write_dump',
    'TrainConfig',
    'train_filter',
    'finetune_filter_part',
    'grad_filter',
    'pretrain_toy',
    'eval_accuracy',
    'eval_cross_entropy',
    'run_prompts',
    'eccentricity',
    'covariance_flux',
    'remaining_cov_ratio',
    'enc_alignment',
    'effective_rank',
    'head_scan',
    'identify_dh',
    'induction_score',
    'select_ablation_set',
]
