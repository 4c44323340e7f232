"""
Central finite-difference oracle for every hand-derived backward pass.

All checks run in float64 with h = 1e-3 and report the max-norm relative
error between analytic and numerical gradients.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .config import substream
from .model import ModelBundle, ModelConfig, init_params
from .tasks import PromptInstance
from .train import FILTER_TENSORS, accumulate_filter_grads, lm_loss_and_grads, prepare_filter_examples
from .tvs_filter import TVSFilter

logger = logging.getLogger(__name__)

DEFAULT_H = 1e-3
DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_error: float

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_rel_error <= tol


def rel_error(analytic: np.ndarray, numerical: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numerical))), 1e-12)
    return float(np.max(np.abs(analytic - numerical))) / scale


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_H,
                   indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """d f() / d x by central differences; x is perturbed in place and restored.
    With `indices`, only those entries are filled (the rest stay 0)."""
    grad = np.zeros(x.shape)
    for idx in (indices if indices is not None else np.ndindex(*x.shape)):
        orig = x[idx]
        x[idx] = orig + h
        f_plus = f()
        x[idx] = orig - h
        f_minus = f()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def _check(name: str, pairs) -> GradCheckReport:
    err = max(rel_error(a, n) for a, n in pairs)
    logger.debug("gradcheck %s: max rel error %.3e", name, err)
    return GradCheckReport(name, err)


# ==============================================================================
# PRIMITIVES
# ==============================================================================

def check_linear(rng: np.random.Generator, d: int = 32) -> GradCheckReport:
    x, W = rng.standard_normal((2, 4, d)), rng.standard_normal((d, d // 2))
    R = rng.standard_normal((2, 4, d // 2))
    f = lambda: float(np.sum(R * ops.linear(x, W)))  # noqa: E731
    dx, dW = ops.linear_backward(R, x, W)
    return _check("linear", [(dx, numerical_grad(f, x)), (dW, numerical_grad(f, W))])


def check_softmax(rng: np.random.Generator, d: int = 32) -> GradCheckReport:
    x, R = rng.standard_normal((3, d)), rng.standard_normal((3, d))
    f = lambda: float(np.sum(R * ops.softmax(x)))  # noqa: E731
    return _check("softmax", [(ops.softmax_backward(R, ops.softmax(x)), numerical_grad(f, x))])


def check_rmsnorm(rng: np.random.Generator, d: int = 32) -> GradCheckReport:
    x, g, R = rng.standard_normal((2, 3, d)), rng.standard_normal(d), rng.standard_normal((2, 3, d))
    f = lambda: float(np.sum(R * ops.rmsnorm(x, g, 1e-5)[0]))  # noqa: E731
    dx, dg = ops.rmsnorm_backward(R, ops.rmsnorm(x, g, 1e-5)[1])
    return _check("rmsnorm", [(dx, numerical_grad(f, x)), (dg, numerical_grad(f, g))])


def check_gelu(rng: np.random.Generator, d: int = 32) -> GradCheckReport:
    u, R = 2.0 * rng.standard_normal((4, d)), rng.standard_normal((4, d))
    f = lambda: float(np.sum(R * ops.gelu(u)))  # noqa: E731
    return _check("gelu", [(ops.gelu_backward(R, u), numerical_grad(f, u))])


def check_cross_entropy(rng: np.random.Generator, d: int = 32) -> GradCheckReport:
    logits = rng.standard_normal((6, d))
    targets = rng.integers(d, size=6)
    weights = rng.random(6)
    f = lambda: float(np.sum(weights * ops.cross_entropy(logits, targets)[0]))  # noqa: E731
    grad = ops.cross_entropy_backward(ops.cross_entropy(logits, targets)[1], targets, weights)
    return _check("cross_entropy", [(grad, numerical_grad(f, logits))])


def check_attention(rng: np.random.Generator, d: int = 32, n_heads: int = 4) -> GradCheckReport:
    T = 5
    x = rng.standard_normal((2, T, d))
    Ws = [rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(4)]
    mask = ops.self_only_row(ops.causal_mask(T), T - 1)
    head_mask = np.ones(d)
    head_mask[: d // n_heads] = 0.0
    R = rng.standard_normal((2, T, d))
    f = lambda: float(np.sum(R * ops.attention(x, *Ws, n_heads, mask, head_mask)[0]))  # noqa: E731
    _, cache = ops.attention(x, *Ws, n_heads, mask, head_mask)
    dx, grads = ops.attention_backward(R, cache, *Ws)
    pairs = [(dx, numerical_grad(f, x))]
    pairs += [(grads[name], numerical_grad(f, W)) for name, W in zip(("W_Q", "W_K", "W_V", "W_O"), Ws)]
    return _check("attention", pairs)


# ==============================================================================
# COMPOSED PATHS
# ==============================================================================

def _sample_indices(shape, rng: np.random.Generator, n: int) -> List[tuple]:
    flat = rng.choice(int(np.prod(shape)), size=min(n, int(np.prod(shape))), replace=False)
    return [tuple(int(i) for i in np.unravel_index(j, shape)) for j in np.sort(flat)]


def check_lm(rng: np.random.Generator, entries_per_tensor: int = 12) -> GradCheckReport:
    """Every pretraining parameter, sampled entries per tensor"""
    cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, vocab_size=11, max_seq=8)
    params = init_params(cfg, rng, std=0.3, dtype=np.float64)
    vocab = tuple(f"t{i}" for i in range(cfg.vocab_size))
    tokens = rng.integers(cfg.vocab_size, size=(2, 6))
    mask = rng.random((2, 5)) < 0.6
    mask[:, -1] = True
    loss = lambda: lm_loss_and_grads(ModelBundle(cfg, params, vocab), tokens, mask)[0]  # noqa: E731
    _, grads = lm_loss_and_grads(ModelBundle(cfg, params, vocab), tokens, mask)
    pairs = []
    for name, p in params.items():
        idx = _sample_indices(p.shape, rng, entries_per_tensor)
        numerical = numerical_grad(loss, p, indices=idx)
        picked = tuple(np.array(i) for i in zip(*idx))
        pairs.append((grads[name][picked], numerical[picked]))
    return _check("lm", pairs)


def check_filter_path(model: ModelBundle, filt: TVSFilter, prompts: Sequence[PromptInstance]) -> GradCheckReport:
    """Filter grads through blocked attention, final norm and unembedding"""
    model64, filt64 = model.astype(np.float64), filt.astype(np.float64)
    examples = prepare_filter_examples(model64, filt64.layer, prompts)
    f = lambda: float(np.sum(accumulate_filter_grads(model64, filt64, examples, need_grads=False)[0]))  # noqa: E731
    _, grads = accumulate_filter_grads(model64, filt64, examples)
    return _check("filter", [(grads[name], numerical_grad(f, getattr(filt64, name))) for name in FILTER_TENSORS])


def toy_filter_case(seed: int = 0, d: int = 32, rank: int = 4):
    """A random d-wide model, a filter at layer 0 and two prompts (one with a 2-token label)"""
    rng = substream(seed, "gradcheck")
    cfg = ModelConfig(d_model=d, n_layers=3, n_heads=4, vocab_size=13, max_seq=16)
    model = ModelBundle(cfg, init_params(cfg, rng, std=0.3, dtype=np.float64), tuple(f"t{i}" for i in range(13)))
    filt = TVSFilter.random_init(d, rank, 0, rng, dtype=np.float64)
    prompts = []
    for length, n_gold in ((6, 1), (5, 2)):
        ids = tuple(int(t) for t in rng.integers(13, size=length))
        gold = tuple(int(t) for t in rng.integers(13, size=n_gold))
        prompts.append(PromptInstance(token_ids=ids, last_index=length - 1, label_positions=(),
                                      label_token_positions=(), query_span=(0, length), demo_labels=(),
                                      mode="gold", k=0, instruction_mode="none", gold_label="", gold_ids=gold))
    return model, filt, prompts


def run_suite(seed: int = 0, d: int = 32) -> List[GradCheckReport]:
    rng = substream(seed, "gradcheck")
    reports = [check(rng, d) for check in (check_linear, check_softmax, check_rmsnorm, check_gelu,
                                           check_cross_entropy, check_attention)]
    reports.append(check_lm(rng))
    reports.append(check_filter_path(*toy_filter_case(seed, d)))
    for report in reports:
        logger.info("gradcheck %-14s %.3e", report.name, report.max_rel_error)
    return reports
