"""
Hand-composed backward passes and the two training procedures:
toy-model pretraining and TVS filter training on a frozen model.
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterable, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from . import ops
from .config import get_settings, substream
from .errors import InsufficientPool, NumericalFailure, SequenceTooLong, SpecError
from .evaluation import eval_accuracy
from .model import (
    BlockCache,
    InterventionSpec,
    ModelBundle,
    ModelConfig,
    TraceSpec,
    block_forward,
    embed,
    forward_batch,
    init_params,
    layer_masks,
    unembed,
)
from .tasks import MAX_ALTERNATES, DemoMode, InstructionMode, PromptInstance, TaskWorld
from .tvs_filter import TVSFilter

logger = logging.getLogger(__name__)

FILTER_TENSORS = ("W_enc", "b_enc", "W_dec")
# freeze -> tensors that still train
FREEZE_TRAINABLE = {"none": FILTER_TENSORS, "enc": ("W_dec",), "dec": ("W_enc", "b_enc")}


# ==============================================================================
# CONFIGURATION AND OPTIMIZER
# ==============================================================================

class TrainConfig(BaseModel):
    """Filter training: Adam, summed grads over a pseudo batch, reshuffled epochs"""
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=1e-4, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    pseudo_batch: int = Field(default=32, ge=1)
    epochs: int = Field(default=4, ge=0)
    seed: int = 0
    reshuffle: bool = True


class PretrainConfig(TrainConfig):
    learning_rate: float = Field(default=1e-3, ge=0.0)
    batch_size: int = Field(default=32, ge=1)
    loss_on: Literal["labels", "all"] = "labels"
    init_std: float = Field(default=0.02, gt=0.0)
    grad_clip: Optional[float] = Field(default=1.0, gt=0.0)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros(p.shape) for k, p in params.items()},
                   v={k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              cfg: TrainConfig, trainable: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update; names outside `trainable` pass through untouched"""
    names = list(params) if trainable is None else [n for n in params if n in set(trainable)]
    state.step += 1
    t = state.step
    out = dict(params)
    for name in names:
        g = np.asarray(grads[name], dtype=np.float64)
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[name] / (1.0 - cfg.beta1 ** t)
        v_hat = state.v[name] / (1.0 - cfg.beta2 ** t)
        p = params[name]
        out[name] = (p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.dtype)
    return out


# ==============================================================================
# BACKWARD THROUGH THE FROZEN ARCHITECTURE
# ==============================================================================

def block_backward(model: ModelBundle, layer: int, dx_out: np.ndarray, cache: BlockCache,
                   need_param_grads: bool = True) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    W = lambda name: model.block(layer, name)  # noqa: E731
    da, dW_down = ops.linear_backward(dx_out, cache.a, W("W_down"), need_param_grads)
    du = ops.gelu_backward(da, cache.u)
    dn2, dW_up = ops.linear_backward(du, cache.n2, W("W_up"), need_param_grads)
    d_mid2, dg2 = ops.rmsnorm_backward(dn2, cache.norm2, need_param_grads)
    d_mid = dx_out + d_mid2
    dn1, attn_grads = ops.attention_backward(d_mid, cache.attn, W("W_Q"), W("W_K"), W("W_V"), W("W_O"),
                                             need_param_grads)
    dx1, dg1 = ops.rmsnorm_backward(dn1, cache.norm1, need_param_grads)
    grads: Dict[str, np.ndarray] = {}
    if need_param_grads:
        grads = {"ln1": dg1, "ln2": dg2, "W_up": dW_up, "W_down": dW_down, **attn_grads}
    return d_mid + dx1, grads


def unembed_backward(model: ModelBundle, dlogits: np.ndarray, cache: ops.NormCache,
                     need_param_grads: bool = True) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    normed = cache.x * cache.inv * cache.g
    dn, dW_U = ops.linear_backward(dlogits, normed, model["W_U"], need_param_grads)
    dx, dg = ops.rmsnorm_backward(dn, cache, need_param_grads)
    return dx, ({"W_U": dW_U, "ln_f": dg} if need_param_grads else {})


# ==============================================================================
# FILTER GRADIENTS
# ==============================================================================

@dataclass(frozen=True, eq=False)
class FilterExample:
    tokens: np.ndarray     # prompt followed by all but the last gold token
    resid: np.ndarray      # (T, d) residual after the injection layer, clean
    position: int          # injection position (last prompt token)
    targets: np.ndarray    # gold label ids

    @property
    def key(self) -> Tuple[int, int, int]:
        return len(self.tokens), self.position, len(self.targets)


class FilterGrad(NamedTuple):
    loss: float
    grads: Dict[str, np.ndarray]


def filter_params(filt: TVSFilter) -> Dict[str, np.ndarray]:
    return {name: getattr(filt, name) for name in FILTER_TENSORS}


def prepare_filter_examples(model: ModelBundle, layer: int, prompts: Sequence[PromptInstance],
                            batch_size: int = 64) -> List[FilterExample]:
    """Cache the clean residual after `layer`; the frozen prefix never depends on the filter"""
    if not 0 <= layer < model.config.n_layers:
        raise SpecError(f"layer {layer} outside [0, {model.config.n_layers})")
    examples: List[Optional[FilterExample]] = [None] * len(prompts)
    groups: Dict[Tuple[int, int], List[int]] = {}
    for i, p in enumerate(prompts):
        if not p.gold_ids:
            raise SpecError("filter training needs gold label tokens")
        groups.setdefault((p.length, len(p.gold_ids)), []).append(i)
    for idx in groups.values():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            tokens = np.array([prompts[i].token_ids + prompts[i].gold_ids[:-1] for i in chunk], dtype=np.int64)
            _, trace = forward_batch(model, tokens, TraceSpec(layers=(layer,), positions="all"))
            resid = trace.resid(layer)
            for row, i in enumerate(chunk):
                examples[i] = FilterExample(tokens=tokens[row], resid=resid[row], position=prompts[i].last_index,
                                            targets=np.array(prompts[i].gold_ids, dtype=np.int64))
    return examples


def _filter_batch(model: ModelBundle, filt: TVSFilter, batch: Sequence[FilterExample],
                  need_grads: bool = True) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Per-example losses and summed filter grads for examples sharing one key"""
    cfg = model.config
    layer, pos, n = filt.layer, batch[0].position, len(batch[0].targets)
    x = np.stack([ex.resid for ex in batch]).astype(model.dtype)
    h = x[:, pos].copy()
    e = h @ filt.W_enc + filt.b_enc
    x[:, pos] = (e @ filt.W_dec).astype(x.dtype)

    T = x.shape[1]
    masks = layer_masks(T, cfg.n_layers, layer, pos)
    caches = []
    for i in range(layer + 1, cfg.n_layers):
        x, cache = block_forward(model, i, x, masks[i])
        if not np.all(np.isfinite(x)):
            raise NumericalFailure("non-finite activations in filter training", layer=i)
        caches.append((i, cache))
    logits, fcache = unembed(model, x)

    V = logits.shape[-1]
    targets = np.stack([ex.targets for ex in batch])
    losses, probs = ops.cross_entropy(logits[:, pos:pos + n].reshape(-1, V), targets.reshape(-1))
    if not np.all(np.isfinite(losses)):
        raise NumericalFailure("non-finite filter loss", layer=cfg.n_layers - 1)
    per_example = losses.reshape(len(batch), n).mean(axis=1)
    if not need_grads:
        return per_example, {}

    dsel = ops.cross_entropy_backward(probs, targets.reshape(-1), np.full(probs.shape[0], 1.0 / n))
    dlogits = np.zeros_like(logits)
    dlogits[:, pos:pos + n] = dsel.reshape(len(batch), n, V)
    dx, _ = unembed_backward(model, dlogits, fcache, need_param_grads=False)
    for i, cache in reversed(caches):
        dx, _ = block_backward(model, i, dx, cache, need_param_grads=False)

    dh = dx[:, pos]
    de = dh @ filt.W_dec.T
    return per_example, {"W_enc": h.T @ de, "b_enc": de.sum(axis=0), "W_dec": e.T @ dh}


def accumulate_filter_grads(model: ModelBundle, filt: TVSFilter, examples: Sequence[FilterExample],
                            need_grads: bool = True) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Losses in input order and grads summed over all examples (fixed group order)"""
    groups: Dict[Tuple[int, int, int], List[int]] = {}
    for i, ex in enumerate(examples):
        groups.setdefault(ex.key, []).append(i)
    losses = np.zeros(len(examples))
    total = {name: np.zeros_like(getattr(filt, name)) for name in FILTER_TENSORS} if need_grads else {}
    for idx in groups.values():
        per_example, grads = _filter_batch(model, filt, [examples[i] for i in idx], need_grads)
        losses[idx] = per_example
        for name, g in grads.items():
            total[name] += g
    return losses, total


def grad_filter(model: ModelBundle, filt: TVSFilter, layer: int, prompt: PromptInstance,
                targets: Optional[Sequence[int]] = None) -> FilterGrad:
    """Mean label-token cross-entropy of one prompt and its filter gradients"""
    if targets is not None:
        prompt = replace(prompt, gold_ids=tuple(int(t) for t in targets))
    if layer != filt.layer:
        filt = replace(filt, layer=layer)
    examples = prepare_filter_examples(model, layer, [prompt])
    losses, grads = accumulate_filter_grads(model, filt, examples)
    return FilterGrad(loss=float(losses[0]), grads=grads)


# ==============================================================================
# FILTER TRAINING AND TRANSFER
# ==============================================================================

def fit_filter(model: ModelBundle, filt: TVSFilter, prompts: Sequence[PromptInstance], cfg: TrainConfig,
               trainable: Sequence[str] = FILTER_TENSORS,
               on_epoch: Optional[Callable[[int, float], None]] = None) -> TVSFilter:
    if cfg.epochs == 0 or not prompts:
        return filt
    examples = prepare_filter_examples(model, filt.layer, prompts)
    params = filter_params(filt)
    state = AdamState.zeros_like(params)
    rng = substream(cfg.seed, "shuffle")
    order = rng.permutation(len(examples))
    disable = not get_settings().progress
    for epoch in tqdm(range(cfg.epochs), desc=f"filter L{filt.layer} r{filt.r}", disable=disable, leave=False):
        if epoch and cfg.reshuffle:
            order = rng.permutation(len(examples))
        epoch_losses = []
        for s in range(0, len(order), cfg.pseudo_batch):
            losses, grads = accumulate_filter_grads(model, filt, [examples[i] for i in order[s:s + cfg.pseudo_batch]])
            grads = {name: g / cfg.pseudo_batch for name, g in grads.items()}
            params = adam_step(params, grads, state, cfg, trainable)
            filt = replace(filt, **params)
            epoch_losses.append(losses)
        mean_loss = float(np.mean(np.concatenate(epoch_losses)))
        logger.info("filter L%d r%d epoch %d/%d: loss %.4f", filt.layer, filt.r, epoch + 1, cfg.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return filt


def train_filter(model: ModelBundle, layer: int, rank: int, train_set: Sequence[PromptInstance],
                 val_set: Sequence[PromptInstance], cfg: TrainConfig = TrainConfig(),
                 label_map: Optional[Mapping[str, List[int]]] = None,
                 on_epoch: Optional[Callable[[int, float], None]] = None) -> Tuple[TVSFilter, float]:
    """Train a rank-r filter at `layer` on zero-shot prompts; returns it with its val accuracy"""
    d = model.config.d_model
    if not 1 <= rank <= d:
        raise SpecError(f"rank {rank} outside [1, {d}]")
    init = TVSFilter.random_init(d, rank, layer, substream(cfg.seed, "filter-init"), dtype=model.dtype,
                                 label_map=label_map)
    filt = fit_filter(model, init, train_set, cfg, on_epoch=on_epoch)
    return filt, eval_accuracy(model, val_set, InterventionSpec.inject(filt))


def finetune_filter_part(model: ModelBundle, filt: TVSFilter, freeze: str, new_labels: Mapping[str, List[int]],
                         train_set: Sequence[PromptInstance], val_set: Sequence[PromptInstance],
                         cfg: TrainConfig = TrainConfig(),
                         on_epoch: Optional[Callable[[int, float], None]] = None) -> Tuple[TVSFilter, float]:
    """Retrain the unfrozen part of a filter under a new verbalization"""
    if freeze not in FREEZE_TRAINABLE:
        raise SpecError(f"freeze must be one of {sorted(FREEZE_TRAINABLE)}, got {freeze!r}")
    filt = replace(filt, label_map={k: list(v) for k, v in new_labels.items()})
    filt = fit_filter(model, filt, train_set, cfg, FREEZE_TRAINABLE[freeze], on_epoch)
    return filt, eval_accuracy(model, val_set, InterventionSpec.inject(filt))


# ==============================================================================
# TOY PRETRAINING
# ==============================================================================

class CorpusConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_shots: int = Field(default=8, ge=0)
    mode_mix: Dict[str, float] = Field(default_factory=lambda: {"gold": 0.85, "unseen": 0.15})
    instruction_rate: float = Field(default=0.2, ge=0.0, le=1.0)

    @field_validator("mode_mix")
    @classmethod
    def _check_mix(cls, mix: Dict[str, float]) -> Dict[str, float]:
        if not mix or any(p < 0 for p in mix.values()) or sum(mix.values()) <= 0:
            raise ValueError("mode_mix needs non-negative weights with a positive sum")
        for name in mix:
            DemoMode.parse(name)
        return mix


def build_pretraining_corpus(world: TaskWorld, n: int, rng: np.random.Generator,
                             config: CorpusConfig = CorpusConfig()) -> List[PromptInstance]:
    """n prompts with k uniform in {0..max_shots}, mixed demo modes and occasional instructions"""
    modes = [DemoMode.parse(m) for m in config.mode_mix]
    weights = np.array(list(config.mode_mix.values()), dtype=np.float64)
    weights /= weights.sum()
    tasks = world.task_names
    corpus = []
    for _ in range(n):
        task = tasks[int(rng.integers(len(tasks)))]
        queries = world.query_examples(task)
        query = queries[int(rng.integers(len(queries)))]
        k = int(rng.integers(config.max_shots + 1))
        mode = modes[int(rng.choice(len(modes), p=weights))] if k else DemoMode.GOLD
        instruction = InstructionMode.NONE
        if rng.random() < config.instruction_rate:
            label_space_fits = len(world.task(task).labels) <= MAX_ALTERNATES
            instruction = InstructionMode.WITH_LABEL_SPACE if label_space_fits and rng.random() < 0.5 else InstructionMode.BASIC
        try:
            corpus.append(world.prompt(task, query, k, mode, rng, instruction))
        except InsufficientPool:
            corpus.append(world.prompt(task, query, k, DemoMode.GOLD, rng, instruction))
    return corpus


def _loss_mask(prompt: PromptInstance, loss_on: str) -> np.ndarray:
    """Positions t whose next-token prediction is trained"""
    T = prompt.length + len(prompt.gold_ids)
    mask = np.zeros(T - 1, dtype=bool)
    if loss_on == "all":
        mask[:] = True
        return mask
    for p in prompt.label_token_positions:
        mask[p - 1] = True
    mask[prompt.last_index:prompt.last_index + len(prompt.gold_ids)] = True
    return mask


def lm_loss_and_grads(model: ModelBundle, tokens: np.ndarray,
                      loss_mask: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean next-token cross-entropy over masked positions and grads for every tensor"""
    cfg = model.config
    B, T = tokens.shape
    x = embed(model, tokens)
    mask = layer_masks(T, cfg.n_layers, None, None)
    caches = []
    for i in range(cfg.n_layers):
        x, cache = block_forward(model, i, x, mask[i])
        caches.append(cache)
    logits, fcache = unembed(model, x)

    targets = tokens[:, 1:][loss_mask]
    losses, probs = ops.cross_entropy(logits[:, :-1][loss_mask], targets)
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise NumericalFailure("pretraining loss diverged")

    dlogits = np.zeros_like(logits)
    dlogits[:, :-1][loss_mask] = ops.cross_entropy_backward(probs, targets, np.full(len(targets), 1.0 / len(targets)))
    dx, grads = unembed_backward(model, dlogits, fcache)
    for i in reversed(range(cfg.n_layers)):
        dx, block_grads = block_backward(model, i, dx, caches[i])
        grads.update({f"blocks.{i}.{name}": g for name, g in block_grads.items()})
    grads["tok_emb"] = np.zeros_like(model["tok_emb"])
    np.add.at(grads["tok_emb"], tokens, dx)
    grads["pos_emb"] = np.zeros_like(model["pos_emb"])
    grads["pos_emb"][:T] = dx.sum(axis=0)
    return loss, grads


def _clip(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def pretrain_toy(cfg: ModelConfig, corpus: Sequence[PromptInstance], steps: int,
                 train_cfg: PretrainConfig = PretrainConfig(), vocab: Sequence[str] = (),
                 meta: Optional[Mapping] = None,
                 on_step: Optional[Callable[[int, float], None]] = None) -> ModelBundle:
    """Adam on same-length minibatches drawn from the corpus; deterministic given train_cfg.seed"""
    if steps < 0:
        raise SpecError("steps must be >= 0")
    params = init_params(cfg, substream(train_cfg.seed, "init"), train_cfg.init_std)
    model = ModelBundle(cfg, params, tuple(vocab), meta or {})
    if steps == 0:
        return model
    if not corpus:
        raise SpecError("empty pretraining corpus")

    buckets: Dict[int, List[int]] = {}
    for i, p in enumerate(corpus):
        length = p.length + len(p.gold_ids)
        if length > cfg.max_seq:
            raise SequenceTooLong(length, cfg.max_seq)
        buckets.setdefault(length, []).append(i)
    lengths = sorted(buckets)
    sizes = np.array([len(buckets[l]) for l in lengths], dtype=np.float64)
    masks = [_loss_mask(p, train_cfg.loss_on) for p in corpus]

    rng = substream(train_cfg.seed, "batches")
    state = AdamState.zeros_like(params)
    running = None
    for step in tqdm(range(steps), desc="pretrain", disable=not get_settings().progress):
        length = lengths[int(rng.choice(len(lengths), p=sizes / sizes.sum()))]
        idx = rng.choice(buckets[length], size=train_cfg.batch_size, replace=True)
        tokens = np.array([corpus[i].token_ids + corpus[i].gold_ids for i in idx], dtype=np.int64)
        loss_mask = np.stack([masks[i] for i in idx])
        loss, grads = lm_loss_and_grads(model, tokens, loss_mask)
        params = adam_step(params, _clip(grads, train_cfg.grad_clip), state, train_cfg)
        model = ModelBundle(cfg, params, model.vocab, model.meta)
        running = loss if running is None else 0.98 * running + 0.02 * loss
        if (step + 1) % 100 == 0 or step + 1 == steps:
            logger.info("pretrain step %d/%d: loss %.4f", step + 1, steps, running)
        if on_step is not None:
            on_step(step, loss)
    return model
