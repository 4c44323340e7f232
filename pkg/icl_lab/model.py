"""
Minimal hooked decoder-only transformer.

Pre-norm RMSNorm blocks, learned absolute positions, causal multi-head
attention, GELU MLP, no biases, untied unembedding. One forward code path
serves clean runs, trace capture and the three interventions (filter injection
with context blocking, head ablation, residual perturbation).
"""
import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import ops
from .errors import (
    InvalidIntervention,
    MagicMismatch,
    MissingTrace,
    NonFiniteError,
    SequenceTooLong,
    ShapeMismatch,
    SpecError,
    TruncatedPayload,
)
from .tvs_filter import TVSFilter

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"TWB1"


# ==============================================================================
# CONFIGURATION AND WEIGHTS
# ==============================================================================

class ModelConfig(BaseModel):
    """Shape of the toy transformer"""
    model_config = ConfigDict(frozen=True)

    d_model: int = Field(default=128, ge=1)
    n_layers: int = Field(default=4, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=512, ge=1)
    vocab_size: int = Field(ge=1)
    max_seq: int = Field(default=128, ge=1)
    norm_eps: float = Field(default=1e-5, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _default_d_ff(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("d_ff") is None:
            data = {**data, "d_ff": 4 * int(data.get("d_model", 128))}
        return data

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class HeadId(NamedTuple):
    layer: int
    head: int

    def __str__(self) -> str:
        return f"L{self.layer}H{self.head}"


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    d, f = cfg.d_model, cfg.d_ff
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["tok_emb"] = (cfg.vocab_size, d)
    shapes["pos_emb"] = (cfg.max_seq, d)
    for i in range(cfg.n_layers):
        shapes[f"blocks.{i}.ln1"] = (d,)
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[f"blocks.{i}.{name}"] = (d, d)
        shapes[f"blocks.{i}.ln2"] = (d,)
        shapes[f"blocks.{i}.W_up"] = (d, f)
        shapes[f"blocks.{i}.W_down"] = (f, d)
    shapes["ln_f"] = (d,)
    shapes["W_U"] = (d, cfg.vocab_size)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02,
                dtype=np.float32) -> Dict[str, np.ndarray]:
    """Normal init; residual-writing matrices scaled down by sqrt(2 * n_layers)"""
    out_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    params: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("ln1", "ln2", "ln_f")):
            params[name] = np.ones(shape, dtype=dtype)
            continue
        scale = std * (out_scale if name.endswith(("W_O", "W_down")) else 1.0)
        params[name] = (rng.standard_normal(shape) * scale).astype(dtype)
    return params


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Config + read-only named weights + vocabulary"""
    config: ModelConfig
    params: Mapping[str, np.ndarray]
    vocab: Tuple[str, ...]
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        frozen: Dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            if name not in self.params:
                raise ShapeMismatch(f"missing tensor {name!r}")
            arr = np.array(self.params[name], copy=True)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        extra = set(self.params) - set(expected)
        if extra:
            raise ShapeMismatch(f"unexpected tensors {sorted(extra)}")
        if len(self.vocab) != self.config.vocab_size:
            raise ShapeMismatch(f"vocabulary has {len(self.vocab)} tokens, config says {self.config.vocab_size}")
        object.__setattr__(self, "params", MappingProxyType(frozen))
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "meta", dict(self.meta))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def block(self, layer: int, name: str) -> np.ndarray:
        return self.params[f"blocks.{layer}.{name}"]

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    @cached_property
    def token_index(self) -> Dict[str, int]:
        return {tok: i for i, tok in enumerate(self.vocab)}

    def astype(self, dtype) -> "ModelBundle":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def all_heads(self) -> List[HeadId]:
        return [HeadId(l, h) for l in range(self.config.n_layers) for h in range(self.config.n_heads)]


# ==============================================================================
# TRACES AND INTERVENTIONS
# ==============================================================================

TRACE_KINDS = ("resid", "attn", "head_out", "attn_out")


@dataclass(frozen=True)
class TraceSpec:
    """What to capture. Internals (attention, head outputs, sublayer outputs)
    are captured on `internal_layers` (all layers when None)."""
    layers: Tuple[int, ...] = ()
    positions: str = "last"
    attention: bool = False
    head_outputs: bool = False
    sublayer_outputs: bool = False
    internal_layers: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.positions not in ("last", "all"):
            raise SpecError(f"positions must be 'last' or 'all', got {self.positions!r}")

    def wants_internal(self, layer: int) -> bool:
        return self.internal_layers is None or layer in self.internal_layers


class Trace:
    """Captured tensors keyed by (layer, kind)"""

    def __init__(self, data: Optional[Dict[Tuple[int, str], np.ndarray]] = None):
        self._data = dict(data or {})

    def __getitem__(self, key: Tuple[int, str]) -> np.ndarray:
        try:
            return self._data[key]
        except KeyError:
            raise MissingTrace(key) from None

    def __contains__(self, key) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def keys(self):
        return self._data.keys()

    def resid(self, layer: int) -> np.ndarray:
        return self[(layer, "resid")]

    def attention(self, layer: int) -> np.ndarray:
        return self[(layer, "attn")]

    def select(self, index: int) -> "Trace":
        """Drop the batch axis"""
        return Trace({k: v[index] for k, v in self._data.items()})


@dataclass(frozen=True, eq=False)
class FilterInjection:
    filter: TVSFilter
    layer: int
    position: Optional[int] = None  # None: last position of the input


@dataclass(frozen=True, eq=False)
class ResidualPerturbation:
    layer: int
    position: int
    delta: np.ndarray


@dataclass(frozen=True, eq=False)
class InterventionSpec:
    injection: Optional[FilterInjection] = None
    ablate: FrozenSet[HeadId] = frozenset()
    perturbation: Optional[ResidualPerturbation] = None

    @classmethod
    def inject(cls, filt: TVSFilter, layer: Optional[int] = None,
               position: Optional[int] = None) -> "InterventionSpec":
        return cls(injection=FilterInjection(filt, filt.layer if layer is None else layer, position))

    @classmethod
    def ablation(cls, heads: Iterable[HeadId]) -> "InterventionSpec":
        return cls(ablate=frozenset(HeadId(*h) for h in heads))

    def pinned(self, position: int) -> "InterventionSpec":
        """Fix the injection position (used while decoding past the prompt)"""
        if self.injection is None or self.injection.position is not None:
            return self
        return replace(self, injection=replace(self.injection, position=position))

    def validate(self, cfg: ModelConfig, T: int) -> None:
        if self.injection is not None:
            inj = self.injection
            if not 0 <= inj.layer < cfg.n_layers:
                raise InvalidIntervention(f"injection layer {inj.layer} outside [0, {cfg.n_layers})")
            if inj.filter.d != cfg.d_model:
                raise InvalidIntervention(f"filter width {inj.filter.d} != d_model {cfg.d_model}")
            if inj.position is not None and not 0 <= inj.position < T:
                raise InvalidIntervention(f"injection position {inj.position} outside sequence of length {T}")
        for head in self.ablate:
            if not (0 <= head.layer < cfg.n_layers and 0 <= head.head < cfg.n_heads):
                raise InvalidIntervention(f"head {head} does not exist")
        if self.perturbation is not None:
            p = self.perturbation
            if not 0 <= p.layer < cfg.n_layers or not 0 <= p.position < T:
                raise InvalidIntervention(f"perturbation at layer {p.layer}, position {p.position} is out of range")
            if np.shape(p.delta) != (cfg.d_model,):
                raise InvalidIntervention(f"perturbation delta must have shape ({cfg.d_model},)")


NO_INTERVENTION = InterventionSpec()


# ==============================================================================
# FORWARD BUILDING BLOCKS (shared with train.py)
# ==============================================================================

@dataclass
class BlockCache:
    norm1: ops.NormCache
    attn: ops.AttnCache
    norm2: ops.NormCache
    n2: np.ndarray
    u: np.ndarray
    a: np.ndarray
    attn_out: np.ndarray


def embed(model: ModelBundle, tokens: np.ndarray) -> np.ndarray:
    T = tokens.shape[-1]
    return model["tok_emb"][tokens] + model["pos_emb"][:T]


def layer_masks(T: int, n_layers: int, injection_layer: Optional[int],
                position: Optional[int]) -> List[np.ndarray]:
    """Causal masks; above the injection layer `position` attends only to itself"""
    base = ops.causal_mask(T)
    if injection_layer is None:
        return [base] * n_layers
    blocked = ops.self_only_row(base, position)
    return [blocked if i > injection_layer else base for i in range(n_layers)]


def head_masks(cfg: ModelConfig, ablate: Iterable[HeadId], dtype) -> Dict[int, np.ndarray]:
    masks: Dict[int, np.ndarray] = {}
    dh = cfg.d_head
    for head in ablate:
        mask = masks.setdefault(head.layer, np.ones(cfg.d_model, dtype=dtype))
        mask[head.head * dh:(head.head + 1) * dh] = 0
    return masks


def block_forward(model: ModelBundle, layer: int, x: np.ndarray, mask: np.ndarray,
                  head_mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, BlockCache]:
    cfg = model.config
    n1, c1 = ops.rmsnorm(x, model.block(layer, "ln1"), cfg.norm_eps)
    attn_out, ca = ops.attention(
        n1, model.block(layer, "W_Q"), model.block(layer, "W_K"), model.block(layer, "W_V"),
        model.block(layer, "W_O"), cfg.n_heads, mask, head_mask,
    )
    x_mid = x + attn_out
    n2, c2 = ops.rmsnorm(x_mid, model.block(layer, "ln2"), cfg.norm_eps)
    u = n2 @ model.block(layer, "W_up")
    a = ops.gelu(u)
    x_out = x_mid + a @ model.block(layer, "W_down")
    return x_out, BlockCache(norm1=c1, attn=ca, norm2=c2, n2=n2, u=u, a=a, attn_out=attn_out)


def apply_filter(x: np.ndarray, filt: TVSFilter, position: int) -> np.ndarray:
    out = x.copy()
    out[:, position] = filt.apply(x[:, position]).astype(x.dtype)
    return out


def unembed(model: ModelBundle, x: np.ndarray) -> Tuple[np.ndarray, ops.NormCache]:
    n, cache = ops.rmsnorm(x, model["ln_f"], model.config.norm_eps)
    return n @ model["W_U"], cache


def _capture(data: Dict, spec: TraceSpec, layer: int, cache: BlockCache, d_head: int) -> None:
    if not spec.wants_internal(layer):
        return
    if spec.attention:
        data[(layer, "attn")] = cache.attn.probs.copy()
    if spec.head_outputs:
        z = cache.attn.z
        data[(layer, "head_out")] = z.reshape(z.shape[0], z.shape[1], -1, d_head).copy()
    if spec.sublayer_outputs:
        data[(layer, "attn_out")] = cache.attn_out.copy()


def _validate_tokens(model: ModelBundle, tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 2:
        raise SpecError(f"token batch must be 2-D, got shape {arr.shape}")
    T = arr.shape[1]
    if T == 0:
        raise SpecError("empty token sequence")
    if T > model.config.max_seq:
        raise SequenceTooLong(T, model.config.max_seq)
    if arr.size and (arr.min() < 0 or arr.max() >= model.config.vocab_size):
        raise SpecError("token id outside the vocabulary")
    return arr


def forward_batch(model: ModelBundle, tokens, trace: Optional[TraceSpec] = None,
                  intervention: Optional[InterventionSpec] = None) -> Tuple[np.ndarray, Trace]:
    """Batched forward over equal-length sequences: (B, T) -> (B, T, V) logits"""
    tokens = _validate_tokens(model, tokens)
    cfg = model.config
    intervention = intervention or NO_INTERVENTION
    trace = trace or TraceSpec()
    T = tokens.shape[1]
    intervention.validate(cfg, T)

    inj = intervention.injection
    inj_pos = None
    if inj is not None:
        inj_pos = T - 1 if inj.position is None else inj.position
    masks = layer_masks(T, cfg.n_layers, inj.layer if inj else None, inj_pos)
    hmasks = head_masks(cfg, intervention.ablate, model.dtype)
    pert = intervention.perturbation

    data: Dict[Tuple[int, str], np.ndarray] = {}
    x = embed(model, tokens)
    for i in range(cfg.n_layers):
        x, cache = block_forward(model, i, x, masks[i], hmasks.get(i))
        _capture(data, trace, i, cache, cfg.d_head)
        if inj is not None and i == inj.layer:
            x = apply_filter(x, inj.filter, inj_pos)
        if pert is not None and i == pert.layer:
            x = x.copy()
            x[:, pert.position] += np.asarray(pert.delta, dtype=x.dtype)
        if i in trace.layers:
            data[(i, "resid")] = (x[:, -1] if trace.positions == "last" else x).copy()
    logits, _ = unembed(model, x)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("forward pass produced non-finite logits")
    return logits, Trace(data)


# ==============================================================================
# PUBLIC OPERATIONS
# ==============================================================================

def forward(model: ModelBundle, tokens: Sequence[int], trace: Optional[TraceSpec] = None,
            intervention: Optional[InterventionSpec] = None) -> Tuple[np.ndarray, Trace]:
    """Single sequence: (T,) -> (T, V) logits and its Trace"""
    logits, tr = forward_batch(model, np.asarray(tokens, dtype=np.int64)[None, :], trace, intervention)
    return logits[0], tr.select(0)


def decode_batch(model: ModelBundle, tokens, n_steps: int, trace: Optional[TraceSpec] = None,
                 intervention: Optional[InterventionSpec] = None) -> Tuple[np.ndarray, Trace]:
    """Greedy decoding for equal-length prompts; the Trace is from the first step"""
    if n_steps < 1:
        raise SpecError("n_steps must be >= 1")
    seq = _validate_tokens(model, tokens)
    intervention = (intervention or NO_INTERVENTION).pinned(seq.shape[1] - 1)
    first_trace = Trace()
    emitted = []
    for step in range(n_steps):
        logits, tr = forward_batch(model, seq, trace if step == 0 else None, intervention)
        if step == 0:
            first_trace = tr
        # argmax returns the first maximum: ties go to the lowest token id
        nxt = np.argmax(logits[:, -1], axis=-1)
        emitted.append(nxt)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return np.stack(emitted, axis=1), first_trace


def decode_with_trace(model: ModelBundle, tokens: Sequence[int], n_steps: int,
                      trace: Optional[TraceSpec] = None,
                      intervention: Optional[InterventionSpec] = None) -> Tuple[List[int], Trace]:
    ids, tr = decode_batch(model, np.asarray(tokens, dtype=np.int64)[None, :], n_steps, trace, intervention)
    return [int(i) for i in ids[0]], tr.select(0)


def greedy_decode(model: ModelBundle, tokens: Sequence[int], n_steps: int,
                  intervention: Optional[InterventionSpec] = None) -> List[int]:
    return decode_with_trace(model, tokens, n_steps, None, intervention)[0]


def head_contribution(model: ModelBundle, tokens: Sequence[int], head: HeadId) -> np.ndarray:
    """That head's additive share of the attention sublayer output, (T, d)"""
    cfg = model.config
    head = HeadId(*head)
    if not (0 <= head.layer < cfg.n_layers and 0 <= head.head < cfg.n_heads):
        raise InvalidIntervention(f"head {head} does not exist")
    _, tr = forward(model, tokens, TraceSpec(head_outputs=True, internal_layers=(head.layer,)))
    z = tr[(head.layer, "head_out")]
    dh = cfg.d_head
    return z[:, head.head] @ model.block(head.layer, "W_O")[head.head * dh:(head.head + 1) * dh]


# ==============================================================================
# TWB1 CONTAINER
# ==============================================================================

def save_model(model: ModelBundle, path: Union[str, Path]) -> Path:
    path = Path(path)
    if model.dtype != np.float32:
        logger.warning("saving a %s model as f32; the round trip will not be bit-exact", model.dtype)
    manifest = {}
    chunks = []
    offset = 0
    for name, shape in param_shapes(model.config).items():
        raw = np.ascontiguousarray(model[name], dtype="<f4").tobytes()
        manifest[name] = {"dtype": "f32", "shape": list(shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": model.config.model_dump(), "tensors": manifest,
         "vocab": list(model.vocab), "meta": dict(model.meta)},
        sort_keys=True,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(WEIGHTS_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks))
    return path


def load_model(path: Union[str, Path]) -> ModelBundle:
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise MagicMismatch(WEIGHTS_MAGIC, blob[:4])
    if len(blob) < 8:
        raise TruncatedPayload("weight header length missing")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise TruncatedPayload("weight header truncated")
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    payload = memoryview(blob)[8 + hlen:]
    expected = param_shapes(cfg)
    params: Dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        entry = header["tensors"].get(name)
        if entry is None:
            raise ShapeMismatch(f"manifest lacks tensor {name!r}")
        if tuple(entry["shape"]) != shape:
            raise ShapeMismatch(f"{name}: manifest shape {tuple(entry['shape'])}, config implies {shape}")
        if entry["length"] != 4 * int(np.prod(shape)):
            raise ShapeMismatch(f"{name}: {entry['length']} bytes cannot hold shape {shape}")
        start, stop = entry["offset"], entry["offset"] + entry["length"]
        if stop > len(payload):
            raise TruncatedPayload(f"{name}: payload ends at byte {len(payload)}, tensor needs {stop}")
        params[name] = np.frombuffer(payload[start:stop], dtype="<f4").astype(np.float32).reshape(shape)
    return ModelBundle(config=cfg, params=params, vocab=tuple(header["vocab"]), meta=header.get("meta", {}))
