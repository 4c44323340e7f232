"""
Attention-head analysis: induction scores, single-head ablation scans,
denoising-head selection, cross-task overlap, matched random controls and
accuracy under multi-head ablation.
"""
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DegenerateCloud, InvalidIntervention, SpecError
from .evaluation import PromptRun, eval_accuracy, run_prompts
from .metrics import covariance_flux, eccentricity
from .model import HeadId, InterventionSpec, ModelBundle
from .tasks import PromptInstance
from .tvs_filter import TVSFilter
from .workers import parallel_map

logger = logging.getLogger(__name__)

DH_THRESHOLD = 0.035
ABLATION_THRESHOLD = 0.05


@dataclass
class HeadScanRow:
    head: HeadId
    d_ecc: Optional[float]
    d_flux: Optional[float]
    d_acc: float
    induction: float
    acc_absolute: bool = False   # clean accuracy was 0: d_acc is an absolute change
    degenerate: bool = False     # ablated cloud had no variance: d_ecc/d_flux unavailable

    def as_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["layer"], out["head"] = self.head.layer, self.head.head
        return out


@dataclass
class HeadScanReport:
    layer: int
    read_layer: int
    clean: Dict[str, float]
    rows: List[HeadScanRow] = field(default_factory=list)

    def flux_changes(self) -> Dict[HeadId, float]:
        return {r.head: r.d_flux for r in self.rows if r.d_flux is not None}


@dataclass(frozen=True)
class DHSelection:
    dh_set: FrozenSet[HeadId]
    anti_dh_set: FrozenSet[HeadId]
    theta: float
    layers: tuple

    def as_dict(self) -> Dict[str, Any]:
        return {"dh": sorted(str(h) for h in self.dh_set), "anti_dh": sorted(str(h) for h in self.anti_dh_set),
                "theta": self.theta, "layers": list(self.layers)}


def relative_change(ablated: float, clean: float) -> float:
    if clean <= 0:
        raise SpecError(f"relative change needs a positive clean metric, got {clean}")
    return (ablated - clean) / clean


# ==============================================================================
# INDUCTION
# ==============================================================================

def induction_score(attention: np.ndarray, prompt: PromptInstance, head: HeadId) -> float:
    """Attention mass from the last token onto every demonstration label token.

    `attention` is either a layer's full map (H, T, T) or its last-token rows (H, T).
    """
    if not prompt.label_token_positions:
        return 0.0
    rows = attention[:, prompt.last_index, :] if attention.ndim == 3 else attention
    return float(np.sum(rows[HeadId(*head).head, list(prompt.label_token_positions)]))


# ==============================================================================
# SCANS
# ==============================================================================

def _cloud_metrics(run: PromptRun, read_layer: int, filt: TVSFilter, k: int) -> Dict[str, float]:
    cloud = run.cloud(read_layer, k, "scan")
    return {"eccentricity": eccentricity(cloud),
            "covariance_flux": covariance_flux(cloud, filt),
            "accuracy": run.accuracy}


def head_scan(model: ModelBundle, layer: int, prompts: Sequence[PromptInstance], filt: TVSFilter,
              read_layer: Optional[int] = None, workers: Optional[int] = None) -> HeadScanReport:
    """Ablate each head of `layer` alone and compare metrics with the clean run.

    Clouds are read after `read_layer` (default: the ablated layer itself); `filt`
    must be the filter trained for that read layer.
    """
    cfg = model.config
    read_layer = layer if read_layer is None else read_layer
    if not 0 <= layer < cfg.n_layers or not layer <= read_layer < cfg.n_layers:
        raise SpecError(f"cannot read layer {read_layer} after ablating layer {layer}")
    if filt.layer != read_layer:
        raise SpecError(f"flux filter is for layer {filt.layer}, clouds come from layer {read_layer}")
    k = prompts[0].k if prompts else 0

    clean_run = run_prompts(model, prompts, layers=(read_layer,), attention_layers=(layer,))
    clean = _cloud_metrics(clean_run, read_layer, filt, k)
    induction = {
        h: float(np.mean([induction_score(rows, p, HeadId(layer, h))
                          for rows, p in zip(clean_run.last_attention[layer], prompts)]))
        for h in range(cfg.n_heads)
    }

    def scan_one(h: int) -> HeadScanRow:
        head = HeadId(layer, h)
        run = run_prompts(model, prompts, layers=(read_layer,), intervention=InterventionSpec.ablation({head}),
                          workers=1)
        acc_absolute = clean["accuracy"] <= 0
        d_acc = run.accuracy - clean["accuracy"] if acc_absolute else relative_change(run.accuracy, clean["accuracy"])
        try:
            ablated = _cloud_metrics(run, read_layer, filt, k)
        except DegenerateCloud as e:
            logger.warning("head %s: %s", head, e)
            return HeadScanRow(head, None, None, d_acc, induction[h], acc_absolute, degenerate=True)
        return HeadScanRow(
            head,
            relative_change(ablated["eccentricity"], clean["eccentricity"]),
            relative_change(ablated["covariance_flux"], clean["covariance_flux"]),
            d_acc,
            induction[h],
            acc_absolute,
        )

    rows = parallel_map(scan_one, range(cfg.n_heads), workers)
    logger.info("scanned layer %d (read %d): clean flux %.4f, ecc %.4f, acc %.3f",
                layer, read_layer, clean["covariance_flux"], clean["eccentricity"], clean["accuracy"])
    return HeadScanReport(layer=layer, read_layer=read_layer, clean=clean, rows=rows)


FluxSource = Union[HeadScanReport, Iterable[HeadScanReport], Mapping[HeadId, float]]


def _flux_items(source: FluxSource) -> List[Tuple[HeadId, float]]:
    """(head, flux change) pairs from scan reports or a plain head -> change mapping"""
    if isinstance(source, Mapping):
        return [(HeadId(*h), float(c)) for h, c in source.items() if c is not None]
    if isinstance(source, HeadScanReport):
        source = [source]
    return [(row.head, row.d_flux) for report in source for row in report.rows if row.d_flux is not None]


def identify_dh(source: FluxSource, theta: float = DH_THRESHOLD) -> DHSelection:
    """Heads whose ablation moves covariance flux by at least theta either way"""
    items = _flux_items(source)
    dh, anti = set(), set()
    for head, change in items:
        if change <= -theta and change < 0:
            dh.add(head)
        elif change >= theta and change > 0:
            anti.add(head)
    if isinstance(source, HeadScanReport):
        layers = (source.layer,)
    else:
        layers = tuple(sorted({head.layer for head, _ in items}))
    return DHSelection(frozenset(dh), frozenset(anti), theta, layers)


def select_ablation_set(source: FluxSource, theta: float = ABLATION_THRESHOLD) -> FrozenSet[HeadId]:
    """All scanned heads whose flux relative change is below -theta"""
    return frozenset(head for head, change in _flux_items(source) if change < -theta)


def bottom_heads(source: FluxSource, K: float = 0.01) -> FrozenSet[HeadId]:
    """Bottom ceil(K * scanned) heads by flux change, most negative first (at least one)"""
    items = sorted(_flux_items(source), key=lambda item: (item[1], item[0]))
    if not items:
        return frozenset()
    n = max(1, math.ceil(K * len(items)))
    return frozenset(head for head, _ in items[:n])


def dh_overlap(scan_a: FluxSource, scan_b: FluxSource, K: float = 0.01) -> int:
    """|D_a & D_b| for the bottom-K flux-change head sets of two tasks"""
    return len(bottom_heads(scan_a, K) & bottom_heads(scan_b, K))


def matched_random_heads(ablation_set: Iterable[HeadId], rng: np.random.Generator, trials: int,
                         n_heads: int) -> List[FrozenSet[HeadId]]:
    """Random head sets with the same per-layer counts as ablation_set"""
    counts = Counter(HeadId(*h).layer for h in ablation_set)
    for layer, count in counts.items():
        if count > n_heads:
            raise InvalidIntervention(f"{count} heads requested in layer {layer}, which has {n_heads}")
    controls = []
    for _ in range(trials):
        chosen = set()
        for layer in sorted(counts):
            chosen.update(HeadId(layer, int(h)) for h in rng.choice(n_heads, size=counts[layer], replace=False))
        controls.append(frozenset(chosen))
    return controls


def ablated_accuracy(model: ModelBundle, heads: Iterable[HeadId],
                     prompt_sets: Mapping[str, Sequence[PromptInstance]],
                     workers: Optional[int] = None) -> Dict[str, float]:
    """Open-end accuracy per demo configuration with every listed head zeroed"""
    intervention = InterventionSpec.ablation(heads)
    return {config: eval_accuracy(model, prompts, intervention, workers) for config, prompts in prompt_sets.items()}


def attention_export(model: ModelBundle, prompts: Sequence[PromptInstance],
                     heads: Sequence[HeadId]) -> pd.DataFrame:
    """Last-token attention rows of the given heads, one row per (prompt, head, position)"""
    layers = sorted({HeadId(*h).layer for h in heads})
    run = run_prompts(model, prompts, attention_layers=layers)
    records = []
    for i, prompt in enumerate(prompts):
        labels = set(prompt.label_token_positions)
        for head in map(lambda h: HeadId(*h), heads):
            weights = run.last_attention[head.layer][i][head.head]
            for pos, w in enumerate(weights):
                records.append({"prompt_id": i, "layer": head.layer, "head": head.head, "position": pos,
                                "token": model.vocab[prompt.token_ids[pos]], "weight": float(w),
                                "is_label": pos in labels})
    return pd.DataFrame.from_records(
        records, columns=["prompt_id", "layer", "head", "position", "token", "weight", "is_label"])
