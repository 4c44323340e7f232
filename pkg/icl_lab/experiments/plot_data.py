"""
Tidy CSV plot data from a JSONL report, one file per panel.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import pandas as pd

from ..errors import SpecError, UnknownFigureKind

logger = logging.getLogger(__name__)

FACETS = ("task", "mode", "config")


@dataclass(frozen=True)
class Panel:
    name: str
    metrics: Tuple[str, ...]
    columns: Tuple[str, ...]      # coordinate columns, then "value" (or the metrics when wide)
    wide: bool = False            # one column per metric instead of one file per metric
    heads_only: bool = False


FIGURES: Dict[str, Tuple[Panel, ...]] = {
    "filter_sweep": (
        Panel("accuracy", ("val_accuracy",), ("layer", "rank")),
        Panel("effective_rank", ("effective_rank",), ("layer", "rank")),
        Panel("baselines", ("zero_shot_accuracy", "icl_accuracy"), ("metric",)),
    ),
    "metrics_vs_k": tuple(
        Panel(m, (m,), ("k", "layer"))
        for m in ("eccentricity", "covariance_flux", "remaining_cov_ratio", "principal_tvs_alignment", "accuracy")
    ),
    "metrics_vs_layer": tuple(
        Panel(m, (m,), ("layer", "k"))
        for m in ("eccentricity", "covariance_flux", "remaining_cov_ratio", "principal_tvs_alignment", "accuracy")
    ),
    "head_scan": (
        Panel("head_scan", ("d_flux", "d_ecc", "d_acc", "induction"), ("layer", "head"), wide=True, heads_only=True),
    ),
    "dh_ablation": (
        Panel("accuracy", ("accuracy",), ("condition", "trial")),
        Panel("controls", ("control_mean", "control_std"), ("metric",)),
    ),
    "verbalization": (
        Panel("transfer_accuracy", ("transfer_accuracy",), ("layer", "rank", "trained")),
    ),
    "fact_recall": (
        Panel("filter_ce", ("filter_ce",), ("layer", "rank")),
        Panel("baselines", ("zero_shot_ce", "icl_ce"), ("metric",)),
    ),
    "pca_export": (
        Panel("explained_ratio", ("explained_ratio",), ("layer", "k", "dim")),
    ),
}


def read_report(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SpecError(f"report {path} does not exist")
    with open(path, encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    return pd.DataFrame.from_records(records)


def _tidy_ints(frame: pd.DataFrame, columns: List[str]) -> pd.DataFrame:
    """Integer coordinates that picked up NaN (null layers, missing trials) stay integers"""
    for col in columns:
        series = frame[col]
        if pd.api.types.is_float_dtype(series):
            present = series.dropna()
            if len(present) and (present == present.round()).all():
                frame[col] = series.astype("Int64")
    return frame


def _panel_frames(df: pd.DataFrame, panel: Panel) -> List[Tuple[str, pd.DataFrame]]:
    """(file stem, frame) per metric and facet combination"""
    sub = df[df["metric"].isin(panel.metrics)] if "metric" in df.columns else df.iloc[0:0]
    if panel.heads_only and "head" in sub.columns:
        sub = sub[sub["head"].notna()]
    if sub.empty:
        columns = list(panel.columns) + (list(panel.metrics) if panel.wide else ["value"])
        return [(panel.name, pd.DataFrame(columns=columns))]
    facets = [f for f in FACETS if f in sub.columns and f not in panel.columns and sub[f].nunique() > 1]
    groups = [((), sub)] if not facets else list(sub.groupby(facets, sort=False))
    out = []
    for facet_values, group in groups:
        suffix = "".join(f"__{v}" for v in (facet_values if isinstance(facet_values, tuple) else (facet_values,)))
        coords = [c for c in panel.columns if c != "metric"]
        for c in coords:
            if c not in group.columns:
                group = group.assign(**{c: pd.NA})
        if panel.wide:
            frame = group.pivot_table(index=coords, columns="metric", values="value", sort=False, dropna=False)
            frame = frame.reindex(columns=list(panel.metrics)).reset_index()
            frame.columns.name = None
            out.append((f"{panel.name}{suffix}", _tidy_ints(frame, coords)))
        elif "metric" in panel.columns:
            out.append((f"{panel.name}{suffix}", group[["metric", "value"]].reset_index(drop=True)))
        else:
            for metric in panel.metrics:
                frame = group[group["metric"] == metric][coords + ["value"]].reset_index(drop=True)
                name = panel.name if len(panel.metrics) == 1 else f"{panel.name}_{metric}"
                out.append((f"{name}{suffix}", _tidy_ints(frame, coords)))
    return out


def emit_plot_data(report: Union[str, Path], figure_kind: str, out_dir: Union[str, Path]) -> List[Path]:
    """Write tidy CSVs for one figure kind; an empty report yields header-only files"""
    if figure_kind not in FIGURES:
        raise UnknownFigureKind(f"unknown figure kind {figure_kind!r}; expected one of {sorted(FIGURES)}")
    df = read_report(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for panel in FIGURES[figure_kind]:
        for stem, frame in _panel_frames(df, panel):
            path = out_dir / f"{figure_kind}_{stem}.csv"
            frame.to_csv(path, index=False)
            written.append(path)
    logger.info("wrote %d plot-data files for %s", len(written), figure_kind)
    return written
