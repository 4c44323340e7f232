"""
Measurements over hidden-state clouds: eccentricity, covariance flux through
a filter, remaining covariance ratio, encoder alignment, effective rank and
PCA projections for plotting.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import DegenerateCloud, InvalidConfig, NumericalFailure, SpecError
from .hidden_io import HiddenCloud
from .linalg import DEGENERATE_VARIANCE, covariance, nuclear_norm, orthonormal_basis, pca, projection_norm_ratios, svd, sym_eig
from .tvs_filter import TVSFilter

logger = logging.getLogger(__name__)

NUCLEAR_TRACE_TOL = 1e-8


@dataclass(frozen=True)
class MetricRow:
    eccentricity: float
    covariance_flux: float
    remaining_cov_ratio: float
    layer: int
    k: int
    mode: str

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _cloud_covariance(cloud: HiddenCloud) -> np.ndarray:
    cov = covariance(cloud.matrix)
    total = float(np.trace(cov))
    if total < DEGENERATE_VARIANCE:
        raise DegenerateCloud(f"total variance {total:.3e} at layer {cloud.layer}, k={cloud.k}, mode={cloud.mode}")
    return cov


def _psd_nuclear(cov: np.ndarray) -> float:
    """Nuclear norm via SVD, checked against the trace"""
    nuc = nuclear_norm(cov)
    trace = float(np.trace(cov))
    if abs(nuc - trace) > NUCLEAR_TRACE_TOL * max(1.0, abs(trace)):
        raise NumericalFailure(f"nuclear norm {nuc:.12g} disagrees with trace {trace:.12g}")
    return nuc


def _spectrum(cov: np.ndarray) -> np.ndarray:
    return np.clip(sym_eig(cov).eigenvalues, 0.0, None)


def eccentricity(cloud: HiddenCloud) -> float:
    """Share of total variance on the first principal axis"""
    cov = _cloud_covariance(cloud)
    return float(_spectrum(cov)[0] / np.trace(cov))


def covariance_flux(cloud: HiddenCloud, filt: TVSFilter, allow_layer_mismatch: bool = False) -> float:
    """||Cov[H W_enc W_dec]||_* / ||Cov[H]||_* (the encoder bias cancels in the covariance)"""
    if cloud.layer != filt.layer:
        if not allow_layer_mismatch:
            raise InvalidConfig(f"cloud from layer {cloud.layer} measured with a layer-{filt.layer} filter")
        logger.warning("covariance flux: cloud layer %d, filter layer %d", cloud.layer, filt.layer)
    if filt.d != cloud.d:
        raise SpecError(f"filter width {filt.d} != cloud width {cloud.d}")
    cov = _cloud_covariance(cloud)
    M = filt.map_matrix()
    filtered = M.T @ cov @ M
    return _psd_nuclear(0.5 * (filtered + filtered.T)) / _psd_nuclear(cov)


def remaining_cov_ratio(cloud: HiddenCloud, r: int) -> float:
    """Variance left outside the top-r principal components"""
    if not 0 <= r <= cloud.d:
        raise SpecError(f"r must be in [0, {cloud.d}], got {r}")
    spectrum = _spectrum(_cloud_covariance(cloud))
    return float(max(0.0, 1.0 - spectrum[:r].sum() / spectrum.sum()))


def enc_alignment(filt: TVSFilter, cloud: HiddenCloud, m: int = 64) -> List[float]:
    """For each left singular vector of W_enc, the norm kept after projecting onto the top-m PCs"""
    if not 1 <= m <= cloud.d:
        raise SpecError(f"m must be in [1, {cloud.d}], got {m}")
    pcs = pca(cloud.matrix, m).components.T
    basis = orthonormal_basis(filt.W_enc.astype(np.float64))
    if basis.shape[1] == 0:
        return []
    return [float(v) for v in projection_norm_ratios(basis, pcs)]


def principal_tvs_alignment(cloud: HiddenCloud, filt: TVSFilter) -> float:
    """Norm of the first principal direction kept inside the column space of W_enc"""
    first = pca(cloud.matrix, 1).components.T
    basis = orthonormal_basis(filt.W_enc.astype(np.float64))
    if basis.shape[1] == 0:
        return 0.0
    return float(projection_norm_ratios(first, basis)[0])


def effective_rank(filt: TVSFilter, tol: Optional[float] = None) -> int:
    """Singular values of W_enc W_dec above tol (default 1e-3 * sigma_max)"""
    _, S, _ = svd(filt.map_matrix())
    if not S.size or S[0] == 0.0:
        return 0
    threshold = 1e-3 * S[0] if tol is None else tol
    return int(np.sum(S > threshold))


def measure_cloud(cloud: HiddenCloud, filt: TVSFilter, r: Optional[int] = None,
                  allow_layer_mismatch: bool = False) -> MetricRow:
    return MetricRow(
        eccentricity=eccentricity(cloud),
        covariance_flux=covariance_flux(cloud, filt, allow_layer_mismatch),
        remaining_cov_ratio=remaining_cov_ratio(cloud, filt.r if r is None else r),
        layer=cloud.layer,
        k=cloud.k,
        mode=cloud.mode,
    )


def pca_projection(cloud: HiddenCloud, dims: Sequence[int] = (1, 2, 3),
                   labels: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Coordinates on the selected (1-based) principal components, one row per point"""
    dims = list(dims)
    if not dims or min(dims) < 1 or max(dims) > cloud.d:
        raise SpecError(f"dims must lie in [1, {cloud.d}], got {dims}")
    if labels is not None and len(labels) != cloud.n:
        raise SpecError(f"{len(labels)} labels for {cloud.n} points")
    result = pca(cloud.matrix, max(dims))
    coords = (cloud.matrix - result.mean) @ result.components[[d - 1 for d in dims]].T
    frame = pd.DataFrame({"point_id": np.arange(cloud.n),
                          "gold_label": list(labels) if labels is not None else [""] * cloud.n})
    for j, d in enumerate(dims):
        frame[f"pc{d}"] = coords[:, j]
    return frame


def write_pca_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path
