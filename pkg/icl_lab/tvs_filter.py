"""
The low-rank task-verbalization filter and its TVS1 container.

Row-vector convention: h' = (h @ W_enc + b_enc) @ W_dec.
"""
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from .errors import MagicMismatch, ShapeMismatch, TruncatedPayload

FILTER_MAGIC = b"TVS1"


@dataclass(frozen=True)
class TVSFilter:
    W_enc: np.ndarray               # d x r
    b_enc: np.ndarray               # r
    W_dec: np.ndarray               # r x d
    layer: int
    label_map: Dict[str, List[int]] = field(default_factory=dict)

    def __post_init__(self):
        d, r = self.W_enc.shape
        if self.b_enc.shape != (r,) or self.W_dec.shape != (r, d):
            raise ShapeMismatch(
                f"filter shapes disagree: W_enc {self.W_enc.shape}, "
                f"b_enc {self.b_enc.shape}, W_dec {self.W_dec.shape}"
            )
        if r > d:
            raise ShapeMismatch(f"rank {r} exceeds width {d}")

    @property
    def d(self) -> int:
        return self.W_enc.shape[0]

    @property
    def r(self) -> int:
        return self.W_enc.shape[1]

    def apply(self, h: np.ndarray) -> np.ndarray:
        """Encode then decode"""
        return (h @ self.W_enc + self.b_enc) @ self.W_dec

    def map_matrix(self) -> np.ndarray:
        """W_enc W_dec in float64 (the bias never reaches a covariance)"""
        return self.W_enc.astype(np.float64) @ self.W_dec.astype(np.float64)

    def astype(self, dtype) -> "TVSFilter":
        return replace(
            self,
            W_enc=self.W_enc.astype(dtype),
            b_enc=self.b_enc.astype(dtype),
            W_dec=self.W_dec.astype(dtype),
        )

    # --------------------------------------------------------------------------
    # Constructors
    # --------------------------------------------------------------------------

    @classmethod
    def random_init(cls, d: int, r: int, layer: int, rng: np.random.Generator,
                    dtype=np.float32, label_map=None) -> "TVSFilter":
        """W entries ~ N(0, 1/d), zero bias"""
        std = 1.0 / np.sqrt(d)
        return cls(
            W_enc=(rng.standard_normal((d, r)) * std).astype(dtype),
            b_enc=np.zeros(r, dtype=dtype),
            W_dec=(rng.standard_normal((r, d)) * std).astype(dtype),
            layer=layer,
            label_map=dict(label_map or {}),
        )

    @classmethod
    def identity(cls, d: int, layer: int, dtype=np.float32) -> "TVSFilter":
        return cls(W_enc=np.eye(d, dtype=dtype), b_enc=np.zeros(d, dtype=dtype),
                   W_dec=np.eye(d, dtype=dtype), layer=layer)

    @classmethod
    def zeros(cls, d: int, r: int, layer: int, dtype=np.float32) -> "TVSFilter":
        return cls(W_enc=np.zeros((d, r), dtype=dtype), b_enc=np.zeros(r, dtype=dtype),
                   W_dec=np.zeros((r, d), dtype=dtype), layer=layer)

    @classmethod
    def from_projection(cls, basis: np.ndarray, layer: int) -> "TVSFilter":
        """Orthogonal projection onto span(basis columns), d x r"""
        basis = np.asarray(basis, dtype=np.float64)
        return cls(W_enc=basis.copy(), b_enc=np.zeros(basis.shape[1]),
                   W_dec=basis.T.copy(), layer=layer)


# ==============================================================================
# TVS1 CONTAINER
# ==============================================================================

def save_filter(filt: TVSFilter, path: Union[str, Path]) -> Path:
    path = Path(path)
    header = json.dumps(
        {"d": filt.d, "r": filt.r, "layer": int(filt.layer),
         "label_map": {k: [int(i) for i in v] for k, v in filt.label_map.items()}},
        sort_keys=True,
    ).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for a in (filt.W_enc, filt.b_enc, filt.W_dec)
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(FILTER_MAGIC + struct.pack("<I", len(header)) + header + payload)
    return path


def load_filter(path: Union[str, Path]) -> TVSFilter:
    blob = Path(path).read_bytes()
    if blob[:4] != FILTER_MAGIC:
        raise MagicMismatch(FILTER_MAGIC, blob[:4])
    if len(blob) < 8:
        raise TruncatedPayload("filter header length missing")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise TruncatedPayload("filter header truncated")
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    d, r = int(header["d"]), int(header["r"])
    sizes = [d * r, r, r * d]
    payload = blob[8 + hlen:]
    if len(payload) > 4 * sum(sizes):
        raise ShapeMismatch(f"filter payload has {len(payload)} bytes, header declares d={d}, r={r}")
    if len(payload) < 4 * sum(sizes):
        raise TruncatedPayload(f"filter payload has {len(payload)} bytes, expected {4 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    W_enc = flat[:sizes[0]].reshape(d, r)
    b_enc = flat[sizes[0]:sizes[0] + sizes[1]]
    W_dec = flat[sizes[0] + sizes[1]:].reshape(r, d)
    return TVSFilter(W_enc=W_enc.copy(), b_enc=b_enc.copy(), W_dec=W_dec.copy(),
                     layer=int(header["layer"]),
                     label_map={k: list(v) for k, v in header.get("label_map", {}).items()})
