"""
Hidden-state clouds and the HSC1 dump format.

HSC1: magic, u32 N, u32 d, u32 layer, u32 k, u32 tag length, UTF-8 mode tag,
then N*d little-endian f32 row-major.
"""
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DegenerateCloud, MagicMismatch, NonFiniteError, ShapeMismatch, TruncatedDump

DUMP_MAGIC = b"HSC1"
_FIELDS = struct.Struct("<5I")


@dataclass(frozen=True, eq=False)
class HiddenCloud:
    """N last-token residuals at one layer for one (k, mode) setting"""
    matrix: np.ndarray
    layer: int
    k: int
    mode: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeMismatch(f"cloud must be N x d, got shape {m.shape}")
        if m.shape[0] < 2:
            raise DegenerateCloud(f"cloud needs at least 2 points, got {m.shape[0]}")
        if not np.all(np.isfinite(m)):
            raise NonFiniteError("cloud contains NaN or Inf")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


def write_dump(cloud: HiddenCloud, path: Union[str, Path]) -> Path:
    path = Path(path)
    tag = cloud.mode.encode("utf-8")
    header = DUMP_MAGIC + _FIELDS.pack(cloud.n, cloud.d, cloud.layer, cloud.k, len(tag)) + tag
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + np.ascontiguousarray(cloud.matrix, dtype="<f4").tobytes())
    return path


def read_dump(path: Union[str, Path]) -> HiddenCloud:
    blob = Path(path).read_bytes()
    if blob[:4] != DUMP_MAGIC:
        raise MagicMismatch(DUMP_MAGIC, blob[:4])
    if len(blob) < 4 + _FIELDS.size:
        raise TruncatedDump("dump header truncated")
    n, d, layer, k, tag_len = _FIELDS.unpack_from(blob, 4)
    start = 4 + _FIELDS.size + tag_len
    if len(blob) < start:
        raise TruncatedDump("dump mode tag truncated")
    tag = blob[4 + _FIELDS.size:start].decode("utf-8")
    payload = blob[start:]
    expected = 4 * n * d
    if len(payload) < expected:
        raise TruncatedDump(f"dump payload has {len(payload)} bytes, header declares {n} x {d}")
    if len(payload) > expected:
        raise ShapeMismatch(f"dump payload has {len(payload)} bytes, header declares {n} x {d}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    return HiddenCloud(matrix=matrix, layer=layer, k=k, mode=tag)
