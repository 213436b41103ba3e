"""
Dense tensor helpers: grid shapes, trilinear resampling and sampling,
per-position L2 normalization, and the STT1 binary tensor format.

Tensors are plain numpy arrays, float32 by default and channel-first
([C, T, H, W]). float64 arrays pass through unchanged so the gradient
checks can run in double precision.
"""
import os
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from utils.errors import ShapeError, TensorFormatError
from utils.logger import setup_logger

logger = setup_logger(__name__)

MAGIC = b'STT1'
MAX_RANK = 5
_HEADER = struct.Struct('<4sB')


@dataclass(frozen=True)
class GridShape:
    """T x H x W grid of feature cells; linear cell index is t*H*W + h*W + w"""
    t: int
    h: int
    w: int

    def __post_init__(self):
        for name in ('t', 'h', 'w'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ShapeError(f"grid axis {name} must be a positive integer, got {value}")

    @classmethod
    def parse(cls, text: str) -> "GridShape":
        """Parse 'TxHxW' (e.g. '8x8x8')"""
        try:
            t, h, w = (int(part) for part in text.lower().split('x'))
        except ValueError as e:
            raise ShapeError(f"grid must look like TxHxW, got {text!r}") from e
        return cls(t, h, w)

    @property
    def cells(self) -> int:
        return self.t * self.h * self.w

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.t, self.h, self.w)

    def coords(self, dtype=np.float64) -> np.ndarray:
        """[THW, 3] array of (t, h, w) for every cell, in linear-index order"""
        tt, hh, ww = np.meshgrid(np.arange(self.t), np.arange(self.h), np.arange(self.w), indexing='ij')
        return np.stack([tt.ravel(), hh.ravel(), ww.ravel()], axis=1).astype(dtype)

    def linear_index(self, t: int, h: int, w: int) -> int:
        return (t * self.h + h) * self.w + w

    def unravel(self, index: int) -> Tuple[int, int, int]:
        t, rem = divmod(int(index), self.h * self.w)
        h, w = divmod(rem, self.w)
        return t, h, w

    def __str__(self):
        return f"{self.t}x{self.h}x{self.w}"


def check_rank(tensor: np.ndarray, rank: int, what: str = "tensor"):
    if tensor.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {tuple(tensor.shape)}")


def grid_of(tensor: np.ndarray) -> GridShape:
    """Grid of a [C, T, H, W] tensor"""
    check_rank(tensor, 4)
    return GridShape(*tensor.shape[1:])


def _axis_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights [n_out, n_in], align-corners convention"""
    if n_in == 1:
        return np.ones((n_out, 1))
    if n_out == 1:
        positions = np.zeros(1)
    else:
        positions = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lower = np.minimum(np.floor(positions).astype(np.int64), n_in - 2)
    frac = positions - lower
    rows = np.arange(n_out)
    matrix = np.zeros((n_out, n_in))
    matrix[rows, lower] = 1.0 - frac
    matrix[rows, lower + 1] += frac
    return matrix


def trilinear_resample(src: np.ndarray, target: GridShape) -> np.ndarray:
    """
    Resample a [C, T, H, W] tensor onto `target` with per-channel trilinear
    interpolation. Endpoints map to endpoints; size-1 source axes are
    broadcast.

    Args:
        src: [C, T, H, W] tensor
        target: output grid

    Returns:
        [C, target.t, target.h, target.w] tensor with src's dtype
    """
    check_rank(src, 4, "resample input")
    if not isinstance(target, GridShape):
        target = GridShape(*target)

    _, t_in, h_in, w_in = src.shape
    if (t_in, h_in, w_in) == target.as_tuple():
        return src.copy()

    out = src.astype(np.float64)
    out = np.einsum('ti,cihw->cthw', _axis_matrix(t_in, target.t), out)
    out = np.einsum('hj,ctjw->cthw', _axis_matrix(h_in, target.h), out)
    out = np.einsum('wk,cthk->cthw', _axis_matrix(w_in, target.w), out)
    return out.astype(src.dtype if src.dtype in (np.float32, np.float64) else np.float32)


def l2_normalize_positions(tensor: np.ndarray, epsilon: float = 1e-8) -> np.ndarray:
    """Divide the channel vector at every (t, h, w) by max(its L2 norm, epsilon)"""
    check_rank(tensor, 4, "normalize input")
    norms = np.linalg.norm(tensor, axis=0, keepdims=True)
    return (tensor / np.maximum(norms, epsilon)).astype(tensor.dtype)


def trilinear_weights(points: np.ndarray, grid: GridShape) -> Tuple[np.ndarray, np.ndarray]:
    """
    Corner cells and weights for trilinear sampling at real grid positions.

    Positions are clamped into the grid. Returns (indices [N, 8] of linear
    cell ids, weights [N, 8]); weights of each row sum to one.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sizes = np.array(grid.as_tuple())
    pos = np.clip(points, 0, sizes - 1)

    lower = np.minimum(np.floor(pos).astype(np.int64), np.maximum(sizes - 2, 0))
    upper = np.minimum(lower + 1, sizes - 1)
    frac = pos - lower

    corner_idx = []
    corner_w = []
    for dt in (0, 1):
        for dh in (0, 1):
            for dw in (0, 1):
                t = upper[:, 0] if dt else lower[:, 0]
                h = upper[:, 1] if dh else lower[:, 1]
                w = upper[:, 2] if dw else lower[:, 2]
                weight = ((frac[:, 0] if dt else 1 - frac[:, 0])
                          * (frac[:, 1] if dh else 1 - frac[:, 1])
                          * (frac[:, 2] if dw else 1 - frac[:, 2]))
                corner_idx.append((t * grid.h + h) * grid.w + w)
                corner_w.append(weight)
    return np.stack(corner_idx, axis=1), np.stack(corner_w, axis=1)


def sample_trilinear(field: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample a [C, T, H, W] field at real (t, h, w) positions; returns [C, N]"""
    grid = grid_of(field)
    idx, weights = trilinear_weights(points, grid)
    flat = field.reshape(field.shape[0], -1)
    return np.einsum('cnk,nk->cn', flat[:, idx], weights)


def write_tensor(path: str, tensor: np.ndarray):
    """Write an STT1 file: magic, rank byte, u64 dims, binary32 payload (all little-endian)"""
    tensor = np.asarray(tensor)
    if not 1 <= tensor.ndim <= MAX_RANK:
        raise TensorFormatError(f"rank {tensor.ndim} outside 1..{MAX_RANK}")
    if 0 in tensor.shape:
        raise TensorFormatError(f"zero-size dimension in {tuple(tensor.shape)}")

    header = _HEADER.pack(MAGIC, tensor.ndim) + struct.pack(f'<{tensor.ndim}Q', *tensor.shape)
    payload = np.ascontiguousarray(tensor, dtype='<f4').tobytes()

    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'wb') as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path: str) -> np.ndarray:
    """Read an STT1 file into a float32 array"""
    with open(path, 'rb') as fh:
        blob = fh.read()
    return decode_tensor(blob, source=path)


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise TensorFormatError(f"{source}: truncated header")
    magic, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"{source}: bad magic {magic!r}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"{source}: rank {rank} outside 1..{MAX_RANK}")

    dims_end = _HEADER.size + 8 * rank
    if len(blob) < dims_end:
        raise TensorFormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f'<{rank}Q', blob, _HEADER.size)
    if 0 in dims:
        raise TensorFormatError(f"{source}: zero-size dimension in {dims}")

    expected = int(np.prod(dims, dtype=np.uint64)) * 4
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise TensorFormatError(f"{source}: length mismatch, header says {expected} bytes, found {len(payload)}")

    return np.frombuffer(payload, dtype='<f4').astype(np.float32).reshape(dims)


def tensor_io(path: str, direction: str, tensor: Optional[np.ndarray] = None):
    """Single entry point for STT1 I/O: direction is 'read' or 'write'"""
    if direction == 'read':
        return read_tensor(path)
    if direction == 'write':
        if tensor is None:
            raise TensorFormatError("write needs a tensor")
        write_tensor(path, tensor)
        return None
    raise ValueError(f"direction must be 'read' or 'write', got {direction!r}")
