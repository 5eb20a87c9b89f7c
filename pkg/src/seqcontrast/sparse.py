"""Sparse integer-coordinate tensors (3D/4D) and generalized sparse convolution.

Coordinates are absolute voxel indices carrying a batch column; a tensor
stride records the resolution level. Stride-1 convolutions are submanifold
(output coordinates equal input coordinates); stride-2 convolutions emit the
occupied downsampled cells and compose strides multiplicatively.

Kernel maps pair input and output rows per kernel offset. For both the
forward and the transposed convolution the index lists are unique on both
sides within one offset, so plain fancy-indexed accumulation is exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

_COORD_BITS = 14
_COORD_BIAS = 1 << (_COORD_BITS - 1)


@dataclass
class SparseTensor:
    """Batched N-D sparse feature field."""

    coords: np.ndarray   # (N, 1 + d) int64: batch index then d spatial coords
    feats: Var           # (N, C)
    stride: tuple[int, ...]

    def __post_init__(self):
        if isinstance(self.feats, np.ndarray):
            self.feats = Var(self.feats)
        d = self.coords.shape[1] - 1
        if d not in (3, 4):
            raise ValueError(f"spatial dimension must be 3 or 4, got {d}")
        if len(self.stride) != d:
            raise ValueError("stride must have one entry per spatial axis")
        if self.coords.shape[0] != self.feats.value.shape[0]:
            raise ValueError("coords and feats row counts differ")

    @property
    def dim(self) -> int:
        return self.coords.shape[1] - 1

    @property
    def channels(self) -> int:
        return self.feats.value.shape[1]

    def __len__(self) -> int:
        return len(self.coords)


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack (batch, spatial...) rows into unique int64 keys."""
    spatial = coords[:, 1:]
    if np.any(np.abs(spatial) >= _COORD_BIAS):
        raise ValueError("coordinate magnitude exceeds packing range")
    keys = coords[:, 0].astype(np.int64)
    for c in range(spatial.shape[1]):
        keys = (keys << _COORD_BITS) | (spatial[:, c] + _COORD_BIAS)
    return keys


def unique_coords(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deduplicate coordinate rows; returns (unique rows, inverse index)."""
    keys = pack_coords(coords)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return coords[first], inverse


def kernel_offsets(dim: int, kernel_size: int) -> np.ndarray:
    """All kernel offsets; centered for odd sizes, forward for even sizes."""
    if kernel_size % 2 == 1:
        r = range(-(kernel_size // 2), kernel_size // 2 + 1)
    else:
        r = range(kernel_size)
    return np.array(list(itertools.product(r, repeat=dim)), dtype=np.int64)


def _lookup(sorted_keys: np.ndarray, order: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Indices of query keys in the keyed rows, or -1 when absent."""
    if len(sorted_keys) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos_c = np.minimum(pos, len(sorted_keys) - 1)
    hit = sorted_keys[pos_c] == query
    out = np.where(hit, order[pos_c], -1)
    return out


class KernelMap:
    """Per-offset (input row, output row) index pairs."""

    def __init__(self, pairs: list[tuple[np.ndarray, np.ndarray]], n_in: int, n_out: int):
        self.pairs = pairs
        self.n_in = n_in
        self.n_out = n_out
        total = sum(len(ii) for ii, _ in pairs)
        # fraction of (row, offset) slots with a neighbor; picks the conv path
        self.density = total / max(n_in * len(pairs), 1)


def downsample_coords(coords: np.ndarray, stride: tuple[int, ...]) -> np.ndarray:
    """Occupied cells at twice the stride, in absolute coordinates."""
    s = np.array(stride, dtype=np.int64)
    out = coords.copy()
    out[:, 1:] = np.floor_divide(out[:, 1:], 2 * s) * (2 * s)
    uniq, _ = unique_coords(out)
    return uniq


def build_kernel_map(
    in_coords: np.ndarray,
    out_coords: np.ndarray,
    offsets: np.ndarray,
    offset_stride: tuple[int, ...],
) -> KernelMap:
    """For each offset k: input rows at out + k * offset_stride."""
    in_keys = pack_coords(in_coords)
    order = np.argsort(in_keys, kind="stable")
    sorted_keys = in_keys[order]
    s = np.array(offset_stride, dtype=np.int64)
    pairs = []
    base = out_coords.copy()
    for off in offsets:
        q = base.copy()
        q[:, 1:] += off * s
        hits = _lookup(sorted_keys, order, pack_coords(q))
        mask = hits >= 0
        pairs.append((hits[mask], np.nonzero(mask)[0]))
    return KernelMap(pairs, len(in_coords), len(out_coords))


def _kmap_cache_key(coords: np.ndarray, kind: str, ksize: int, stride: tuple[int, ...]):
    return (kind, ksize, stride, coords.shape[0], coords.tobytes())


def _get_kernel_map(x: SparseTensor, kind: str, ksize: int, target=None, cache=None):
    """Kernel map for submanifold / down / up convolutions, with caching."""
    key = _kmap_cache_key(x.coords, kind, ksize, x.stride)
    if kind == "up":
        key = key + (target[0].shape[0], target[0].tobytes(), target[1])
    if cache is not None and key in cache:
        return cache[key]

    dim = x.dim
    if kind == "sub":
        offsets = kernel_offsets(dim, ksize)
        out_coords = x.coords
        kmap = build_kernel_map(x.coords, out_coords, offsets, x.stride)
        out_stride = x.stride
    elif kind == "down":
        offsets = kernel_offsets(dim, 2)
        out_coords = downsample_coords(x.coords, x.stride)
        kmap = build_kernel_map(x.coords, out_coords, offsets, x.stride)
        out_stride = tuple(2 * s for s in x.stride)
    elif kind == "up":
        # adjoint of "down": pairs of the fine->coarse map, roles swapped
        assert target is not None
        fine_coords, fine_stride = target
        offsets = kernel_offsets(dim, 2)
        kmap = build_kernel_map(fine_coords, x.coords, offsets, fine_stride)
        out_coords, out_stride = fine_coords, fine_stride
    else:
        raise ValueError(kind)
    result = (kmap, out_coords, out_stride)
    if cache is not None:
        cache[key] = result
    return result


_DENSE_PATH_DENSITY = 0.75  # above this, one big GEMM beats per-offset gathers


def _conv_apply(feats: Var, weight: Var, kmap: KernelMap) -> Var:
    """out[o] += x[i] @ W[k] over kernel-map pairs; autodiff-aware.

    Within each offset both index lists are unique, so plain fancy-indexed
    accumulation is exact. Dense kernel maps run as one GEMM against the
    (C_in, K*C_out) reshaped kernel plus K scatters; sparse ones loop over
    offsets to skip the missing neighbors.
    """
    if kmap.density < _DENSE_PATH_DENSITY:
        return _conv_apply_loop(feats, weight, kmap)
    xv, wv = feats.value, weight.value
    k_n, c_in, c_out = wv.shape
    prod = (xv @ wv.transpose(1, 0, 2).reshape(c_in, k_n * c_out)).reshape(-1, k_n, c_out)
    out = np.zeros((kmap.n_out, c_out), dtype=xv.dtype)
    for k, (ii, oi) in enumerate(kmap.pairs):
        if len(ii):
            out[oi] += prod[ii, k]

    def bw(g):
        gbuf = np.zeros((kmap.n_in, k_n, c_out), dtype=g.dtype)
        for k, (ii, oi) in enumerate(kmap.pairs):
            if len(ii):
                gbuf[ii, k] = g[oi]
        flat = gbuf.reshape(kmap.n_in, k_n * c_out)
        dx = flat @ wv.transpose(0, 2, 1).reshape(k_n * c_out, c_in)
        dw = (xv.T @ flat).reshape(c_in, k_n, c_out).transpose(1, 0, 2)
        return (dx, dw)

    return Var(out, (feats, weight), bw)


def _conv_apply_loop(feats: Var, weight: Var, kmap: KernelMap) -> Var:
    """Per-offset form of `_conv_apply` for sparse kernel maps.

    Keeps the gathered input rows from the forward pass so the backward pass
    reuses them for the weight gradient instead of gathering again.
    """
    xv, wv = feats.value, weight.value
    c_out = wv.shape[2]
    out = np.zeros((kmap.n_out, c_out), dtype=xv.dtype)
    gathered: list[np.ndarray | None] = []
    for k, (ii, oi) in enumerate(kmap.pairs):
        if len(ii):
            xg = xv[ii]
            out[oi] += xg @ wv[k]
            gathered.append(xg)
        else:
            gathered.append(None)

    def bw(g):
        dx = np.zeros_like(xv)
        dw = np.zeros_like(wv)
        for k, (ii, oi) in enumerate(kmap.pairs):
            if len(ii):
                go = g[oi]
                dx[ii] += go @ wv[k].T
                dw[k] = gathered[k].T @ go
        return (dx, dw)

    return Var(out, (feats, weight), bw)


def _conv_apply_adjoint(feats: Var, weight: Var, kmap: KernelMap) -> Var:
    """Adjoint map: out[i] += x[o] @ W[k].T over the same pairs.

    Every fine cell has exactly one coarse parent, so these maps are always
    offset-sparse; the per-offset loop is the right shape.
    """
    xv, wv = feats.value, weight.value
    c_in = wv.shape[1]
    out = np.zeros((kmap.n_in, c_in), dtype=xv.dtype)
    for k, (ii, oi) in enumerate(kmap.pairs):
        if len(ii):
            out[ii] += xv[oi] @ wv[k].T

    def bw(g):
        dx = np.zeros_like(xv)
        dw = np.zeros_like(wv)
        for k, (ii, oi) in enumerate(kmap.pairs):
            if len(ii):
                gi = g[ii]
                dx[oi] += gi @ wv[k]
                dw[k] = gi.T @ xv[oi]
        return (dx, dw)

    return Var(out, (feats, weight), bw)


def sparse_conv(x: SparseTensor, weight: Var, stride: int = 1, cache: dict | None = None) -> SparseTensor:
    """Generalized sparse convolution.

    ``weight`` has shape (K^d, C_in, C_out). Stride 1 requires an odd kernel
    size and is submanifold; stride 2 uses kernel size 2 and halves the
    resolution.
    """
    wv = weight.value
    if wv.shape[1] != x.channels:
        raise ValueError(f"channel mismatch: input {x.channels}, kernel {wv.shape[1]}")
    dim = x.dim
    ksize = round(wv.shape[0] ** (1.0 / dim))
    if ksize**dim != wv.shape[0]:
        raise ValueError(f"kernel offset count {wv.shape[0]} is not a {dim}-th power")
    if stride == 1:
        if ksize % 2 == 0:
            raise ValueError("stride-1 convolution needs an odd kernel size")
        kmap, out_coords, out_stride = _get_kernel_map(x, "sub", ksize, cache=cache)
    elif stride == 2:
        if ksize != 2:
            raise ValueError("stride-2 convolution uses kernel size 2")
        kmap, out_coords, out_stride = _get_kernel_map(x, "down", ksize, cache=cache)
    else:
        raise ValueError("stride must be 1 or 2")
    return SparseTensor(out_coords, _conv_apply(x.feats, weight, kmap), out_stride)


def transpose_conv(
    x: SparseTensor,
    weight: Var,
    target_coords: np.ndarray,
    target_stride: tuple[int, ...],
    cache: dict | None = None,
) -> SparseTensor:
    """Adjoint of the stride-2 convolution, onto the supplied target coords.

    The target coordinate set comes from the matching encoder level (U-Net
    skip bookkeeping); it must be nonempty.
    """
    if len(target_coords) == 0:
        raise ValueError("target coordinate set is empty")
    if weight.value.shape[2] != x.channels:
        raise ValueError(f"channel mismatch: input {x.channels}, kernel {weight.value.shape[2]}")
    kmap, out_coords, out_stride = _get_kernel_map(
        x, "up", 2, target=(target_coords, target_stride), cache=cache
    )
    return SparseTensor(out_coords, _conv_apply_adjoint(x.feats, weight, kmap), out_stride)


# ---------------------------------------------------------------------------
# Pointwise ops


def relu(x: SparseTensor) -> SparseTensor:
    return SparseTensor(x.coords, ad.relu(x.feats), x.stride)


def linear_1x1(x: SparseTensor, weight: Var, bias: Var | None = None) -> SparseTensor:
    """1x...x1 convolution: a per-coordinate affine map."""
    out = ad.matmul(x.feats, weight)
    if bias is not None:
        out = ad.add_bias(out, bias)
    return SparseTensor(x.coords, out, x.stride)


def add(x: SparseTensor, y: SparseTensor) -> SparseTensor:
    if x.coords.shape != y.coords.shape or not np.array_equal(x.coords, y.coords):
        raise ValueError("add requires identical coordinate sets")
    return SparseTensor(x.coords, ad.add(x.feats, y.feats), x.stride)


def concat(x: SparseTensor, y: SparseTensor) -> SparseTensor:
    if not np.array_equal(x.coords, y.coords):
        raise ValueError("concat requires identical coordinate sets")
    return SparseTensor(x.coords, ad.concat_cols(x.feats, y.feats), x.stride)


def channel_norm(x: SparseTensor, eps: float = 1e-5) -> SparseTensor:
    return SparseTensor(x.coords, ad.channel_norm(x.feats, eps), x.stride)
