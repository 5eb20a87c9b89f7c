"""Encoder meta-architectures: sparse 3D/4D U-Nets, projection, predictors.

Each branch is a U-Net of pre-activation residual blocks over sparse tensors,
followed by a 1x..x1 projection (output ``z``) and a two-layer 1x..x1
predictor (output ``p``). Inputs are binary occupancy repeated to three
channels. Both heads preserve the coordinate set of their input voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sparse as sp
from .autodiff import Var
from .errors import EmptyInputError
from .geom import voxel_indices
from .seqgen import Sequence
from .sparse import SparseTensor

VOXEL_3D = 0.02  # m
VOXEL_4D = 0.05  # m
IN_CHANNELS = 3  # occupancy repeated to three channels


@dataclass(frozen=True)
class UNetConfig:
    dim: int
    channels: tuple[int, ...]          # one entry per resolution level
    block_depth: int = 1               # residual blocks per level
    projection_width: int = 32
    kernel_size: int = 3
    in_channels: int = IN_CHANNELS
    normalize: bool = True

    def __post_init__(self):
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ValueError("need at least one level of positive channel width")

    @property
    def levels(self) -> int:
        return len(self.channels)


def default_3d_config() -> UNetConfig:
    return UNetConfig(dim=3, channels=(16, 32, 64), projection_width=32)


def default_4d_config() -> UNetConfig:
    return UNetConfig(dim=4, channels=(8, 16), projection_width=32)


@dataclass
class ModelConfig:
    unet3d: UNetConfig = field(default_factory=default_3d_config)
    unet4d: UNetConfig = field(default_factory=default_4d_config)
    voxel3d: float = VOXEL_3D
    voxel4d: float = VOXEL_4D


# ---------------------------------------------------------------------------
# Parameter construction


def _init_weight(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _head_shapes(cfg: UNetConfig, prefix: str) -> dict[str, tuple[int, ...]]:
    """Shapes of all tensors of one branch (U-Net + projection + predictor)."""
    k = cfg.kernel_size ** cfg.dim
    up_k = 2 ** cfg.dim
    ch = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {}
    shapes[f"unet{prefix}.stem.w"] = (cfg.in_channels, ch[0])
    shapes[f"unet{prefix}.stem.b"] = (ch[0],)
    for lvl, c in enumerate(ch):
        for b in range(cfg.block_depth):
            shapes[f"unet{prefix}.enc{lvl}.block{b}.conv1.w"] = (k, c, c)
            shapes[f"unet{prefix}.enc{lvl}.block{b}.conv2.w"] = (k, c, c)
        if lvl < cfg.levels - 1:
            shapes[f"unet{prefix}.down{lvl}.w"] = (up_k, c, ch[lvl + 1])
    for lvl in range(cfg.levels - 1, 0, -1):
        # transpose conv from level lvl to lvl-1: adjoint applies W^T
        shapes[f"unet{prefix}.up{lvl}.w"] = (up_k, ch[lvl - 1], ch[lvl])
        shapes[f"unet{prefix}.dec{lvl - 1}.reduce.w"] = (2 * ch[lvl - 1], ch[lvl - 1])
        shapes[f"unet{prefix}.dec{lvl - 1}.reduce.b"] = (ch[lvl - 1],)
        for b in range(cfg.block_depth):
            shapes[f"unet{prefix}.dec{lvl - 1}.block{b}.conv1.w"] = (k, ch[lvl - 1], ch[lvl - 1])
            shapes[f"unet{prefix}.dec{lvl - 1}.block{b}.conv2.w"] = (k, ch[lvl - 1], ch[lvl - 1])
    w = cfg.projection_width
    shapes[f"proj{prefix}.w"] = (ch[0], w)
    shapes[f"proj{prefix}.b"] = (w,)
    shapes[f"pred{prefix}.l1.w"] = (w, w)
    shapes[f"pred{prefix}.l1.b"] = (w,)
    shapes[f"pred{prefix}.l2.w"] = (w, w)
    shapes[f"pred{prefix}.l2.b"] = (w,)
    return shapes


def expected_parameter_count(cfg: UNetConfig) -> int:
    """Closed-form parameter count of one branch."""
    return sum(int(np.prod(s)) for s in _head_shapes(cfg, "x").values())


def build_parameters(model: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Var]:
    """Initialize all parameters: fan-in-scaled uniform weights, zero biases.

    Each tensor gets its own seed derived from (seed, tensor name), so the
    initialization is independent of construction order.
    """
    shapes = _head_shapes(model.unet3d, "3d") | _head_shapes(model.unet4d, "4d")
    params: dict[str, Var] = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            rng = np.random.default_rng(np.random.SeedSequence((seed, *name.encode())))
            arr = _init_weight(rng, shape, dtype)
        params[name] = ad.parameter(arr, name=name)
    return params


def count_parameters(params: dict[str, Var], prefix: str = "") -> int:
    return sum(p.value.size for name, p in params.items() if name.startswith(prefix))


# ---------------------------------------------------------------------------
# Forward passes


def _resblock(x: SparseTensor, params, name: str, normalize: bool, cache) -> SparseTensor:
    h = x
    if normalize:
        h = sp.channel_norm(h)
    h = sp.relu(h)
    h = sp.sparse_conv(h, params[f"{name}.conv1.w"], stride=1, cache=cache)
    if normalize:
        h = sp.channel_norm(h)
    h = sp.relu(h)
    h = sp.sparse_conv(h, params[f"{name}.conv2.w"], stride=1, cache=cache)
    return sp.add(x, h)


def unet_forward(x: SparseTensor, params: dict[str, Var], cfg: UNetConfig, prefix: str, cache: dict | None = None) -> SparseTensor:
    """U-Net over a sparse tensor; output coordinates equal input coordinates."""
    base = f"unet{prefix}"
    x = sp.linear_1x1(x, params[f"{base}.stem.w"], params[f"{base}.stem.b"])
    skips = []
    for lvl in range(cfg.levels):
        for b in range(cfg.block_depth):
            x = _resblock(x, params, f"{base}.enc{lvl}.block{b}", cfg.normalize, cache)
        skips.append(x)
        if lvl < cfg.levels - 1:
            x = sp.sparse_conv(x, params[f"{base}.down{lvl}.w"], stride=2, cache=cache)
    for lvl in range(cfg.levels - 1, 0, -1):
        skip = skips[lvl - 1]
        x = sp.transpose_conv(x, params[f"{base}.up{lvl}.w"], skip.coords, skip.stride, cache=cache)
        x = sp.concat(x, skip)
        x = sp.linear_1x1(x, params[f"{base}.dec{lvl - 1}.reduce.w"], params[f"{base}.dec{lvl - 1}.reduce.b"])
        for b in range(cfg.block_depth):
            x = _resblock(x, params, f"{base}.dec{lvl - 1}.block{b}", cfg.normalize, cache)
    return x


def project(x: SparseTensor, params: dict[str, Var], prefix: str, normalize: bool = True) -> SparseTensor:
    """Pointwise projection head.

    The output is standardized across the occupied voxels: a constant feature
    field cannot satisfy the normalization, which blocks the trivial collapsed
    solution of the matching losses.
    """
    out = sp.linear_1x1(x, params[f"proj{prefix}.w"], params[f"proj{prefix}.b"])
    if normalize:
        out = sp.channel_norm(out)
    return out


def predict(z: SparseTensor, params: dict[str, Var], prefix: str, normalize: bool = True) -> SparseTensor:
    h = sp.linear_1x1(z, params[f"pred{prefix}.l1.w"], params[f"pred{prefix}.l1.b"])
    if normalize:
        h = sp.channel_norm(h)
    h = sp.relu(h)
    return sp.linear_1x1(h, params[f"pred{prefix}.l2.w"], params[f"pred{prefix}.l2.b"])


# ---------------------------------------------------------------------------
# Voxelization of inputs


def points_to_tensor(points: np.ndarray, voxel_size: float, dim: int = 3, dtype=np.float32) -> tuple[SparseTensor, np.ndarray]:
    """Quantize points into an occupancy tensor.

    Returns the tensor and, per input point, the row of its voxel. Feature
    assignment is first-occupancy: every occupied cell carries (1, 1, 1).
    """
    if len(points) == 0:
        raise EmptyInputError("cannot voxelize an empty frame")
    idx = voxel_indices(points[:, :3], voxel_size)
    coords = np.concatenate([np.zeros((len(idx), 1), dtype=np.int64), idx], axis=1)
    if points.shape[1] > 3:  # trailing integer columns (e.g. time) pass through
        extra = points[:, 3:].astype(np.int64)
        coords = np.concatenate([coords, extra], axis=1)
    uniq, inverse = sp.unique_coords(coords)
    feats = np.ones((len(uniq), IN_CHANNELS), dtype=dtype)
    return SparseTensor(uniq, Var(feats), (1,) * dim), inverse


def sequence_to_4d(seq: Sequence, voxel_size: float = VOXEL_4D, dtype=np.float32) -> tuple[SparseTensor, list[np.ndarray]]:
    """Stack the (unaugmented) sequence view into a 4D occupancy tensor.

    Coordinates are (x, y, z) quantized at ``voxel_size`` plus the frame index
    as the time axis; every occupied cell carries the occupancy feature
    repeated to three channels. Also returns, per frame, the tensor row of
    each point.
    """
    blocks = []
    counts = []
    for t, frame in enumerate(seq.frames):
        pts = frame.cloud.points
        block = np.concatenate([pts, np.full((len(pts), 1), float(t))], axis=1)
        blocks.append(block)
        counts.append(len(pts))
    stacked = np.concatenate(blocks, axis=0)
    idx3 = voxel_indices(stacked[:, :3], voxel_size)
    tcol = stacked[:, 3:].astype(np.int64)
    coords = np.concatenate([np.zeros((len(idx3), 1), dtype=np.int64), idx3, tcol], axis=1)
    uniq, inverse = sp.unique_coords(coords)
    feats = np.ones((len(uniq), IN_CHANNELS), dtype=dtype)
    tensor = SparseTensor(uniq, Var(feats), (1, 1, 1, 1))
    rows = []
    start = 0
    for n in counts:
        rows.append(inverse[start : start + n])
        start += n
    return tensor, rows


def frames_to_tensor(frames_points: list[np.ndarray], voxel_size: float, dtype=np.float32) -> tuple[SparseTensor, list[np.ndarray]]:
    """Quantize several frames into one 3D occupancy tensor.

    The batch column keeps frames apart, so one U-Net pass convolves them all
    without mixing. Returns the tensor and, per frame, the row of each point.
    """
    blocks = []
    counts = []
    for b, pts in enumerate(frames_points):
        if len(pts) == 0:
            raise EmptyInputError(f"cannot voxelize empty frame {b}")
        idx = voxel_indices(pts[:, :3], voxel_size)
        blocks.append(np.concatenate([np.full((len(idx), 1), b, dtype=np.int64), idx], axis=1))
        counts.append(len(idx))
    uniq, inverse = sp.unique_coords(np.concatenate(blocks, axis=0))
    feats = np.ones((len(uniq), IN_CHANNELS), dtype=dtype)
    rows = []
    start = 0
    for n in counts:
        rows.append(inverse[start : start + n])
        start += n
    return SparseTensor(uniq, Var(feats), (1, 1, 1)), rows


def encode_3d(points: np.ndarray, params: dict[str, Var], model: ModelConfig, cache: dict | None = None, dtype=np.float32) -> tuple[SparseTensor, np.ndarray]:
    """Per-voxel projected features ``z`` of a static 3D frame view."""
    x, rows = points_to_tensor(points, model.voxel3d, dim=3, dtype=dtype)
    z = project(unet_forward(x, params, model.unet3d, "3d", cache), params, "3d", model.unet3d.normalize)
    return z, rows


def encode_3d_frames(frames_points: list[np.ndarray], params: dict[str, Var], model: ModelConfig, cache: dict | None = None, dtype=np.float32) -> tuple[SparseTensor, list[np.ndarray]]:
    """Projected 3D features of several frames from one batched U-Net pass."""
    x, rows = frames_to_tensor(frames_points, model.voxel3d, dtype=dtype)
    z = project(unet_forward(x, params, model.unet3d, "3d", cache), params, "3d", model.unet3d.normalize)
    return z, rows


def predict_3d(z: SparseTensor, params: dict[str, Var], normalize: bool = True) -> SparseTensor:
    return predict(z, params, "3d", normalize)


def encode_4d(tensor: SparseTensor, params: dict[str, Var], model: ModelConfig, cache: dict | None = None) -> SparseTensor:
    """Per-(voxel, time) projected features ``z`` of a 4D sequence tensor."""
    if tensor.dim != 4:
        raise ValueError(f"expected a 4D tensor, got dim {tensor.dim}")
    return project(unet_forward(tensor, params, model.unet4d, "4d", cache), params, "4d", model.unet4d.normalize)


def predict_4d(z: SparseTensor, params: dict[str, Var], normalize: bool = True) -> SparseTensor:
    return predict(z, params, "4d", normalize)


def gather_features(features: SparseTensor, locations: np.ndarray, voxel_size: float, time_index: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``features`` at the voxels containing ``locations``.

    Returns (row indices, missing mask); missing entries are -1 and counted
    by callers (correspondences in unoccupied voxels are dropped, not fatal).
    """
    idx = voxel_indices(locations[:, :3], voxel_size)
    # queries are expressed at the tensor's stride
    cols = [np.zeros((len(idx), 1), dtype=np.int64), idx]
    if time_index is not None:
        cols.append(np.full((len(idx), 1), time_index, dtype=np.int64))
    q = np.concatenate(cols, axis=1)
    keys = sp.pack_coords(features.coords)
    order = np.argsort(keys, kind="stable")
    hits = sp._lookup(keys[order], order, sp.pack_coords(q))
    return hits, hits < 0
