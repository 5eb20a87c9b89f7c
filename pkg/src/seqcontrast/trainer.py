"""Pre-training loop: batching, joint loss, SGD with step decay, checkpoints.

Also hosts the estimator facade (`ContrastivePretrainer`) exposing the
pipeline through a fit/transform interface, and the probe used as a
desk-scale stand-in for downstream evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Var
from .errors import EmptyInputError
from .formats import read_checkpoint, write_checkpoint
from .geom import PointCloud
from .losses import LossReport, LossWeights, loss_3d, loss_3d4d, loss_4d, loss_total
from .nets import ModelConfig, UNetConfig, build_parameters
from .seqgen import CorrespondenceSet, Sequence, build_correspondences, read_sequence

log = logging.getLogger(__name__)

BATCH_BY_LENGTH = {3: 16, 4: 12, 5: 10}
BATCH_POINT_BUDGET = 48  # sequences * frames kept constant for other lengths


@dataclass
class TrainConfig:
    learning_rate: float = 0.25
    batch_size: int = 12
    steps: int = 1000
    decay_factor: float = 0.99
    decay_interval: int = 1000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    voxel3d: float = 0.02
    voxel4d: float = 0.05
    t: int = 4
    momentum: float = 0.0
    dtype: str = "float32"
    normalize_losses: bool = True
    sg_on_predictor_3d4d: bool = True
    max_corr_per_pair: int = 256
    max_points_3d4d: int = 512

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not (0 < self.decay_factor <= 1):
            raise ValueError("decay factor must be in (0, 1]")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def balance_batch(t: int) -> int:
    """Batch size (in sequences) balancing total frames per batch."""
    if t < 1:
        raise ValueError("sequence length must be >= 1")
    return BATCH_BY_LENGTH.get(t, round(BATCH_POINT_BUDGET / t))


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    return cfg.learning_rate * cfg.decay_factor ** (step // cfg.decay_interval)


# ---------------------------------------------------------------------------
# Per-sequence forward pass


class _SequenceState:
    """Static per-sequence structures reused across steps: kernel maps,
    correspondences (optionally subsampled), and the 4D input tensor layout."""

    def __init__(self, seq: Sequence, cfg: TrainConfig, seq_key: int):
        self.seq = seq
        self.cache: dict = {}
        corr = build_correspondences(seq)
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 977, seq_key)))
        self.pair_maps = {}
        for key, (ia, ib) in sorted(corr.pair_maps.items()):
            if cfg.max_corr_per_pair and len(ia) > cfg.max_corr_per_pair:
                pick = np.sort(rng.choice(len(ia), size=cfg.max_corr_per_pair, replace=False))
                ia, ib = ia[pick], ib[pick]
            self.pair_maps[key] = (ia, ib)
        self.per_frame = []
        for idx in corr.per_frame:
            if cfg.max_points_3d4d and len(idx) > cfg.max_points_3d4d:
                idx = np.sort(rng.choice(idx, size=cfg.max_points_3d4d, replace=False))
            self.per_frame.append(idx)
        self.static_views = [f.static_view().points for f in seq.frames]


def sequence_loss(
    state: _SequenceState,
    params: dict[str, Var],
    model: ModelConfig,
    cfg: TrainConfig,
) -> tuple[Var, LossReport]:
    """Joint weighted loss of one sequence through both branches."""
    w = cfg.weights
    dtype = cfg.np_dtype
    t = len(state.seq.frames)
    need_3d = w.w_3d > 0 or w.w_3d4d > 0
    need_4d = w.w_4d > 0 or w.w_3d4d > 0

    p3, z3, p4, z4 = [], [], [], []
    if need_3d:
        z_t, rows3 = nets.encode_3d_frames(state.static_views, params, model, state.cache, dtype=dtype)
        p_t = nets.predict_3d(z_t, params)
        for i in range(t):
            z3.append(ad.rows(z_t.feats, rows3[i]))
            p3.append(ad.rows(p_t.feats, rows3[i]))
    if need_4d:
        tensor, rows4 = nets.sequence_to_4d(state.seq, model.voxel4d, dtype=dtype)
        z_t = nets.encode_4d(tensor, params, model, state.cache)
        p_t = nets.predict_4d(z_t, params)
        for i in range(t):
            z4.append(ad.rows(z_t.feats, rows4[i]))
            p4.append(ad.rows(p_t.feats, rows4[i]))

    zero = Var(np.asarray(0.0, dtype=dtype))
    report = LossReport(weights=w)
    l3 = l34 = l4 = zero
    if w.w_3d > 0:
        l3, report.correspondences_3d = loss_3d(p3, z3, state.pair_maps, cfg.normalize_losses)
    if w.w_3d4d > 0:
        l34, report.correspondences_3d4d = loss_3d4d(
            p3, z3, p4, z4, state.per_frame, cfg.normalize_losses, cfg.sg_on_predictor_3d4d
        )
    if w.w_4d > 0:
        l4, report.correspondences_4d = loss_4d(p4, z4, state.pair_maps, cfg.normalize_losses)
    total = loss_total(l3, l34, l4, w)
    report.l_3d = float(l3.value)
    report.l_3d4d = float(l34.value)
    report.l_4d = float(l4.value)
    report.total = float(total.value)
    return total, report


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int
    model: ModelConfig
    train: TrainConfig


def _config_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {"meta.step": np.array([ckpt.step], dtype=np.float32)}
    for tag, u in (("unet3d", ckpt.model.unet3d), ("unet4d", ckpt.model.unet4d)):
        out[f"config.{tag}.channels"] = np.array(u.channels, dtype=np.float32)
        out[f"config.{tag}.scalars"] = np.array(
            [u.dim, u.block_depth, u.projection_width, u.kernel_size, u.in_channels, int(u.normalize)],
            dtype=np.float32,
        )
    out["config.voxels"] = np.array([ckpt.model.voxel3d, ckpt.model.voxel4d], dtype=np.float32)
    tc = ckpt.train
    out["config.train"] = np.array(
        [tc.learning_rate, tc.batch_size, tc.steps, tc.decay_factor, tc.decay_interval,
         tc.seed, tc.weights.w_3d, tc.weights.w_3d4d, tc.weights.w_4d, tc.t,
         tc.momentum, 1.0 if tc.dtype == "float64" else 0.0],
        dtype=np.float32,
    )
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    write_checkpoint(path, ckpt.tensors | _config_tensors(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = read_checkpoint(path)
    tensors = {k: v for k, v in raw.items() if not k.startswith(("config.", "meta."))}

    def unet(tag: str) -> UNetConfig:
        ch = tuple(int(c) for c in raw[f"config.{tag}.channels"])
        dim, depth, proj, ksize, cin, norm = raw[f"config.{tag}.scalars"]
        return UNetConfig(int(dim), ch, int(depth), int(proj), int(ksize), int(cin), bool(norm))

    v3, v4 = raw["config.voxels"]
    model = ModelConfig(unet("unet3d"), unet("unet4d"), float(v3), float(v4))
    tr = raw["config.train"]
    train = TrainConfig(
        learning_rate=float(tr[0]), batch_size=int(tr[1]), steps=int(tr[2]),
        decay_factor=float(tr[3]), decay_interval=int(tr[4]), seed=int(tr[5]),
        weights=LossWeights(float(tr[6]), float(tr[7]), float(tr[8])),
        voxel3d=float(v3), voxel4d=float(v4), t=int(tr[9]),
        momentum=float(tr[10]), dtype="float64" if tr[11] > 0.5 else "float32",
    )
    return Checkpoint(tensors, int(raw["meta.step"][0]), model, train)


def export_backbone(ckpt: Checkpoint) -> Checkpoint:
    """Keep only the 3D U-Net weights (no projector, predictor, or 4D head)."""
    tensors = {k: v for k, v in ckpt.tensors.items() if k.startswith("unet3d.")}
    if not tensors:
        raise ValueError("checkpoint has no 3D backbone tensors")
    return Checkpoint(tensors, ckpt.step, ckpt.model, ckpt.train)


def backbone_features(points: np.ndarray, ckpt: Checkpoint, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Inference-only forward of the 3D U-Net; returns (per-voxel features,
    per-point voxel rows)."""
    params = {k: Var(v.astype(dtype)) for k, v in ckpt.tensors.items() if k.startswith("unet3d.")}
    x, rows = nets.points_to_tensor(points, ckpt.model.voxel3d, dim=3, dtype=dtype)
    out = nets.unet_forward(x, params, ckpt.model.unet3d, "3d", cache={})
    return out.feats.value, rows


# ---------------------------------------------------------------------------
# Optimization


def load_dataset(data_dir: str | Path) -> list[Sequence]:
    paths = sorted(Path(data_dir).glob("*.4dc"))
    if not paths:
        raise EmptyInputError(f"no sequence files in {data_dir}")
    return [read_sequence(p) for p in paths]


def pretrain(
    sequences: list[Sequence],
    cfg: TrainConfig,
    model: ModelConfig | None = None,
    log_path: str | Path | None = None,
    initial: dict[str, np.ndarray] | None = None,
) -> tuple[Checkpoint, list[LossReport]]:
    """SGD over the joint loss with the step-decay schedule.

    Deterministic given (sequence bytes, config): batch assembly and all RNG
    use positional seeds. Aborts with a diagnostic if the loss goes
    non-finite.
    """
    if not sequences:
        raise EmptyInputError("dataset is empty")
    model = model or ModelConfig(voxel3d=cfg.voxel3d, voxel4d=cfg.voxel4d)
    dtype = cfg.np_dtype
    params = build_parameters(model, seed=cfg.seed, dtype=dtype)
    if initial is not None:
        for k, p in params.items():
            p.value = initial[k].astype(dtype)
    velocity = {k: np.zeros_like(p.value) for k, p in params.items()}
    states: dict[int, _SequenceState] = {}
    reports: list[LossReport] = []

    log_file = open(log_path, "w") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 101, step)))
            if len(sequences) >= cfg.batch_size:
                batch = rng.choice(len(sequences), size=cfg.batch_size, replace=False)
            else:
                batch = rng.choice(len(sequences), size=cfg.batch_size, replace=True)

            grad_sum = {k: np.zeros_like(p.value) for k, p in params.items()}
            step_report = LossReport(weights=cfg.weights)
            for seq_idx in batch:
                seq_idx = int(seq_idx)
                if seq_idx not in states:
                    states[seq_idx] = _SequenceState(sequences[seq_idx], cfg, seq_idx)
                loss, rep = sequence_loss(states[seq_idx], params, model, cfg)
                if not np.isfinite(rep.total):
                    raise FloatingPointError(
                        f"non-finite loss at step {step}: "
                        f"L3D={rep.l_3d} L3D4D={rep.l_3d4d} L4D={rep.l_4d}"
                    )
                grads = ad.grad(loss, params)
                for k in grad_sum:
                    grad_sum[k] += grads[k]
                step_report.l_3d += rep.l_3d / len(batch)
                step_report.l_3d4d += rep.l_3d4d / len(batch)
                step_report.l_4d += rep.l_4d / len(batch)
                step_report.total += rep.total / len(batch)
                step_report.correspondences_3d += rep.correspondences_3d
                step_report.correspondences_3d4d += rep.correspondences_3d4d
                step_report.correspondences_4d += rep.correspondences_4d
                step_report.dropped += rep.dropped

            lr = learning_rate_at(step, cfg)
            inv_b = 1.0 / len(batch)
            for k, p in params.items():
                g = grad_sum[k] * inv_b
                if cfg.momentum:
                    velocity[k] = cfg.momentum * velocity[k] + g
                    g = velocity[k]
                p.value = p.value - (lr * g).astype(dtype)
            reports.append(step_report)
            if log_file:
                log_file.write(
                    f"{step}\t{lr:.8g}\t{step_report.l_3d:.8g}\t{step_report.l_3d4d:.8g}"
                    f"\t{step_report.l_4d:.8g}\t{step_report.total:.8g}\t{step_report.dropped}\n"
                )
                log_file.flush()
    finally:
        if log_file:
            log_file.close()

    tensors = {k: p.value.copy() for k, p in params.items()}
    return Checkpoint(tensors, cfg.steps, model, cfg), reports


# ---------------------------------------------------------------------------
# Probe: correspondence similarity vs random-pair similarity


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = np.linalg.norm(a, axis=1)
    bn = np.linalg.norm(b, axis=1)
    return (a * b).sum(axis=1) / np.maximum(an * bn, 1e-12)


def probe(
    ckpt: Checkpoint,
    sequences: list[Sequence],
    max_pairs_per_sequence: int = 200,
    seed: int = 0,
    use_projection: bool = False,
) -> dict:
    """Mean cosine similarity of 3D features at corresponding point pairs
    versus at random non-corresponding pairs, over held-out sequences.

    By default this probes the backbone (U-Net) features — the representation
    `export_backbone` ships for downstream use. Set ``use_projection=True``
    to probe the projection-head outputs the losses operate on; note the
    head's channel normalization makes even randomly initialized projections
    mildly geometry-discriminative, so the untrained baseline margin is only
    near zero for backbone features."""
    dtype = np.float32
    params = {k: Var(v.astype(dtype)) for k, v in ckpt.tensors.items()}
    model = ckpt.model
    rng = np.random.default_rng(seed)
    corr_sims, rand_sims = [], []
    dropped = 0
    for seq in sequences:
        corr = build_correspondences(seq)
        views = [frame.static_view().points for frame in seq.frames]
        if use_projection:
            z, rows = nets.encode_3d_frames(views, params, model, cache={}, dtype=dtype)
        else:
            x, rows = nets.frames_to_tensor(views, model.voxel3d, dtype=dtype)
            z = nets.unet_forward(x, params, model.unet3d, "3d", cache={})
        feats = [z.feats.value[r] for r in rows]
        t = len(seq.frames)
        for i in range(t):
            for j in range(i + 1, t):
                ia, ib = corr.pairs(i, j)
                if len(ia) == 0:
                    dropped += 1
                    continue
                if len(ia) > max_pairs_per_sequence:
                    pick = rng.choice(len(ia), size=max_pairs_per_sequence, replace=False)
                    ia, ib = ia[pick], ib[pick]
                corr_sims.append(_cosine(feats[i][ia], feats[j][ib]))
                ra = rng.integers(0, len(feats[i]), size=len(ia))
                rb = rng.integers(0, len(feats[j]), size=len(ia))
                rand_sims.append(_cosine(feats[i][ra], feats[j][rb]))
    corr_mean = float(np.mean(np.concatenate(corr_sims))) if corr_sims else float("nan")
    rand_mean = float(np.mean(np.concatenate(rand_sims))) if rand_sims else float("nan")
    return {
        "corresponding": corr_mean,
        "random": rand_mean,
        "margin": corr_mean - rand_mean,
        "pairs": int(sum(len(c) for c in corr_sims)),
        "dropped": dropped,
    }


# ---------------------------------------------------------------------------
# Estimator facade


class ContrastivePretrainer:
    """Fit/transform wrapper around the pre-training pipeline.

    ``fit`` pre-trains on a list of sequences (or a dataset directory);
    ``transform`` maps an (N, 3) point array to per-point 3D features from the
    learned encoder. Follows the scikit-learn estimator conventions
    (constructor stores hyperparameters verbatim; ``get_params`` /
    ``set_params`` for composition) without requiring scikit-learn itself.
    """

    def __init__(
        self,
        steps: int = 500,
        batch_size: int | None = None,
        learning_rate: float = 0.25,
        seed: int = 0,
        t: int = 4,
        dtype: str = "float32",
        model: ModelConfig | None = None,
    ):
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.t = t
        self.dtype = dtype
        self.model = model

    _param_names = ("steps", "batch_size", "learning_rate", "seed", "t", "dtype", "model")

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **kwargs) -> "ContrastivePretrainer":
        for key, value in kwargs.items():
            if key not in self._param_names:
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, X, y=None) -> "ContrastivePretrainer":
        if isinstance(X, (str, Path)):
            X = load_dataset(X)
        if not X:
            raise EmptyInputError("no training sequences")
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size or balance_batch(self.t),
            steps=self.steps,
            seed=self.seed,
            t=self.t,
            dtype=self.dtype,
        )
        self.checkpoint_, self.reports_ = pretrain(X, cfg, self.model)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "checkpoint_"):
            raise RuntimeError("ContrastivePretrainer is not fitted")
        points = X.points if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64)
        params = {k: Var(v) for k, v in self.checkpoint_.tensors.items()}
        z, rows = nets.encode_3d(points, params, self.checkpoint_.model, cache={})
        return z.feats.value[rows]

    def fit_transform(self, X, y=None, points=None) -> np.ndarray:
        self.fit(X, y)
        target = points if points is not None else X[0].frames[0].cloud.points
        return self.transform(target)
