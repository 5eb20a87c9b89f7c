"""Moving-object sequence generation with exact point correspondences.

A sequence composites a rigid object, traveling along a sampled floor
trajectory, into a static scene. Every point carries a provenance id naming
its canonical source point, so correspondences between any two frames are
exact by construction.
"""

from __future__ import annotations

import logging
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataFormatError, EmptyInputError, TrajectoryFailure
from .formats import write_sidecar
from .geom import (
    FLOOR_BAND,
    OBJECT_ID_OFFSET,
    OccupancyMap2D,
    PointCloud,
    SimilarityTransform,
    apply_transform,
    height_accumulate,
    voxel_indices,
)

log = logging.getLogger(__name__)

SEQUENCE_MAGIC = b"4DC1"
SEQUENCE_VERSION = 1

STEP_MIN = 0.30            # m
STEP_MAX = 0.90            # m
TURN_LIMIT = np.deg2rad(150.0)
STEP_RETRIES = 64

OBJECT_SAMPLE_POINTS = 1000
SCENE_SAMPLE_CELL = 0.02   # m, canonical scene sampling resolution

CHUNKS_MIN, CHUNKS_MAX = 5, 15
CHUNK_FRACTION_MIN, CHUNK_FRACTION_MAX = 0.15, 0.45
SCENE_KEEP_PROB = 0.95     # per-frame random scene resampling

MIN_CONSISTENT = 0.30      # scene and object consistency thresholds
MIN_RETENTION = 0.50       # per-frame point retention through augmentation

STATIC_AUG_TRANSLATION = 0.20   # m per axis
STATIC_AUG_SCALE = (0.8, 1.2)


@dataclass(frozen=True)
class Trajectory:
    """Ordered floor waypoints; heading is the direction of the incoming step."""

    positions: np.ndarray  # (t, 2) meters
    headings: np.ndarray   # (t,) radians

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class SequenceFrame:
    cloud: PointCloud                 # scene + object points, provenance-tagged
    object_pose: SimilarityTransform  # canonical object -> this frame
    static_aug: SimilarityTransform   # applied only to the 3D-branch view

    def static_view(self) -> PointCloud:
        """The augmented static interpretation used by the 3D branch."""
        return apply_transform(self.cloud, self.static_aug)

    def is_object(self) -> np.ndarray:
        return self.cloud.provenance >= OBJECT_ID_OFFSET


@dataclass(frozen=True)
class Sequence:
    frames: list[SequenceFrame]
    scene_id: int
    object_id: int
    trajectory: Trajectory | None = None
    scene_ref_points: int = 0   # canonical scene sample size
    object_ref_points: int = 0  # per-frame object sample size

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class CorrespondenceSet:
    """Exact matches between frames, plus the per-frame participating points."""

    pair_maps: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    per_frame: list[np.ndarray]

    def pairs(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        if (i, j) in self.pair_maps:
            return self.pair_maps[(i, j)]
        b, a = self.pair_maps[(j, i)]
        return a, b


# ---------------------------------------------------------------------------
# Placement and trajectories


def valid_positions(occ: OccupancyMap2D, object_radius: float, floor_band: float = FLOOR_BAND) -> set[tuple[int, int]]:
    """Cells where the object's footprint disc fits on traversable floor.

    A cell is traversable when its column holds at most one occupied voxel
    whose top stays within the floor band; a candidate additionally requires
    every cell center within ``object_radius`` to be traversable.
    """
    if not occ.accumulation:
        raise EmptyInputError("occupancy map has no cells")
    if object_radius < 0:
        raise ValueError("object_radius must be non-negative")
    limit = occ.floor_height + floor_band
    traversable = {
        c for c, acc in occ.accumulation.items()
        if acc <= 1 and occ.max_height[c] <= limit
    }
    if object_radius == 0:
        return traversable
    r_cells = int(np.floor(object_radius / occ.cell_size))
    offsets = [
        (dx, dy)
        for dx in range(-r_cells, r_cells + 1)
        for dy in range(-r_cells, r_cells + 1)
        if np.hypot(dx, dy) * occ.cell_size <= object_radius
    ]
    return {
        c for c in traversable
        if all((c[0] + dx, c[1] + dy) in traversable for dx, dy in offsets)
    }


def _wrap_angle(a: float) -> float:
    return float((a + np.pi) % (2 * np.pi) - np.pi)


def sample_trajectory(
    candidates: set[tuple[int, int]],
    t: int,
    rng: np.random.Generator,
    cell_size: float = 0.10,
    origin: np.ndarray | None = None,
    retries: int = STEP_RETRIES,
) -> Trajectory:
    """Random walk over candidate cells with bounded step length and turn.

    Each step samples a distance in [STEP_MIN, STEP_MAX] and a direction
    turning less than TURN_LIMIT from the previous heading (the first step is
    unconstrained in direction), snaps to the nearest candidate, and re-checks
    the realized step against both bounds.
    """
    if not candidates:
        raise ValueError("candidates must be nonempty")
    if t < 1:
        raise ValueError("t must be >= 1")
    origin = np.zeros(2) if origin is None else np.asarray(origin, dtype=np.float64)

    cells = sorted(candidates)
    centers = origin + (np.array(cells, dtype=np.float64) + 0.5) * cell_size

    start = int(rng.integers(0, len(cells)))
    positions = [centers[start]]
    headings: list[float] = []

    for step in range(1, t):
        prev = positions[-1]
        prev_heading = headings[-1] if headings else None
        placed = False
        for _ in range(retries):
            dist = rng.uniform(STEP_MIN, STEP_MAX)
            if prev_heading is None:
                direction = rng.uniform(0.0, 2 * np.pi)
            else:
                direction = prev_heading + rng.uniform(-TURN_LIMIT, TURN_LIMIT)
            target = prev + dist * np.array([np.cos(direction), np.sin(direction)])
            d2 = np.sum((centers - target) ** 2, axis=1)
            snapped = centers[int(np.argmin(d2))]
            realized = snapped - prev
            realized_dist = float(np.hypot(*realized))
            if not (STEP_MIN <= realized_dist <= STEP_MAX):
                continue
            realized_heading = float(np.arctan2(realized[1], realized[0]))
            if prev_heading is not None and abs(_wrap_angle(realized_heading - prev_heading)) >= TURN_LIMIT:
                continue
            positions.append(snapped)
            headings.append(realized_heading)
            placed = True
            break
        if not placed:
            raise TrajectoryFailure(f"no valid step found at waypoint {step} after {retries} retries")

    if not headings:  # t == 1
        headings = [0.0]
    else:
        headings = [headings[0]] + headings  # first waypoint faces the first step
    return Trajectory(np.array(positions), np.array(headings))


def trajectory_violations(
    traj: Trajectory,
    candidates: set[tuple[int, int]],
    cell_size: float = 0.10,
    origin: np.ndarray | None = None,
) -> list[str]:
    """Independent validator; returns a description of each violated constraint."""
    origin = np.zeros(2) if origin is None else np.asarray(origin, dtype=np.float64)
    problems = []
    for k, pos in enumerate(traj.positions):
        cell = tuple(np.floor((pos - origin) / cell_size).astype(int))
        if cell not in candidates:
            problems.append(f"waypoint {k} at invalid cell {cell}")
    steps = np.diff(traj.positions, axis=0)
    dists = np.hypot(steps[:, 0], steps[:, 1])
    for k, d in enumerate(dists):
        if not (STEP_MIN - 1e-12 <= d <= STEP_MAX + 1e-12):
            problems.append(f"step {k} distance {d:.3f} out of bounds")
    dirs = np.arctan2(steps[:, 1], steps[:, 0])
    for k in range(1, len(dirs)):
        turn = abs(_wrap_angle(float(dirs[k] - dirs[k - 1])))
        if turn >= TURN_LIMIT:
            problems.append(f"turn at step {k} is {np.rad2deg(turn):.1f} deg")
    return problems


# ---------------------------------------------------------------------------
# Frame composition and augmentation


def sample_scene_canonical(scene: PointCloud, rng: np.random.Generator, cell: float = SCENE_SAMPLE_CELL) -> PointCloud:
    """One representative raw point per ``cell`` voxel, fixed for the sequence.

    The representatives are the canonical scene points of the sequence; their
    provenance ids are indices into this canonical set.
    """
    idx = voxel_indices(scene.points, cell)
    order = rng.permutation(len(scene))
    _, first = np.unique(idx[order], axis=0, return_index=True)
    chosen = np.sort(order[first])
    return PointCloud(scene.points[chosen], np.arange(len(chosen), dtype=np.int64))


def compose_frame(
    scene: PointCloud,
    obj: PointCloud,
    waypoint: tuple[np.ndarray, float],
    rng: np.random.Generator,
    floor_height: float = 0.0,
    object_sample: int = OBJECT_SAMPLE_POINTS,
) -> SequenceFrame:
    """Place the object at a waypoint and composite it with the scene sample.

    ``scene`` must already be the canonical (voxel-sampled, provenance-tagged)
    scene. The object is rotated to its heading about the up axis, its base
    put on the floor, and at most ``object_sample`` of its points are used
    (uniformly, without replacement; never upsampled).
    """
    if len(scene) == 0 or len(obj) == 0:
        raise EmptyInputError("scene and object must be nonempty")
    pos, heading = waypoint
    pose = SimilarityTransform.from_yaw(float(heading), (float(pos[0]), float(pos[1]), floor_height))

    n = min(object_sample, len(obj))
    pick = np.sort(rng.choice(len(obj), size=n, replace=False))
    obj_pts = pose.apply(obj.points[pick])
    obj_prov = pick.astype(np.int64) + OBJECT_ID_OFFSET

    pts = np.concatenate([scene.points, obj_pts], axis=0)
    prov = np.concatenate([scene.provenance, obj_prov])
    return SequenceFrame(PointCloud(pts, prov), pose, SimilarityTransform.identity())


def augment_scene(
    frame: SequenceFrame,
    rng: np.random.Generator,
    n_chunks: int | None = None,
    keep_prob: float = SCENE_KEEP_PROB,
) -> SequenceFrame:
    """Per-frame scene variation: random resampling plus cubic chunk removal.

    Only background scene points are candidates for removal; object points
    always survive. ``n_chunks`` overrides the random chunk count (test hook;
    0 disables removal entirely).
    """
    is_obj = frame.is_object()
    keep = np.ones(len(frame.cloud), dtype=bool)
    keep[~is_obj] &= rng.uniform(0.0, 1.0, size=int((~is_obj).sum())) < keep_prob

    scene_pts = frame.cloud.points[~is_obj]
    if len(scene_pts):
        lo, hi = scene_pts.min(axis=0), scene_pts.max(axis=0)
        extent = float(np.max(hi - lo))
        if n_chunks is None:
            n_chunks = int(rng.integers(CHUNKS_MIN, CHUNKS_MAX + 1))
        for _ in range(n_chunks):
            edge = rng.uniform(CHUNK_FRACTION_MIN, CHUNK_FRACTION_MAX) * extent
            center = rng.uniform(lo, hi)
            inside = np.all(np.abs(frame.cloud.points - center) <= edge / 2, axis=1)
            keep &= is_obj | ~inside

    cloud = PointCloud(frame.cloud.points[keep], frame.cloud.provenance[keep])
    return replace(frame, cloud=cloud)


def augment_frame_static(
    frame: SequenceFrame,
    rng: np.random.Generator,
    identity: bool = False,
) -> SequenceFrame:
    """Record a random similarity transform for the 3D-branch view only.

    The stored cloud (the 4D sequence view) is untouched. ``identity`` is a
    test hook that records the identity transform.
    """
    if identity:
        return replace(frame, static_aug=SimilarityTransform.identity())
    yaw = rng.uniform(0.0, 2 * np.pi)
    translation = rng.uniform(-STATIC_AUG_TRANSLATION, STATIC_AUG_TRANSLATION, size=3)
    scale = rng.uniform(*STATIC_AUG_SCALE)
    return replace(frame, static_aug=SimilarityTransform.from_yaw(yaw, translation, scale))


def validate_sequence(seq: Sequence) -> bool:
    """Check consistency and retention thresholds for a generated sequence.

    Requires that at least MIN_CONSISTENT of canonical scene points and of
    sampled object points appear (by provenance) in every frame, and that
    every frame keeps at least MIN_RETENTION of its pre-augmentation points.
    """
    if seq.scene_ref_points <= 0 or seq.object_ref_points <= 0:
        raise ValueError("sequence lacks canonical reference counts")
    pre_count = seq.scene_ref_points + seq.object_ref_points
    common = None
    for frame in seq.frames:
        if len(frame.cloud) / pre_count < MIN_RETENTION:
            return False
        ids = frame.cloud.provenance
        common = ids if common is None else np.intersect1d(common, ids, assume_unique=False)
    n_scene = int(np.sum(common < OBJECT_ID_OFFSET))
    n_obj = len(common) - n_scene
    return (
        n_scene / seq.scene_ref_points >= MIN_CONSISTENT
        and n_obj / seq.object_ref_points >= MIN_CONSISTENT
    )


def build_correspondences(seq: Sequence) -> CorrespondenceSet:
    """Match point indices across every frame pair via shared provenance ids."""
    t = len(seq.frames)
    pair_maps = {}
    for i in range(t):
        for j in range(i + 1, t):
            _, ia, ib = np.intersect1d(
                seq.frames[i].cloud.provenance,
                seq.frames[j].cloud.provenance,
                assume_unique=True,
                return_indices=True,
            )
            pair_maps[(i, j)] = (ia, ib)
    per_frame = [np.arange(len(f.cloud), dtype=np.int64) for f in seq.frames]
    return CorrespondenceSet(pair_maps, per_frame)


# ---------------------------------------------------------------------------
# Sequence file format ("4DC1")


def _transform_fields(tr: SimilarityTransform) -> tuple[float, ...]:
    return (tr.yaw, tr.scale, *tr.translation)


def _transform_from_fields(yaw, scale, tx, ty, tz) -> SimilarityTransform:
    return SimilarityTransform.from_yaw(float(yaw), (float(tx), float(ty), float(tz)), float(scale))


def sequence_to_bytes(seq: Sequence) -> bytes:
    buf = bytearray()
    buf += SEQUENCE_MAGIC
    buf += struct.pack("<II", SEQUENCE_VERSION, len(seq.frames))
    buf += struct.pack("<QQ", seq.scene_id, seq.object_id)
    for frame in seq.frames:
        n = len(frame.cloud)
        buf += struct.pack("<I", n)
        buf += frame.cloud.points.astype("<f4").tobytes()
        buf += frame.cloud.provenance.astype("<u4").tobytes()
        fields = _transform_fields(frame.object_pose) + _transform_fields(frame.static_aug)
        buf += struct.pack("<10f", *fields)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def write_sequence(path: str | Path, seq: Sequence) -> None:
    Path(path).write_bytes(sequence_to_bytes(seq))


def read_sequence(path: str | Path) -> Sequence:
    data = Path(path).read_bytes()
    if len(data) < 28 or data[:4] != SEQUENCE_MAGIC:
        raise DataFormatError(f"{path}: bad sequence magic", 0)
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise DataFormatError(f"{path}: checksum mismatch", len(data) - 4)
    version, t = struct.unpack_from("<II", data, 4)
    if version != SEQUENCE_VERSION:
        raise DataFormatError(f"{path}: unsupported sequence version {version}", 4)
    scene_id, object_id = struct.unpack_from("<QQ", data, 12)
    off = 28
    frames = []
    for _ in range(t):
        if off + 4 > len(data) - 4:
            raise DataFormatError(f"{path}: truncated frame header", off)
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        need = 12 * n + 4 * n + 40
        if off + need > len(data) - 4:
            raise DataFormatError(f"{path}: truncated frame payload", off)
        pts = np.frombuffer(data, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).astype(np.float64)
        off += 12 * n
        prov = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        fields = struct.unpack_from("<10f", data, off)
        off += 40
        frames.append(
            SequenceFrame(
                PointCloud(pts, prov),
                _transform_from_fields(*fields[:5]),
                _transform_from_fields(*fields[5:]),
            )
        )
    if off != len(data) - 4:
        raise DataFormatError(f"{path}: trailing bytes", off)
    return Sequence(frames, scene_id, object_id)


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass
class GenParams:
    per_scene: int = 20
    t: int = 4
    object_sample: int = OBJECT_SAMPLE_POINTS
    scene_cell: float = SCENE_SAMPLE_CELL
    map_cell: float = 0.10
    sequence_attempts: int = 40   # full-sequence rejection budget
    start_attempts: int = 32      # trajectory restarts per attempt


def make_sequence(
    scene: PointCloud,
    obj: PointCloud,
    candidates: set[tuple[int, int]],
    floor_height: float,
    rng: np.random.Generator,
    params: GenParams,
    scene_id: int = 0,
    object_id: int = 0,
) -> Sequence:
    """Generate one validated sequence; raises TrajectoryFailure when the
    rejection budget runs out."""
    canonical = sample_scene_canonical(scene, rng, params.scene_cell)
    object_ref = min(params.object_sample, len(obj))

    for _ in range(params.sequence_attempts):
        traj = None
        for _ in range(params.start_attempts):
            try:
                traj = sample_trajectory(candidates, params.t, rng, cell_size=params.map_cell)
                break
            except TrajectoryFailure:
                continue
        if traj is None:
            raise TrajectoryFailure("no feasible trajectory found")

        frames = []
        for k in range(params.t):
            frame = compose_frame(
                canonical, obj, (traj.positions[k], traj.headings[k]), rng,
                floor_height=floor_height, object_sample=params.object_sample,
            )
            frame = augment_scene(frame, rng)
            frame = augment_frame_static(frame, rng)
            frames.append(frame)
        seq = Sequence(
            frames, scene_id, object_id, traj,
            scene_ref_points=len(canonical), object_ref_points=object_ref,
        )
        if validate_sequence(seq):
            return seq
    raise TrajectoryFailure(f"no valid sequence after {params.sequence_attempts} attempts")


def _generate_one(args):
    scene, objects, scene_idx, traj_idx, seed, params, object_radii, floor_height, candidates_by_radius = args
    rng = np.random.default_rng(np.random.SeedSequence((seed, scene_idx, traj_idx)))
    obj_idx = int(rng.integers(0, len(objects)))
    candidates = candidates_by_radius[obj_idx]
    if not candidates:
        return scene_idx, traj_idx, None, "no valid positions for object"
    try:
        seq = make_sequence(
            scene, objects[obj_idx], candidates, floor_height, rng, params,
            scene_id=scene_idx, object_id=obj_idx,
        )
    except TrajectoryFailure as exc:
        return scene_idx, traj_idx, None, str(exc)
    sidecar = {
        "scene_id": scene_idx,
        "object_id": obj_idx,
        "frames": params.t,
        "scene_ref_points": seq.scene_ref_points,
        "object_ref_points": seq.object_ref_points,
        "seed": seed,
        "trajectory_index": traj_idx,
        "waypoints": ";".join(f"{p[0]:.6f},{p[1]:.6f},{h:.6f}" for p, h in zip(seq.trajectory.positions, seq.trajectory.headings)),
    }
    return scene_idx, traj_idx, sequence_to_bytes(seq), sidecar


def generate_dataset(
    scenes: list[PointCloud],
    objects: list[PointCloud],
    out_dir: str | Path,
    per_scene: int = 20,
    t: int = 4,
    seed: int = 0,
    workers: int = 1,
    params: GenParams | None = None,
    object_radii: list[float] | None = None,
) -> dict:
    """Write one "4DC1" file (plus sidecar) per accepted trajectory.

    Output is a pure function of (inputs, seed): per-sequence RNG seeds are
    positional, so neither worker count nor completion order matters.
    """
    if not scenes or not objects:
        raise EmptyInputError("need at least one scene and one object")
    params = params or GenParams()
    params.per_scene = per_scene
    params.t = t
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if object_radii is None:
        object_radii = [float(np.max(np.linalg.norm(o.points[:, :2], axis=1))) for o in objects]

    tasks = []
    for scene_idx, scene in enumerate(scenes):
        occ = height_accumulate(scene, params.map_cell)
        candidates_by_radius = [valid_positions(occ, r) for r in object_radii]
        if not any(candidates_by_radius):
            log.warning("scene %d has no valid positions; skipped", scene_idx)
            continue
        for traj_idx in range(per_scene):
            tasks.append((scene, objects, scene_idx, traj_idx, seed, params,
                          object_radii, occ.floor_height, candidates_by_radius))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, tasks))
    else:
        results = [_generate_one(task) for task in tasks]

    written, rejected = 0, 0
    for scene_idx, traj_idx, blob, info in results:
        if blob is None:
            rejected += 1
            log.warning("scene %d trajectory %d rejected: %s", scene_idx, traj_idx, info)
            continue
        stem = f"seq_{scene_idx:04d}_{traj_idx:04d}"
        (out_dir / f"{stem}.4dc").write_bytes(blob)
        write_sidecar(out_dir / f"{stem}.txt", info)
        written += 1
    return {"written": written, "rejected": rejected}
