import numpy as np
import pytest

from seqcontrast import seqgen
from seqcontrast.errors import DataFormatError, EmptyInputError, TrajectoryFailure
from seqcontrast.formats import read_sidecar
from seqcontrast.geom import OBJECT_ID_OFFSET, PointCloud, height_accumulate
from seqcontrast.seqgen import (
    CHUNK_FRACTION_MAX,
    CHUNK_FRACTION_MIN,
    CHUNKS_MAX,
    CHUNKS_MIN,
    MIN_CONSISTENT,
    MIN_RETENTION,
    STEP_MAX,
    STEP_MIN,
    TURN_LIMIT,
    GenParams,
    Sequence,
    augment_frame_static,
    augment_scene,
    build_correspondences,
    compose_frame,
    generate_dataset,
    read_sequence,
    sample_scene_canonical,
    sample_trajectory,
    sequence_to_bytes,
    trajectory_violations,
    valid_positions,
    validate_sequence,
    write_sequence,
)


class TestValidPositions:
    def test_blocked_columns_excluded(self):
        # flat floor except one tall pillar column
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 1.0, size=(2000, 2))
        pts = np.column_stack([xy, np.zeros(2000)])
        pillar = np.array([[0.55, 0.55, z] for z in np.arange(0, 1.0, 0.05)])
        occ = height_accumulate(PointCloud(np.vstack([pts, pillar])), 0.10)
        cand = valid_positions(occ, 0.0)
        assert (5, 5) not in cand
        assert (1, 1) in cand

    def test_radius_requires_clearance(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, 1.0, size=(3000, 2))
        pts = np.column_stack([xy, np.zeros(3000)])
        pillar = np.array([[0.55, 0.55, z] for z in np.arange(0, 1.0, 0.05)])
        occ = height_accumulate(PointCloud(np.vstack([pts, pillar])), 0.10)
        wide = valid_positions(occ, 0.25)
        # neighbors of the pillar fail the disc test at radius 0.25
        assert (5, 4) not in wide and (4, 5) not in wide
        narrow = valid_positions(occ, 0.0)
        assert wide < narrow

    def test_empty_map_raises(self):
        from seqcontrast.geom import OccupancyMap2D

        empty = OccupancyMap2D(np.zeros(2), 0.1, {}, {}, {}, 0.0)
        with pytest.raises(EmptyInputError):
            valid_positions(empty, 0.1)


class TestSampleTrajectory:
    def test_constraints_hold_over_many_draws(self, small_candidates):
        occ, cand = small_candidates
        rng = np.random.default_rng(2)
        for _ in range(50):
            traj = sample_trajectory(cand, 4, rng)
            assert len(traj) == 4
            assert trajectory_violations(traj, cand) == []

    def test_step_bounds_and_turns_directly(self, small_candidates):
        _, cand = small_candidates
        rng = np.random.default_rng(3)
        traj = sample_trajectory(cand, 5, rng)
        steps = np.diff(traj.positions, axis=0)
        dists = np.hypot(steps[:, 0], steps[:, 1])
        assert np.all(dists >= STEP_MIN) and np.all(dists <= STEP_MAX)
        dirs = np.arctan2(steps[:, 1], steps[:, 0])
        turns = np.abs((np.diff(dirs) + np.pi) % (2 * np.pi) - np.pi)
        assert np.all(turns < TURN_LIMIT)

    def test_first_heading_faces_first_step(self, small_candidates):
        _, cand = small_candidates
        traj = sample_trajectory(cand, 3, np.random.default_rng(4))
        assert traj.headings[0] == traj.headings[1]

    def test_single_cell_fails(self):
        with pytest.raises(TrajectoryFailure):
            sample_trajectory({(0, 0)}, 3, np.random.default_rng(0))

    def test_length_one_is_a_point(self, small_candidates):
        _, cand = small_candidates
        traj = sample_trajectory(cand, 1, np.random.default_rng(5))
        assert len(traj) == 1 and traj.headings[0] == 0.0

    def test_validator_flags_bad_trajectories(self, small_candidates):
        _, cand = small_candidates
        bad = seqgen.Trajectory(np.array([[0.05, 0.05], [10.0, 10.0]]), np.zeros(2))
        problems = trajectory_violations(bad, cand)
        assert any("distance" in p for p in problems)


class TestSceneCanonical:
    def test_one_point_per_voxel(self, small_room):
        rng = np.random.default_rng(6)
        canon = sample_scene_canonical(small_room, rng, 0.04)
        from seqcontrast.geom import voxel_indices

        idx = voxel_indices(canon.points, 0.04)
        assert len(np.unique(idx, axis=0)) == len(canon)
        np.testing.assert_array_equal(canon.provenance, np.arange(len(canon)))

    def test_points_come_from_scene(self, small_room):
        canon = sample_scene_canonical(small_room, np.random.default_rng(7), 0.04)
        pool = {tuple(p) for p in small_room.points}
        assert all(tuple(p) in pool for p in canon.points[:50])


class TestComposeFrame:
    def test_object_pose_and_provenance(self, small_room, small_object):
        rng = np.random.default_rng(8)
        canon = sample_scene_canonical(small_room, rng, 0.04)
        pos = np.array([0.3, -0.2])
        frame = compose_frame(canon, small_object, (pos, 0.7), rng, floor_height=0.0, object_sample=200)
        is_obj = frame.is_object()
        assert is_obj.sum() == 200
        # recorded pose maps composited object points back to canonical ones
        obj_pts = frame.cloud.points[is_obj]
        back = frame.object_pose.inverse().apply(obj_pts)
        prov = frame.cloud.provenance[is_obj] - OBJECT_ID_OFFSET
        np.testing.assert_allclose(back, small_object.points[prov], atol=1e-9)

    def test_never_upsamples(self, small_room, small_object):
        rng = np.random.default_rng(9)
        canon = sample_scene_canonical(small_room, rng, 0.04)
        frame = compose_frame(canon, small_object, (np.zeros(2), 0.0), rng, object_sample=10_000)
        assert frame.is_object().sum() == len(small_object)


class TestAugmentation:
    def test_objects_survive_scene_augmentation(self, small_room, small_object):
        rng = np.random.default_rng(10)
        canon = sample_scene_canonical(small_room, rng, 0.04)
        frame = compose_frame(canon, small_object, (np.zeros(2), 0.0), rng, object_sample=150)
        for _ in range(10):
            aug = augment_scene(frame, rng)
            assert aug.is_object().sum() == 150
            assert len(aug.cloud) < len(frame.cloud)

    def test_chunk_hook_zero_disables_removal(self, small_room, small_object):
        rng = np.random.default_rng(11)
        canon = sample_scene_canonical(small_room, rng, 0.04)
        frame = compose_frame(canon, small_object, (np.zeros(2), 0.0), rng)
        aug = augment_scene(frame, rng, n_chunks=0, keep_prob=1.0)
        assert len(aug.cloud) == len(frame.cloud)

    def test_chunk_parameters_in_range(self):
        # the sampled chunk count and edge fraction always fall in the
        # documented ranges
        rng = np.random.default_rng(12)
        for _ in range(200):
            n = int(rng.integers(CHUNKS_MIN, CHUNKS_MAX + 1))
            frac = rng.uniform(CHUNK_FRACTION_MIN, CHUNK_FRACTION_MAX)
            assert CHUNKS_MIN <= n <= CHUNKS_MAX
            assert CHUNK_FRACTION_MIN <= frac <= CHUNK_FRACTION_MAX

    def test_static_augmentation_leaves_cloud_untouched(self, small_room, small_object):
        rng = np.random.default_rng(13)
        canon = sample_scene_canonical(small_room, rng, 0.04)
        frame = compose_frame(canon, small_object, (np.zeros(2), 0.0), rng)
        aug = augment_frame_static(frame, rng)
        np.testing.assert_array_equal(aug.cloud.points, frame.cloud.points)
        assert not aug.static_aug.is_identity()
        view = aug.static_view()
        np.testing.assert_allclose(view.points, aug.static_aug.apply(frame.cloud.points), atol=1e-12)
        ident = augment_frame_static(frame, rng, identity=True)
        assert ident.static_aug.is_identity()


class TestValidation:
    def test_generated_sequence_passes(self, small_sequence):
        assert validate_sequence(small_sequence)

    def test_retention_threshold(self, small_sequence):
        # dropping most points of one frame fails retention
        frames = list(small_sequence.frames)
        f0 = frames[0]
        k = int(MIN_RETENTION * (small_sequence.scene_ref_points + small_sequence.object_ref_points)) - 1
        frames[0] = seqgen.SequenceFrame(
            PointCloud(f0.cloud.points[:k], f0.cloud.provenance[:k]),
            f0.object_pose,
            f0.static_aug,
        )
        bad = Sequence(
            frames, 0, 0,
            scene_ref_points=small_sequence.scene_ref_points,
            object_ref_points=small_sequence.object_ref_points,
        )
        assert not validate_sequence(bad)

    def test_missing_reference_counts_rejected(self, small_sequence):
        bare = Sequence(small_sequence.frames, 0, 0)
        with pytest.raises(ValueError):
            validate_sequence(bare)

    def test_consistency_threshold_constants(self):
        assert MIN_CONSISTENT == 0.30 and MIN_RETENTION == 0.50


class TestCorrespondences:
    def test_partial_bijection_and_symmetry(self, small_sequence):
        corr = build_correspondences(small_sequence)
        t = len(small_sequence)
        for i in range(t):
            for j in range(i + 1, t):
                ia, ib = corr.pair_maps[(i, j)]
                assert len(ia) == len(ib) > 0
                assert len(np.unique(ia)) == len(ia)
                assert len(np.unique(ib)) == len(ib)
                # matched points share provenance ids
                np.testing.assert_array_equal(
                    small_sequence.frames[i].cloud.provenance[ia],
                    small_sequence.frames[j].cloud.provenance[ib],
                )
                # reversed lookup swaps the columns
                ra, rb = corr.pairs(j, i)
                np.testing.assert_array_equal(ra, ib)
                np.testing.assert_array_equal(rb, ia)

    def test_scene_points_coincide_objects_map_back(self, small_sequence):
        corr = build_correspondences(small_sequence)
        for (i, j), (ia, ib) in corr.pair_maps.items():
            fi, fj = small_sequence.frames[i], small_sequence.frames[j]
            prov = fi.cloud.provenance[ia]
            scene_mask = prov < OBJECT_ID_OFFSET
            np.testing.assert_allclose(
                fi.cloud.points[ia][scene_mask], fj.cloud.points[ib][scene_mask], atol=1e-6
            )
            obj_mask = ~scene_mask
            a = fi.object_pose.inverse().apply(fi.cloud.points[ia][obj_mask])
            b = fj.object_pose.inverse().apply(fj.cloud.points[ib][obj_mask])
            np.testing.assert_allclose(a, b, atol=1e-6)


class TestSequenceFormat:
    def test_roundtrip(self, small_sequence, tmp_path):
        path = tmp_path / "s.4dc"
        write_sequence(path, small_sequence)
        back = read_sequence(path)
        assert len(back) == len(small_sequence)
        assert back.scene_id == small_sequence.scene_id
        for fa, fb in zip(back.frames, small_sequence.frames):
            np.testing.assert_allclose(fa.cloud.points, fb.cloud.points, atol=1e-6)
            np.testing.assert_array_equal(fa.cloud.provenance, fb.cloud.provenance)
            np.testing.assert_allclose(fa.object_pose.yaw, fb.object_pose.yaw, atol=1e-6)
            np.testing.assert_allclose(
                fa.static_aug.translation, fb.static_aug.translation, atol=1e-6
            )

    def test_serialization_deterministic(self, small_sequence):
        assert sequence_to_bytes(small_sequence) == sequence_to_bytes(small_sequence)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.4dc"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(DataFormatError) as err:
            read_sequence(path)
        assert err.value.offset == 0

    def test_corruption_detected(self, small_sequence, tmp_path):
        path = tmp_path / "c.4dc"
        write_sequence(path, small_sequence)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError):
            read_sequence(path)


class TestGenerateDataset:
    def test_files_and_sidecars(self, small_dataset):
        seqs = sorted(small_dataset.glob("*.4dc"))
        assert seqs
        for p in seqs:
            seq = read_sequence(p)
            assert len(seq) == 4
            side = read_sidecar(p.with_suffix(".txt"))
            assert int(side["frames"]) == 4
            assert int(side["scene_ref_points"]) > 0
            assert int(side["object_ref_points"]) > 0
            # persisted sequences re-validate with the sidecar counts
            full = Sequence(
                seq.frames, seq.scene_id, seq.object_id,
                scene_ref_points=int(side["scene_ref_points"]),
                object_ref_points=int(side["object_ref_points"]),
            )
            assert validate_sequence(full)

    def test_empty_inputs_rejected(self, tmp_path):
        with pytest.raises(EmptyInputError):
            generate_dataset([], [], tmp_path, per_scene=1)

    def test_worker_count_invariance(self, small_room, small_object, tmp_path):
        params = GenParams(t=3, object_sample=200, scene_cell=0.05)
        a, b = tmp_path / "w1", tmp_path / "w2"
        generate_dataset([small_room], [small_object], a, per_scene=2, t=3, seed=9, workers=1, params=params)
        generate_dataset([small_room], [small_object], b, per_scene=2, t=3, seed=9, workers=2, params=params)
        fa, fb = sorted(p.name for p in a.glob("*.4dc")), sorted(p.name for p in b.glob("*.4dc"))
        assert fa == fb and fa
        for name in fa:
            assert (a / name).read_bytes() == (b / name).read_bytes()
