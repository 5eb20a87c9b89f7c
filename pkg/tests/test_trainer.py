import numpy as np
import pytest

from seqcontrast.errors import EmptyInputError
from seqcontrast.nets import ModelConfig, UNetConfig, build_parameters
from seqcontrast.trainer import (
    Checkpoint,
    ContrastivePretrainer,
    TrainConfig,
    backbone_features,
    balance_batch,
    export_backbone,
    learning_rate_at,
    load_checkpoint,
    load_dataset,
    pretrain,
    probe,
    save_checkpoint,
)

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def tiny_model():
    return ModelConfig(
        unet3d=UNetConfig(dim=3, channels=(4, 8), projection_width=8),
        unet4d=UNetConfig(dim=4, channels=(3, 6), projection_width=8),
        voxel3d=0.08,
        voxel4d=0.16,
    )


def tiny_cfg(**overrides):
    base = dict(
        learning_rate=0.25,
        batch_size=2,
        steps=3,
        seed=0,
        t=4,
        voxel3d=0.08,
        voxel4d=0.16,
        max_corr_per_pair=64,
        max_points_3d4d=96,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(small_dataset):
    return load_dataset(small_dataset)


class TestSchedule:
    def test_closed_form_examples(self):
        cfg = TrainConfig(learning_rate=0.25, decay_factor=0.99, decay_interval=1000)
        assert learning_rate_at(500, cfg) == pytest.approx(0.25)
        assert learning_rate_at(1000, cfg) == pytest.approx(0.25 * 0.99)
        assert learning_rate_at(2500, cfg) == pytest.approx(0.245025)

    def test_matches_closed_form_everywhere(self):
        cfg = TrainConfig(learning_rate=0.1, decay_factor=0.97, decay_interval=50)
        for step in range(0, 500, 7):
            assert learning_rate_at(step, cfg) == pytest.approx(0.1 * 0.97 ** (step // 50))


class TestBatchBalance:
    @pytest.mark.parametrize("t,size", [(3, 16), (4, 12), (5, 10), (6, 8), (2, 24)])
    def test_sizes(self, t, size):
        assert balance_batch(t) == size

    def test_invalid_length(self):
        with pytest.raises(ValueError):
            balance_batch(0)


class TestConfigValidation:
    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(decay_factor=1.5)


class TestPretrain:
    def test_empty_dataset_rejected(self):
        with pytest.raises(EmptyInputError):
            pretrain([], tiny_cfg())

    def test_zero_steps_equals_initialization(self, dataset):
        cfg = tiny_cfg(steps=0)
        model = tiny_model()
        ckpt, reports = pretrain(dataset, cfg, model)
        assert reports == []
        init = build_parameters(model, seed=cfg.seed, dtype=cfg.np_dtype)
        assert set(ckpt.tensors) == set(init)
        for k in init:
            np.testing.assert_array_equal(ckpt.tensors[k], init[k].value)

    def test_loss_decreases_and_reports_consistent(self, dataset):
        ckpt, reports = pretrain(dataset, tiny_cfg(steps=3), tiny_model())
        assert len(reports) == 3
        for rep in reports:
            assert rep.check(tol=1e-6)
            assert np.isfinite(rep.total)
        assert ckpt.step == 3

    def test_float64_bit_exact_reproduction(self, dataset):
        cfg = tiny_cfg(steps=2, dtype="float64")
        model = tiny_model()
        a, ra = pretrain(dataset, cfg, model)
        b, rb = pretrain(dataset, cfg, model)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])
        assert [r.total for r in ra] == [r.total for r in rb]

    def test_float32_curves_close(self, dataset):
        cfg = tiny_cfg(steps=2)
        a = pretrain(dataset, cfg, tiny_model())[1]
        b = pretrain(dataset, cfg, tiny_model())[1]
        np.testing.assert_allclose([r.total for r in a], [r.total for r in b], atol=1e-6)

    def test_initial_weights_resume(self, dataset):
        model = tiny_model()
        first, _ = pretrain(dataset, tiny_cfg(steps=1), model)
        resumed, _ = pretrain(dataset, tiny_cfg(steps=0), model, initial=first.tensors)
        for k in first.tensors:
            np.testing.assert_array_equal(resumed.tensors[k], first.tensors[k])

    def test_log_file_format(self, dataset, tmp_path):
        log = tmp_path / "train.log"
        pretrain(dataset, tiny_cfg(steps=2), tiny_model(), log_path=log)
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 2
        cols = lines[0].split("\t")
        assert len(cols) == 7 and cols[0] == "1"
        assert float(cols[1]) == pytest.approx(0.25)

    def test_untouched_parameters_stay_at_init(self, dataset):
        """With only the 3D-to-4D term active (stop-gradient on the predictor
        outputs), both predictors keep their initialization bit-for-bit."""
        from seqcontrast.losses import LossWeights

        model = tiny_model()
        cfg = tiny_cfg(steps=3, weights=LossWeights(0.0, 1.0, 0.0))
        ckpt, _ = pretrain(dataset, cfg, model)
        init = build_parameters(model, seed=cfg.seed, dtype=cfg.np_dtype)
        moved = 0
        for k in ckpt.tensors:
            if k.startswith(("pred3d.", "pred4d.")):
                np.testing.assert_array_equal(ckpt.tensors[k], init[k].value)
            elif not np.array_equal(ckpt.tensors[k], init[k].value):
                moved += 1
        assert moved > 0  # encoders did train


class TestCheckpointIO:
    def test_roundtrip_preserves_weights_and_config(self, dataset, tmp_path):
        cfg = tiny_cfg(steps=1)
        ckpt, _ = pretrain(dataset, cfg, tiny_model())
        path = tmp_path / "ck.4dcw"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert back.step == ckpt.step
        assert back.model.unet3d.channels == ckpt.model.unet3d.channels
        assert back.model.unet4d.channels == ckpt.model.unet4d.channels
        assert back.train.batch_size == cfg.batch_size
        assert back.train.seed == cfg.seed
        assert back.train.dtype == cfg.dtype
        assert set(back.tensors) == set(ckpt.tensors)
        for k in ckpt.tensors:
            np.testing.assert_array_equal(back.tensors[k], ckpt.tensors[k])

    def test_export_backbone_drops_heads(self, dataset):
        ckpt, _ = pretrain(dataset, tiny_cfg(steps=1), tiny_model())
        bb = export_backbone(ckpt)
        assert all(k.startswith("unet3d.") for k in bb.tensors)
        assert any(k.startswith("proj3d.") for k in ckpt.tensors)
        assert not any(k.startswith(("proj", "pred", "unet4d")) for k in bb.tensors)

    def test_backbone_forward_matches_full_model(self, dataset):
        ckpt, _ = pretrain(dataset, tiny_cfg(steps=1), tiny_model())
        bb = export_backbone(ckpt)
        pts = dataset[0].frames[0].cloud.points[:300]
        a, rows_a = backbone_features(pts, ckpt)
        b, rows_b = backbone_features(pts, bb)
        np.testing.assert_array_equal(rows_a, rows_b)
        np.testing.assert_array_equal(a, b)

    def test_reexport_idempotent(self, dataset, tmp_path):
        ckpt, _ = pretrain(dataset, tiny_cfg(steps=1), tiny_model())
        bb = export_backbone(ckpt)
        p1, p2 = tmp_path / "a.4dcw", tmp_path / "b.4dcw"
        save_checkpoint(p1, bb)
        save_checkpoint(p2, export_backbone(load_checkpoint(p1)))
        assert p1.read_bytes() == p2.read_bytes()

    def test_export_without_backbone_rejected(self):
        empty = Checkpoint({"proj3d.w": np.ones((2, 2), np.float32)}, 0, tiny_model(), tiny_cfg())
        with pytest.raises(ValueError):
            export_backbone(empty)


class TestProbe:
    def test_untrained_margin_near_zero(self, dataset):
        model = tiny_model()
        init = build_parameters(model, seed=123)
        ckpt = Checkpoint({k: p.value for k, p in init.items()}, 0, model, tiny_cfg())
        rep = probe(ckpt, dataset, max_pairs_per_sequence=400, seed=1)
        assert rep["pairs"] >= 1000
        assert abs(rep["margin"]) < 0.1

    def test_identical_features_probe_to_one(self, dataset):
        """Corresponding scene points land in the same voxel when the static
        augmentation is the identity, so their features coincide."""
        from dataclasses import replace

        from seqcontrast.geom import SimilarityTransform
        from seqcontrast.seqgen import Sequence

        seq = dataset[0]
        ident = SimilarityTransform.identity()
        frames = [replace(f, static_aug=ident) for f in seq.frames]
        same = Sequence([frames[0], frames[0]], seq.scene_id, seq.object_id)
        model = tiny_model()
        init = build_parameters(model, seed=5)
        ckpt = Checkpoint({k: p.value for k, p in init.items()}, 0, model, tiny_cfg())
        rep = probe(ckpt, [same], seed=2)
        assert rep["corresponding"] == pytest.approx(1.0, abs=1e-6)


class TestEstimatorFacade:
    def test_get_set_params(self):
        est = ContrastivePretrainer(steps=7)
        assert est.get_params()["steps"] == 7
        est.set_params(steps=9, learning_rate=0.1)
        assert est.steps == 9 and est.learning_rate == 0.1
        with pytest.raises(ValueError):
            est.set_params(bogus=1)

    def test_fit_transform_shapes(self, dataset):
        est = ContrastivePretrainer(steps=1, batch_size=2, seed=0, model=tiny_model())
        est.fit(dataset)
        pts = dataset[0].frames[0].cloud.points[:200]
        feats = est.transform(pts)
        assert feats.shape == (200, tiny_model().unet3d.projection_width)

    def test_transform_before_fit_rejected(self):
        with pytest.raises(RuntimeError):
            ContrastivePretrainer().transform(np.zeros((3, 3)))

    def test_fit_from_directory(self, small_dataset):
        est = ContrastivePretrainer(steps=1, batch_size=2, model=tiny_model())
        est.fit(small_dataset)
        assert est.checkpoint_.step == 1
