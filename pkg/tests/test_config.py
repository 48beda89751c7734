from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dettrans import checkpoint as ckpt_io
from dettrans.backbone import ConfigError
from dettrans.checkpoint import CheckpointError
from dettrans.config import DESK, RunConfig
from dettrans.model import DetTransNet
from dettrans.train import LossRecord, OptimizerState

ROOT = Path(__file__).resolve().parents[1]
DESK_TOML = ROOT / "configs" / "desk.toml"


class TestRunConfig:
    def test_committed_desk_profile(self):
        cfg = RunConfig.load(DESK_TOML)
        p = cfg.patch
        assert (p.image_height, p.image_width, p.channels, p.patch_size, p.overlap) == (96, 96, 3, 16, 8)
        assert (cfg.encoder.embed_dim, cfg.encoder.depth, cfg.encoder.heads, cfg.residual_blocks) == (64, 4, 4, 2)
        assert cfg.rpn.kernel_size == 3 and cfg.rpn.anchor_spec.num_anchors == 3
        assert cfg.head.num_classes == 3
        assert (cfg.train.batch_size, cfg.train.rois_per_image) == (2, 64)
        assert cfg.data.resize_target == 96

    def test_round_trip_fixpoint(self):
        cfg = RunConfig.load(DESK_TOML)
        text = cfg.to_toml()
        again = RunConfig.from_toml(text)
        assert again == cfg and again.to_toml() == text

    @settings(max_examples=25, deadline=None)
    @given(
        st.sampled_from([(96, 16, 8), (32, 8, 4), (64, 16, 0), (40, 8, 0)]),
        st.integers(1, 4),
        st.sampled_from([1, 2, 4]),
        st.integers(0, 3),
        st.floats(1e-5, 1e-2),
        st.booleans(),
    )
    def test_round_trip_property(self, geom, depth, heads, blocks, lr, flip):
        H, P, m = geom
        cfg = DESK.with_overrides({
            "patch.image_height": H, "patch.image_width": H, "patch.patch_size": P, "patch.overlap": m,
            "data.resize_target": H, "encoder.depth": depth, "encoder.heads": heads,
            "encoder.residual_blocks": blocks, "train.lr": lr, "train.hflip": flip,
        })
        assert RunConfig.from_toml(cfg.to_toml()) == cfg

    def test_bad_patch_names_fields(self):
        with pytest.raises(ConfigError, match=r"H=32.*P=8.*m=3"):
            DESK.with_overrides({"patch.image_height": 32, "patch.image_width": 32, "patch.overlap": 3,
                                 "patch.patch_size": 8, "data.resize_target": 32})

    @pytest.mark.parametrize(
        "text, match",
        [
            ("[patch]\nimage_height = 'tall'\n", "patch.image_height"),
            ("[bogus]\nx = 1\n", "bogus"),
            ("[train]\nrois_per_image = 0\n", "rois_per_image"),
            ("[encoder]\nembed_dim = 10\n", "heads"),
            ("[data]\nmode = 'coco'\n", "annotations"),
            ("[rpn]\nnms_iou = 1.5\n", "nms_iou"),
            ("[run]\nseed = 1\ncolour = 'red'\n", "colour"),
            ("not toml at all [", "TOML"),
        ],
    )
    def test_invalid(self, text, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.from_toml(text)

    def test_resize_target_must_match_model(self):
        with pytest.raises(ConfigError, match="resize_target"):
            RunConfig.from_toml("[data]\nresize_target = 800\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load(tmp_path / "nope.toml")

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="train.speed"):
            DESK.with_overrides({"train.speed": 3})


def small_cfg():
    return DESK.with_overrides({
        "patch.image_height": 32, "patch.image_width": 32, "patch.patch_size": 8, "patch.overlap": 4,
        "data.resize_target": 32, "data.image_size": 32, "encoder.embed_dim": 16, "encoder.depth": 1,
        "encoder.heads": 2, "rpn.hidden_dim": 16, "head.hidden_dim": 16, "head.pool_size": 3,
    })


class TestCheckpoint:
    def make(self):
        cfg = small_cfg()
        model = DetTransNet(cfg.model_config(), seed=0)
        st = OptimizerState(step=3)
        for n, p in model.phase1_parameters():
            st.m[n] = np.full(p.shape, 0.25, np.float32)
            st.v[n] = np.full(p.shape, 0.5, np.float32)
        recs = [LossRecord(0, 1, 0.5, {"rpn_cls": 0.25, "rpn_reg": 0.25})]
        return cfg, model, ckpt_io.from_model(cfg, model, 7, {1: st, 2: OptimizerState()}, recs, ["a", "b", "c"])

    def test_round_trip_bit_exact(self, tmp_path):
        cfg, model, ck = self.make()
        ckpt_io.save(tmp_path / "x.ckpt", ck)
        back = ckpt_io.load(tmp_path / "x.ckpt")
        assert back.iteration == 7 and back.class_names == ["a", "b", "c"]
        assert back.config.to_dict()["patch"] == cfg.to_dict()["patch"]
        for n, p in model.named_parameters():
            assert back.params[n].tobytes() == p.data.tobytes()
        assert back.optimizers[1].step == 3
        assert all(back.optimizers[1].m[n].tobytes() == ck.optimizers[1].m[n].tobytes() for n in ck.optimizers[1].m)
        assert back.records[0].components == {"rpn_cls": 0.25, "rpn_reg": 0.25}
        rebuilt = ckpt_io.build_model(back)
        assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(rebuilt.parameters(), model.parameters()))
        # re-encoding what was decoded reproduces the file
        assert ckpt_io.encode(back) == (tmp_path / "x.ckpt").read_bytes()

    def test_little_endian_float32_blobs(self):
        _, model, ck = self.make()
        payload = ckpt_io.encode(ck)
        first = next(iter(ck.params.values()))
        assert first.astype("<f4").tobytes() in payload
        assert payload.startswith(b"DTCKPT")

    def test_output_dir_not_stored(self):
        cfg, model, _ = self.make()
        a = ckpt_io.encode(ckpt_io.from_model(cfg, model))
        b = ckpt_io.encode(ckpt_io.from_model(cfg.with_overrides({"run.output_dir": "elsewhere"}), model))
        assert a == b

    def test_corruption_detected(self, tmp_path):
        _, _, ck = self.make()
        raw = bytearray(ckpt_io.encode(ck))
        raw[len(raw) // 2] ^= 0x01
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            ckpt_io.load(tmp_path / "bad.ckpt")

    def test_version_checked(self):
        _, _, ck = self.make()
        raw = bytearray(ckpt_io.encode(ck))
        raw[6] = 99
        with pytest.raises(CheckpointError, match="version"):
            ckpt_io.decode(bytes(raw))

    def test_shape_mismatch(self):
        _, _, ck = self.make()
        name = next(iter(ck.params))
        ck.params[name] = np.zeros((1, 1), np.float32)
        with pytest.raises(CheckpointError, match=name):
            ckpt_io.build_model(ck)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        _, _, ck = self.make()
        ckpt_io.save(tmp_path / "a.ckpt", ck)
        ckpt_io.save(tmp_path / "a.ckpt", ck)
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]
