import dataclasses

import numpy as np
import pytest

from sonanet import checkpoint, config
from sonanet.checkpoint import CheckpointError
from sonanet.config import VARIANTS, ConfigError
from sonanet.model import ModelConfig, build, checksum, count_parameters, embed, set_mode

from conftest import CONFIGS


class TestConfig:
    def test_defaults_round_trip_through_text(self):
        cfg = config.defaults()
        assert config.parse_text(config.dump(cfg)) == cfg

    def test_values_and_comments(self):
        cfg = config.parse_text("# header\nsona.r = 4  # trailing\ndropblock.gamma=0.2\nmodel.sona_sites=2,3\n")
        assert cfg["sona.r"] == 4
        assert cfg["dropblock.gamma"] == 0.2
        assert cfg["model.sona_sites"] == ("after_stage2", "after_stage3")

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match=r"x.cfg:2: unknown key 'sona.ratio'"):
            config.parse_text("sona.r=2\nsona.ratio=2\n", "x.cfg")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="train.P"):
            config.parse_text("train.P=four")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            config.parse_text("train.P 4")

    def test_override(self):
        cfg = config.override(config.defaults(), train__P=8)
        assert cfg["train.P"] == 8
        with pytest.raises(ConfigError):
            config.override(cfg, train__Q=1)

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_variants_from_config_alone(self, name):
        mc = config.model_config(config.override(config.defaults(), model__variant=name), 16)
        sites, db = VARIANTS[name]
        assert mc.sona_sites == sites and mc.dropblock.enabled == db

    def test_variant_parameter_ordering(self):
        counts = {n: count_parameters(build(config.model_config(config.override(config.defaults(), model__variant=n), 16), 0))
                  for n in VARIANTS}
        assert counts["BL"] == counts["BL+DB+"] < counts["SONA2-Net"] == counts["BL+SONA2"]
        assert counts["SONA2-Net"] < counts["SONA3-Net"] < counts["SONA2+3-Net"]

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            config.model_config(config.override(config.defaults(), model__variant="SONA9"), 16)

    def test_every_shipped_config_parses_and_builds(self):
        files = sorted(CONFIGS.glob("*.cfg"))
        assert len(files) >= 6
        for path in files:
            mc = config.model_config(config.load(path), 16)
            if path.name != "full_scale.cfg":
                build(mc, 0)

    def test_full_scale_shapes(self):
        mc = config.model_config(config.load(CONFIGS / "full_scale.cfg"), 751)
        assert list(mc.stage_shapes()) == [(256, 96, 32), (512, 48, 16), (1024, 48, 16), (2048, 48, 16)]
        assert mc.global_dim + mc.local_dim == 1536

    def test_model_config_dict_round_trip(self):
        mc = config.model_config(config.load(CONFIGS / "desk_sona23.cfg"), 7)
        assert config.model_config_from_dict(config.model_config_to_dict(mc)) == mc


@pytest.fixture(scope="module")
def trained_like():
    state = build(ModelConfig(sona_sites=("after_stage2", "after_stage3")), 3)
    r = np.random.default_rng(0)
    # make every tensor distinct from its initial value
    for _, t, _ in checkpoint.named_tensors(state):
        t.data = t.data + r.normal(scale=0.01, size=t.shape)
    return set_mode(state, "eval")


class TestCheckpoint:
    def test_round_trip(self, tmp_path, trained_like):
        path = checkpoint.save(tmp_path / "m.ckpt", trained_like, {"steps": 7})
        back, meta = checkpoint.load(path)
        assert checksum(back) == checksum(trained_like)
        assert meta == {"steps": 7}
        assert back.cfg == trained_like.cfg and back.mode == "eval"
        x = np.random.default_rng(1).normal(size=(2, 3, 64, 32))
        assert np.array_equal(embed(back, x), embed(trained_like, x))

    def test_bytes_are_deterministic(self, trained_like):
        assert checkpoint.to_bytes(trained_like) == checkpoint.to_bytes(trained_like)

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.from_bytes(b"NOTACKPT" + bytes(64))

    def test_flipped_bit_detected(self, trained_like):
        buf = bytearray(checkpoint.to_bytes(trained_like))
        buf[len(buf) // 2] ^= 0x01
        with pytest.raises(CheckpointError, match="checksum"):
            checkpoint.from_bytes(bytes(buf))

    def test_truncation_detected(self, trained_like):
        with pytest.raises(CheckpointError):
            checkpoint.from_bytes(checkpoint.to_bytes(trained_like)[:-100])

    def test_shape_mismatch_named(self, trained_like):
        # tensors of one architecture under the header of another
        other = dataclasses.replace(trained_like.cfg, global_dim=16, local_dim=32)
        swapped = dataclasses.replace(trained_like, cfg=other)
        with pytest.raises(CheckpointError, match=r"global\.reduce"):
            checkpoint.from_bytes(checkpoint.to_bytes(swapped))

    def test_tensor_count_mismatch(self, trained_like):
        other = dataclasses.replace(trained_like.cfg, sona_sites=("after_stage2",))
        with pytest.raises(CheckpointError, match="tensors"):
            checkpoint.from_bytes(checkpoint.to_bytes(dataclasses.replace(trained_like, cfg=other)))
