"""Checkpoint container byte format and config file parsing."""

import numpy as np
import pytest

from sdlab.checkpoint import MAGIC, load, save
from sdlab.config import RunConfig, load_config, parse_config
from sdlab.errors import CheckpointError, ConfigError


class TestCheckpointContainer:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = {
            "weights": rng.standard_normal((3, 4, 5)).astype(np.float32),
            "scalar": np.array([1.5], dtype=np.float32),
            "unicode névé": rng.standard_normal(7).astype(np.float32),
        }
        path = tmp_path / "x.sdlb"
        save(path, entries)
        back = load(path)
        assert sorted(back) == sorted(entries)
        for k in entries:
            assert back[k].dtype == np.float32
            assert np.array_equal(back[k], entries[k])

    def test_save_load_save_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        entries = {f"e{i}": rng.standard_normal((i + 1, 3)).astype(np.float32)
                   for i in range(5)}
        p1 = tmp_path / "a.sdlb"
        p2 = tmp_path / "b.sdlb"
        save(p1, entries)
        save(p2, load(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_starts_with_magic(self, tmp_path):
        path = tmp_path / "m.sdlb"
        save(path, {"x": np.zeros(1, dtype=np.float32)})
        assert path.read_bytes()[:4] == MAGIC

    def test_unknown_magic_rejected_with_offset(self, tmp_path):
        path = tmp_path / "bad.sdlb"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError) as err:
            load(path)
        assert err.value.offset == 0

    def test_truncation_reports_byte_offset(self, tmp_path):
        path = tmp_path / "t.sdlb"
        save(path, {"x": np.arange(6, dtype=np.float32)})
        blob = path.read_bytes()
        cut = tmp_path / "cut.sdlb"
        cut.write_bytes(blob[:-8])
        with pytest.raises(CheckpointError) as err:
            load(cut)
        assert err.value.offset is not None

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "v.sdlb"
        save(path, {"x": np.zeros(2, dtype=np.float32)})
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "g.sdlb"
        save(path, {"x": np.zeros(2, dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError):
            load(path)


class TestRunSerialization:
    def test_inversion_run_round_trip(self, tmp_path, tiny_run):
        from sdlab.pipeline import load_run, save_run

        path = tmp_path / "run.sdlb"
        save_run(path, tiny_run)
        back = load_run(path)
        assert np.array_equal(back.image, tiny_run.image)
        assert np.array_equal(back.tokens, tiny_run.tokens)
        assert back.config == tiny_run.config
        for t in tiny_run.value_embeds:
            assert np.array_equal(back.value_embeds[t], tiny_run.value_embeds[t])
        for a, b in zip(back.trajectory.latents, tiny_run.trajectory.latents):
            assert np.array_equal(a, b)
        t = max(tiny_run.value_embeds)
        from sdlab.attention import COND, CROSS

        orig = tiny_run.trajectory.tape_at(t).maps_at(t, COND, CROSS)
        redo = back.trajectory.tape_at(t).maps_at(t, COND, CROSS)
        assert sorted(orig) == sorted(redo)
        for layer in orig:
            assert np.array_equal(orig[layer].data, redo[layer].data)
        assert back.loss_curves.keys() == tiny_run.loss_curves.keys()

    def test_stack_round_trip_preserves_checksums(self, tmp_path, tiny_stack):
        from sdlab.pipeline import load_stack, save_stack

        path = tmp_path / "stack.sdlb"
        save_stack(path, tiny_stack)
        back = load_stack(path, tiny_stack.config)
        assert back.denoiser.checksum() == tiny_stack.denoiser.checksum()
        assert back.text_encoder.checksum() == tiny_stack.text_encoder.checksum()
        assert back.image_encoder.checksum() == tiny_stack.image_encoder.checksum()
        assert back.classifier.checksum() == tiny_stack.classifier.checksum()


class TestRunConfig:
    def test_defaults_follow_the_recipe(self):
        cfg = RunConfig()
        assert cfg.T == 30
        assert cfg.w_invert == 1.0
        assert cfg.w_edit == 7.5
        assert cfg.K == 100
        assert cfg.lr == 1e-4
        assert (cfg.beta1, cfg.beta2) == (0.0, 0.999)
        assert cfg.tau_u == 0.5

    def test_parse_with_comments_and_blank_lines(self):
        cfg = parse_config("""
# comment
seed = 7
T=12          # trailing comment
w_edit = 5.0
att_reg = false
""")
        assert cfg.seed == 7 and cfg.T == 12 and cfg.w_edit == 5.0
        assert cfg.att_reg is False

    def test_unknown_key_rejected_by_name(self):
        with pytest.raises(ConfigError) as err:
            parse_config("warp_factor = 9")
        assert "warp_factor" in str(err.value)

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("seed=1\nseed=2")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("T = soon")

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            parse_config("T = 1")
        with pytest.raises(ConfigError):
            parse_config("lr = 0")
        with pytest.raises(ConfigError):
            parse_config("tau_u = 1.5")
        with pytest.raises(ConfigError):
            parse_config("k_schedule = sometimes")

    def test_text_round_trip(self):
        cfg = RunConfig(seed=3, T=12, tau_v=0.25, att_reg=False)
        assert parse_config(cfg.to_text()) == cfg

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")
