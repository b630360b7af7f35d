"""Command-line harness: full command flow on a miniature config."""

import json
import os

import numpy as np
import pytest

from sdlab import cli


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cliws")
    cfg = ws / "run.cfg"
    cfg.write_text("\n".join([
        "seed = 5",
        f"data_dir = {ws / 'data'}",
        f"out_dir = {ws / 'out'}",
        f"model_path = {ws / 'out' / 'model.sdlb'}",
        "dataset_size = 16",
        "train_steps = 60",
        "encoder_steps = 30",
        "classifier_steps = 30",
        "K = 2",
    ]) + "\n")
    rc = cli.main(["--config", str(cfg), "train"])
    assert rc == cli.EXIT_OK
    return ws, cfg


def _manifest(ws, name):
    with open(ws / "out" / name, "r", encoding="utf-8") as fh:
        return json.load(fh)


class TestTrain:
    def test_artifacts_written(self, workspace):
        ws, _ = workspace
        assert (ws / "out" / "model.sdlb").exists()
        assert (ws / "data" / "manifest.tsv").exists()
        doc = _manifest(ws, "train.manifest.json")
        assert doc["command"] == "train"
        assert doc["config"]["dataset_size"] == 16
        assert doc["seed"] == 5
        assert "wall_time_s" in doc and "git_describe" in doc


class TestInvertReconstructEdit:
    def test_invert_writes_run_and_loss_curve(self, workspace):
        ws, cfg = workspace
        rc = cli.main(["--config", str(cfg), "invert",
                       "--image", str(ws / "data" / "scene_0000.png"),
                       "--prompt", self._prompt(ws)])
        assert rc == cli.EXIT_OK
        assert (ws / "out" / "run.sdlb").exists()
        csv = (ws / "out" / "run_loss.csv").read_text().splitlines()
        assert csv[0] == "t,iteration,loss"
        assert len(csv) > 30

    @staticmethod
    def _prompt(ws):
        line = (ws / "data" / "manifest.tsv").read_text().splitlines()[0].split("\t")
        return f"{line[2]} {line[1]} {line[5]}"

    def test_invert_manifest_deterministic(self, workspace):
        ws, cfg = workspace
        args = ["--config", str(cfg), "invert",
                "--image", str(ws / "data" / "scene_0000.png"),
                "--prompt", self._prompt(ws)]
        assert cli.main(args) == cli.EXIT_OK
        first = (ws / "out" / "invert.manifest.json").read_bytes()
        run_first = (ws / "out" / "run.sdlb").read_bytes()
        assert cli.main(args) == cli.EXIT_OK
        second = (ws / "out" / "invert.manifest.json").read_bytes()
        run_second = (ws / "out" / "run.sdlb").read_bytes()
        a = json.loads(first)
        b = json.loads(second)
        a.pop("wall_time_s")
        b.pop("wall_time_s")
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert run_first == run_second

    def test_reconstruct(self, workspace):
        ws, cfg = workspace
        rc = cli.main(["--config", str(cfg), "reconstruct",
                       "--run", str(ws / "out" / "run.sdlb")])
        assert rc == cli.EXIT_OK
        assert (ws / "out" / "reconstruction.png").exists()
        doc = _manifest(ws, "reconstruct.manifest.json")
        assert set(doc["results"]) >= {"psnr", "ssim", "baseline_psnr"}

    def test_edit_and_report(self, workspace):
        ws, cfg = workspace
        rc = cli.main(["--config", str(cfg), "edit",
                       "--run", str(ws / "out" / "run.sdlb"),
                       "--target", "red cross striped"])
        assert rc == cli.EXIT_OK
        assert (ws / "out" / "edited.png").exists()
        rows = [json.loads(line) for line in
                (ws / "out" / "edits.jsonl").read_text().splitlines()]
        assert rows[-1]["target"] == "red cross striped"
        assert 0.0 <= rows[-1]["target_alignment"] <= 1.0

    def test_eval_table(self, workspace, capsys):
        ws, cfg = workspace
        rc = cli.main(["--config", str(cfg), "eval", str(ws / "out" / "run.sdlb")])
        assert rc == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "psnr" in out and "run.sdlb" in out
        assert (ws / "out" / "eval.jsonl").exists()

    def test_sweep_tau_covers_grid(self, workspace):
        ws, cfg = workspace
        rc = cli.main(["--config", str(cfg), "sweep-tau",
                       "--run", str(ws / "out" / "run.sdlb"),
                       "--target", "red cross striped"])
        assert rc == cli.EXIT_OK
        rows = [json.loads(line) for line in
                (ws / "out" / "sweep_tau.jsonl").read_text().splitlines()]
        assert [r["tau_u"] for r in rows] == [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0]


class TestKvswapAblate:
    def test_kvswap(self, workspace):
        ws, cfg = workspace
        rc = cli.main(["--config", str(cfg), "kvswap", "--pairs", "2"])
        assert rc == cli.EXIT_OK
        doc = _manifest(ws, "kvswap.manifest.json")
        assert doc["results"]["pairs"] == 2
        assert 0.0 <= doc["results"]["value_swap_flip_rate"] <= 1.0

    def test_ablate(self, workspace):
        ws, cfg = workspace
        rc = cli.main(["--config", str(cfg), "ablate", "--image-index", "0"])
        assert rc == cli.EXIT_OK
        rows = [json.loads(line) for line in
                (ws / "out" / "ablate.jsonl").read_text().splitlines()]
        variants = {r["variant"] for r in rows}
        assert {"full", "no_att_reg", "direct_embedding",
                "edit_without_uncond_injection", "edit_with_uncond_injection"} <= variants


class TestExitCodes:
    def test_missing_checkpoint_is_io_error(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"model_path = {tmp_path/'missing.sdlb'}\nout_dir = {tmp_path}\n")
        rc = cli.main(["--config", str(cfg), "reconstruct", "--run", "x.sdlb"])
        assert rc == cli.EXIT_IO

    def test_config_parse_error(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("warp = 9\n")
        rc = cli.main(["--config", str(cfg), "train"])
        assert rc == cli.EXIT_CONFIG

    def test_unknown_flag_is_config_error(self):
        assert cli.main(["definitely-not-a-command"]) == cli.EXIT_CONFIG

    def test_numeric_abort_maps_to_4(self, monkeypatch, tmp_path):
        from sdlab.errors import NumericAbort

        def boom(args):
            raise NumericAbort("synthetic")

        monkeypatch.setitem(cli.__dict__, "cmd_train", boom)
        parser_args = ["train"]
        # rebuild parser so the patched handler is bound
        monkeypatch.setattr(cli, "build_parser", lambda: _patched_parser(boom))
        assert cli.main(parser_args) == cli.EXIT_NUMERIC

    def test_corrupt_checkpoint_is_io_error(self, tmp_path):
        bad = tmp_path / "model.sdlb"
        bad.write_bytes(b"JUNKJUNKJUNK")
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"model_path = {bad}\nout_dir = {tmp_path}\n")
        rc = cli.main(["--config", str(cfg), "kvswap"])
        assert rc == cli.EXIT_IO


def _patched_parser(fn):
    import argparse

    p = argparse.ArgumentParser()
    p.add_argument("--config")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("train")
    sp.set_defaults(fn=fn)
    return p
