"""End-to-end exercises of the command-line entry point.

Training runs here are a few steps on a doll-sized model; the point is
artifact contracts, exit codes, and byte-level reproducibility, not
quality.
"""

import json

import pytest

from duoflow import cli
from duoflow.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from duoflow.config import load_config

BASE = {
    "seed": "3",
    "precision": "float64",
    "model.d_model": "16",
    "model.n_heads": "2",
    "model.n_double": "1",
    "model.n_single": "1",
    "model.d_enc": "8",
    "model.adapter_hidden": "12",
    "train.stage": "0",
    "train.steps": "4",
    "train.batch_size": "2",
    "train.resolution_schedule": "16",
    "train.boundaries": "",
    "sample.steps": "5",
    "eval.captions": "4",
    "eval.min_samples": "1",
    "eval.batch_size": "2",
    "ablate.arms": "no-align",
    "datagen.count": "3",
}


def write_cfg(path, **overrides):
    pairs = dict(BASE, **{k: v for k, v in overrides.items() if v is not None})
    path.write_text("".join(f"{k} = {v}\n" for k, v in pairs.items()))
    return str(path)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Stage 0 -> 1 -> 2 chain trained once for the whole module."""
    root = tmp_path_factory.mktemp("cli-runs")
    cfg = write_cfg(root / "tiny.cfg")
    out0, out1, out2 = root / "run0", root / "run1", root / "run2"
    assert cli.main(["train", "--config", cfg, "--out", str(out0), "--stage", "0"]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(out1), "--stage", "1",
                     "--init", str(out0 / "stage0.ckpt")]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(out2), "--stage", "2",
                     "--init", str(out1 / "stage1.ckpt")]) == 0
    return {"cfg": cfg, "root": root, "run0": out0, "run1": out1, "run2": out2}


class TestTrain:
    def test_artifacts(self, runs):
        out = runs["run0"]
        assert (out / "stage0.ckpt").exists()
        assert (out / "resolved.cfg").exists()
        lines = (out / "stage0_metrics.ndjson").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [0, 1, 2, 3]
        rc = load_config(out / "resolved.cfg")
        assert rc.train.steps == 4 and rc.seed == 3

    def test_stage1_without_init_rejected(self, runs, tmp_path, capsys):
        code = cli.main(["train", "--config", runs["cfg"],
                         "--out", str(tmp_path / "x"), "--stage", "1"])
        assert code == 1
        assert "--init" in capsys.readouterr().err

    def test_rerun_byte_identical(self, runs, tmp_path):
        out = tmp_path / "again"
        assert cli.main(["train", "--config", runs["cfg"],
                         "--out", str(out), "--stage", "0"]) == 0
        for name in ("stage0.ckpt", "stage0_metrics.ndjson"):
            assert (out / name).read_bytes() == (runs["run0"] / name).read_bytes()

    def test_resume_matches_straight_run(self, runs, tmp_path):
        cfg2 = write_cfg(tmp_path / "half.cfg", **{"train.steps": "2"})
        half, resumed = tmp_path / "half", tmp_path / "resumed"
        assert cli.main(["train", "--config", cfg2, "--out", str(half),
                         "--stage", "0"]) == 0
        assert cli.main(["train", "--config", runs["cfg"], "--out", str(resumed),
                         "--stage", "0", "--init", str(half / "stage0.ckpt")]) == 0
        straight = runs["run0"]
        assert ((resumed / "stage0.ckpt").read_bytes()
                == (straight / "stage0.ckpt").read_bytes())
        joined = ((half / "stage0_metrics.ndjson").read_text()
                  + (resumed / "stage0_metrics.ndjson").read_text())
        assert joined == (straight / "stage0_metrics.ndjson").read_text()

    def test_stage_gap_rejected(self, runs, tmp_path, capsys):
        code = cli.main(["train", "--config", runs["cfg"], "--out", str(tmp_path / "x"),
                         "--stage", "2", "--init", str(runs["run0"] / "stage0.ckpt")])
        assert code == 1
        assert "from stage 0" in capsys.readouterr().err

    def test_resume_needs_optimizer_state(self, runs, tmp_path, capsys):
        src = load_checkpoint(runs["run0"] / "stage0.ckpt")
        stripped = Checkpoint(
            stage=src.stage, step=2, model_config=src.model_config,
            arrays={k: v for k, v in src.arrays.items() if not k.startswith("opt.")},
            frozen=src.frozen, param_stage=src.param_stage,
        )
        path = tmp_path / "stripped.ckpt"
        save_checkpoint(path, stripped)
        code = cli.main(["train", "--config", runs["cfg"], "--out", str(tmp_path / "x"),
                         "--stage", "0", "--init", str(path)])
        assert code == 1
        assert "optimizer" in capsys.readouterr().err

    def test_resume_past_budget_rejected(self, runs, tmp_path, capsys):
        code = cli.main(["train", "--config", runs["cfg"], "--out", str(tmp_path / "x"),
                         "--stage", "0", "--init", str(runs["run0"] / "stage0.ckpt")])
        assert code == 1
        assert "budget" in capsys.readouterr().err

    def test_encoder_width_mismatch_rejected(self, runs, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "wide.cfg", **{"model.d_enc": "10"})
        code = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "x"),
                         "--stage", "1", "--init", str(runs["run0"] / "stage0.ckpt")])
        assert code == 1
        assert "d_enc" in capsys.readouterr().err

    def test_unknown_config_key_named(self, runs, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("train.stepz = 4\n")
        code = cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == 1
        assert "train.stepz" in capsys.readouterr().err

    def test_bad_flag_is_validation_error(self, runs):
        assert cli.main(["train", "--bogus"]) == 1
        assert cli.main(["no-such-command"]) == 1
        assert cli.main(["--help"]) == 0


class TestSample:
    def sample(self, runs, out, *extra):
        return cli.main(["sample", "--config", runs["cfg"], "--out", str(out),
                         "--ckpt", str(runs["run2"] / "stage2.ckpt"), *extra])

    def test_pngs_deterministic(self, runs, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code = self.sample(runs, out, "--caption", "granda redu trigo lefa",
                               "--cond", "b", "--count", "2")
            assert code == 0
        names = sorted(p.name for p in a.glob("*.png"))
        assert names == ["sample_000.png", "sample_001.png"]
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes()

    def test_unknown_terminal_named(self, runs, tmp_path, capsys):
        code = self.sample(runs, tmp_path / "x", "--caption", "granda blorp trigo",
                           "--cond", "b")
        assert code == 1
        assert "'blorp'" in capsys.readouterr().err

    def test_motif_with_cond_ab_rejected(self, runs, tmp_path, capsys):
        code = self.sample(runs, tmp_path / "x",
                           "--caption", "granda redu trigo lefa stollo",
                           "--cond", "ab")
        assert code == 1
        assert "'stollo'" in capsys.readouterr().err

    def test_motif_terminal_invalid_in_language_a(self, runs, tmp_path, capsys):
        code = self.sample(runs, tmp_path / "x", "--caption", "stollo", "--cond", "a")
        assert code == 1
        err = capsys.readouterr().err
        assert "'stollo'" in err and "'a'" in err

    def test_cond_ab_accepts_paired_caption(self, runs, tmp_path):
        assert self.sample(runs, tmp_path / "ab", "--caption", "mika jelu kiro raita",
                           "--cond", "ab") == 0

    def test_branchless_checkpoint_rejects_b(self, runs, tmp_path, capsys):
        code = cli.main(["sample", "--config", runs["cfg"], "--out", str(tmp_path / "x"),
                         "--ckpt", str(runs["run0"] / "stage0.ckpt"),
                         "--caption", "granda redu trigo lefa", "--cond", "b"])
        assert code == 1
        assert "adapter branch" in capsys.readouterr().err

    def test_cond_a_works_on_stage0(self, runs, tmp_path):
        out = tmp_path / "a0"
        code = cli.main(["sample", "--config", runs["cfg"], "--out", str(out),
                         "--ckpt", str(runs["run0"] / "stage0.ckpt"),
                         "--caption", "large red triangle left", "--cond", "a"])
        assert code == 0
        assert (out / "sample_000.png").exists()

    def test_guidance_default_recorded(self, runs, tmp_path):
        out = tmp_path / "g"
        assert self.sample(runs, out, "--caption", "granda redu trigo lefa",
                           "--cond", "b") == 0
        assert "sample.guidance = 3.5\n" in (out / "resolved.cfg").read_text()


class TestEval:
    def test_report_written(self, runs, tmp_path):
        out = tmp_path / "ev"
        code = cli.main(["eval", "--config", runs["cfg"], "--out", str(out),
                         "--ckpt", str(runs["run1"] / "stage1.ckpt")])
        assert code == 0
        rec = json.loads((out / "eval_report.json").read_text())
        assert set(rec) >= {"accuracy", "mmd2", "fingerprint", "per_attribute"}
        assert rec["n_samples"] == 4

    def test_language_b_needs_adapter(self, runs, tmp_path, capsys):
        code = cli.main(["eval", "--config", runs["cfg"], "--out", str(tmp_path / "x"),
                         "--ckpt", str(runs["run0"] / "stage0.ckpt")])
        assert code == 1
        assert "adapter branch" in capsys.readouterr().err


class TestAblate:
    def test_requires_stage1_config(self, runs, tmp_path, capsys):
        code = cli.main(["ablate", "--config", runs["cfg"], "--out", str(tmp_path / "x"),
                         "--init", str(runs["run0"] / "stage0.ckpt")])
        assert code == 1
        assert "train.stage" in capsys.readouterr().err

    def test_unknown_arm_named(self, runs, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "a.cfg",
                        **{"train.stage": "1", "ablate.arms": "no-align,bogus"})
        code = cli.main(["ablate", "--config", cfg, "--out", str(tmp_path / "x"),
                         "--init", str(runs["run0"] / "stage0.ckpt")])
        assert code == 1
        assert "bogus" in capsys.readouterr().err

    def test_degenerate_grid_matches_eval(self, runs, tmp_path):
        cfg = write_cfg(tmp_path / "a.cfg", **{"train.stage": "1"})
        out = tmp_path / "abl"
        code = cli.main(["ablate", "--config", cfg, "--out", str(out),
                         "--init", str(runs["run0"] / "stage0.ckpt")])
        assert code == 0
        rows = [json.loads(l) for l in (out / "ablation.ndjson").read_text().splitlines()]
        assert len(rows) == 1 and rows[0]["arm"] == "no-align"
        table = (out / "ablation.txt").read_text().splitlines()
        assert len(table) == 2  # header + one row

        ev = tmp_path / "ev"
        code = cli.main(["eval", "--config", cfg, "--out", str(ev),
                         "--ckpt", str(out / "arm-no-align.ckpt")])
        assert code == 0
        rec = json.loads((ev / "eval_report.json").read_text())
        row = {k: v for k, v in rows[0].items() if k not in ("arm", "query_update")}
        assert row == rec


class TestDatagen:
    def test_manifest_hash_stable(self, runs, tmp_path):
        outs = []
        for name in ("d1", "d2"):
            out = tmp_path / name
            assert cli.main(["datagen", "--config", runs["cfg"],
                             "--out", str(out)]) == 0
            outs.append(out / "data")
        first, second = (d / "manifest.sha256" for d in outs)
        assert first.read_text() == second.read_text()
        assert len(list(outs[0].glob("scene_*.png"))) == 3
        lines = (outs[0] / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 3
