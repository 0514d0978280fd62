"""Command line contract: config resolution, exit codes, subcommand wiring."""

import hashlib
import json
import logging
import os

import numpy as np
import pytest

from ctxasr.cli import run_cli
from ctxasr.model import Recognizer
from ctxasr.tensor import GradCheckEntry, GradCheckReport

GEN_ARGS = ["--n-conversations", "3", "--utterances-per-conversation", "3",
            "--tokens-per-utterance", "4", "--n-data-tokens", "6",
            "--ambiguous-pairs", "1", "--frames-per-token", "6",
            "--feature-dim", "6"]


def tree_digest(root):
    """Hash of every file's relative path and bytes under root."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            h.update(os.path.relpath(full, root).encode())
            with open(full, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    rc = run_cli(["gen-data", "--out", str(root), "--seed", "11"] + GEN_ARGS)
    assert rc == 0
    return str(root / "manifest.tsv")


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    """A one-epoch checkpoint over the tiny corpus."""
    out = tmp_path_factory.mktemp("cli_run")
    rc = run_cli(["train", "--manifest", corpus, "--out", str(out),
                  "--epochs", "1", "--batch-size", "2",
                  "--budget-frames", "200", "--d-model", "16",
                  "--d-ffn", "24", "--warmup-steps", "5"])
    assert rc == 0
    return {"dir": str(out),
            "epoch0": str(out / "epoch000.cxp"),
            "epoch1": str(out / "epoch001.cxp")}


class TestUsage:
    def test_no_arguments_prints_usage_and_exits_2(self, capsys):
        assert run_cli([]) == 2
        assert "usage:" in capsys.readouterr().err

    def test_unknown_subcommand_exits_2(self, capsys):
        assert run_cli(["transcode"]) == 2

    def test_unknown_flag_exits_2(self, capsys):
        assert run_cli(["gen-data", "--out", "x", "--there-is-no-such-flag",
                        "1"]) == 2

    def test_help_exits_0(self, capsys):
        assert run_cli(["--help"]) == 0
        assert "SUBCOMMAND" in capsys.readouterr().out

    def test_subcommand_help_exits_0(self, capsys):
        assert run_cli(["decode", "--help"]) == 0
        out = capsys.readouterr().out
        assert "--beam" in out and "--lambda" in out


class TestConfigResolution:
    def test_unknown_config_key_is_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "n_conversatoins": 5}))
        rc = run_cli(["gen-data", "--config", str(cfg),
                      "--out", str(tmp_path / "d")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "error[ConfigError]" in err
        assert "n_conversatoins" in err

    def test_config_file_must_be_json(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("seed: 1\n")
        assert run_cli(["gen-data", "--config", str(cfg),
                        "--out", str(tmp_path / "d")]) == 1
        assert "error[ConfigError]" in capsys.readouterr().err

    def test_config_file_must_be_an_object(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("[1, 2]")
        assert run_cli(["gen-data", "--config", str(cfg),
                        "--out", str(tmp_path / "d")]) == 1
        assert "error[ConfigError]" in capsys.readouterr().err

    def test_missing_required_option(self, capsys):
        assert run_cli(["gen-data", "--seed", "1"]) == 1
        assert "out" in capsys.readouterr().err

    def test_flag_overrides_config_file(self, tmp_path):
        """A seed given on the command line beats the file's seed."""
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 3}))
        d_file_plus_flag = tmp_path / "a"
        d_flag_only = tmp_path / "b"
        d_file_seed = tmp_path / "c"
        assert run_cli(["gen-data", "--config", str(cfg), "--seed", "9",
                        "--out", str(d_file_plus_flag)] + GEN_ARGS) == 0
        assert run_cli(["gen-data", "--seed", "9",
                        "--out", str(d_flag_only)] + GEN_ARGS) == 0
        assert run_cli(["gen-data", "--config", str(cfg),
                        "--out", str(d_file_seed)] + GEN_ARGS) == 0
        assert tree_digest(d_file_plus_flag) == tree_digest(d_flag_only)
        assert tree_digest(d_file_plus_flag) != tree_digest(d_file_seed)

    def test_resolved_config_is_logged(self, tmp_path, caplog):
        with caplog.at_level(logging.INFO, logger="ctxasr.cli"):
            rc = run_cli(["gen-data", "--seed", "4",
                          "--out", str(tmp_path / "d")] + GEN_ARGS)
        assert rc == 0
        lines = [r.message for r in caplog.records
                 if "resolved gen-data config" in r.message]
        assert len(lines) == 1
        payload = json.loads(lines[0].split("config: ", 1)[1])
        assert payload["seed"] == 4
        assert payload["n_conversations"] == 3


class TestGenData:
    def test_same_seed_gives_identical_trees(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run_cli(["gen-data", "--out", str(d), "--seed", "21"]
                           + GEN_ARGS) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_different_seeds_differ(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(["gen-data", "--out", str(a), "--seed", "21"]
                       + GEN_ARGS) == 0
        assert run_cli(["gen-data", "--out", str(b), "--seed", "22"]
                       + GEN_ARGS) == 0
        assert tree_digest(a) != tree_digest(b)

    def test_prints_manifest_path(self, tmp_path, capsys):
        assert run_cli(["gen-data", "--out", str(tmp_path / "d"),
                        "--seed", "1"] + GEN_ARGS) == 0
        out = capsys.readouterr().out.strip()
        assert out.endswith("manifest.tsv")
        assert os.path.exists(out)

    def test_infeasible_spec_exits_1(self, tmp_path, capsys):
        rc = run_cli(["gen-data", "--out", str(tmp_path / "d"),
                      "--n-data-tokens", "3"])
        assert rc == 1
        assert "error[ContractError]" in capsys.readouterr().err


class TestTrain:
    def test_train_writes_metrics_and_checkpoints(self, trained, capsys):
        assert os.path.exists(os.path.join(trained["dir"], "metrics.jsonl"))
        assert os.path.exists(trained["epoch1"])

    def test_checkpoint_carries_derived_geometry(self, trained):
        model, _ = Recognizer.load(trained["epoch1"])
        assert model.cfg.vocab_size == 8
        assert model.cfg.input_dim == 6
        assert model.cfg.d_model == 16

    def test_fine_tune_from_checkpoint(self, tmp_path, corpus, trained,
                                       capsys):
        out = tmp_path / "ft"
        rc = run_cli(["train", "--manifest", corpus, "--out", str(out),
                      "--base-checkpoint", trained["epoch1"],
                      "--epochs", "0", "--budget-frames", "200",
                      "--d-model", "16", "--d-ffn", "24"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert payload["checkpoints"] == 1

    def test_geometry_mismatch_against_base_exits_1(self, tmp_path, corpus,
                                                    trained, capsys):
        rc = run_cli(["train", "--manifest", corpus,
                      "--out", str(tmp_path / "ft"),
                      "--base-checkpoint", trained["epoch1"],
                      "--epochs", "0", "--d-model", "32"])
        assert rc == 1
        assert "error[CheckpointMismatchError]" in capsys.readouterr().err


class TestDecode:
    def test_decode_emits_rows_and_summary(self, tmp_path, corpus, trained,
                                           capsys):
        out = tmp_path / "hyp.jsonl"
        rc = run_cli(["decode", "--model", trained["epoch1"],
                      "--manifest", corpus, "--beam", "2", "--max-len", "6",
                      "--out", str(out)])
        assert rc == 0
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        rows = [l for l in lines if "summary" not in l]
        assert len(rows) == 9
        assert all(isinstance(r["hyp"], list) for r in rows)
        summary = lines[-1]["summary"]
        assert summary["utterances"] == 9
        assert 0.0 <= summary["token_error_rate"] <= 1.0
        # stdout mirrors the file
        assert len(capsys.readouterr().out.strip().splitlines()) == 10

    def test_missing_model_exits_1_with_category(self, corpus, capsys):
        rc = run_cli(["decode", "--model", "/nonexistent/model.cxp",
                      "--manifest", corpus])
        assert rc == 1
        assert "error[FileNotFoundError]" in capsys.readouterr().err

    def test_recycle_flag_off(self, corpus, trained, capsys):
        rc = run_cli(["decode", "--model", trained["epoch1"],
                      "--manifest", corpus, "--beam", "2", "--max-len", "6",
                      "--recycle", "off"])
        assert rc == 0

    def test_shallow_fusion_lm(self, corpus, trained, capsys):
        rc = run_cli(["decode", "--model", trained["epoch1"],
                      "--manifest", corpus, "--beam", "2", "--max-len", "6",
                      "--lm-order", "2", "--gamma", "0.2"])
        assert rc == 0

    def test_bad_recycle_value_exits_2(self, corpus, trained, capsys):
        rc = run_cli(["decode", "--model", trained["epoch1"],
                      "--manifest", corpus, "--recycle", "maybe"])
        assert rc == 2


class TestStream:
    def test_stream_reports_latency(self, corpus, trained, capsys):
        rc = run_cli(["stream", "--model", trained["epoch1"],
                      "--manifest", corpus, "--ctc-beam", "2",
                      "--max-len", "6"])
        assert rc == 0
        lines = [json.loads(l) for l in
                 capsys.readouterr().out.strip().splitlines()]
        rows = [l for l in lines if "summary" not in l]
        assert len(rows) == 9
        for r in rows:
            assert len(r["added_latency_ms"]) == len(r["hyp"])
            assert all(ms >= 0.0 for ms in r["added_latency_ms"])
        summary = lines[-1]["summary"]
        assert "theoretical_delay_ms" in summary
        assert summary["theoretical_delay_ms"]["total_ms"] > 0

    def test_lookahead_flags_change_delay(self, corpus, trained, capsys):
        rc = run_cli(["stream", "--model", trained["epoch1"],
                      "--manifest", corpus, "--ctc-beam", "2",
                      "--max-len", "6", "--enc-lookahead", "2",
                      "--src-lookahead", "6"])
        assert rc == 0
        lines = [json.loads(l) for l in
                 capsys.readouterr().out.strip().splitlines()]
        delays = lines[-1]["summary"]["theoretical_delay_ms"]
        # two encoder layers, lookahead 2, subsample 4, 10 ms frames
        assert delays["encoder_ms"] == pytest.approx(160.0)
        assert delays["source_ms"] == pytest.approx(240.0)


class TestBenchCli:
    def test_bench_rows_table_and_report(self, tmp_path, corpus, trained,
                                         capsys):
        out = tmp_path / "report.json"
        rc = run_cli(["bench", "--model", trained["epoch1"],
                      "--manifest", corpus, "--beam", "2", "--max-len", "6",
                      "--reps", "2", "--warmup", "0", "--out", str(out)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "recycle off" in stdout and "pseudo-RTF" in stdout
        row_lines = [l for l in stdout.splitlines()
                     if l.startswith("{")]
        assert len(row_lines) == 9
        report = json.loads(out.read_text())
        assert report["reps"] == 2
        assert len(report["rows"]) == 9
        assert report["summary"]["speedup"] > 0

    def test_bench_kernel_rows(self, corpus, trained, capsys):
        rc = run_cli(["bench", "--model", trained["epoch1"],
                      "--manifest", corpus, "--beam", "2", "--max-len", "6",
                      "--reps", "2", "--warmup", "0", "--kernels", "on"])
        assert rc == 0
        rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()
                if l.startswith("{")]
        kernel_rows = [r for r in rows if "numpy_ms" in r]
        assert kernel_rows, "kernel comparison rows missing"


class TestAverage:
    def test_average_two_checkpoints(self, tmp_path, trained, capsys):
        out = tmp_path / "avg.cxp"
        rc = run_cli(["average", trained["epoch0"], trained["epoch1"],
                      "--out", str(out)])
        assert rc == 0
        model, meta = Recognizer.load(str(out))
        assert len(meta["averaged_from"]) == 2
        a0, _ = Recognizer.load(trained["epoch0"])
        a1, _ = Recognizer.load(trained["epoch1"])
        got = model.state_arrays()
        want0, want1 = a0.state_arrays(), a1.state_arrays()
        for name in got:
            np.testing.assert_allclose(
                got[name], (want0[name] + want1[name]) / 2.0, atol=1e-6)

    def test_checkpoints_from_config_file(self, tmp_path, trained, capsys):
        cfg = tmp_path / "avg.json"
        cfg.write_text(json.dumps(
            {"checkpoints": [trained["epoch0"], trained["epoch1"]], "k": 1,
             "out": str(tmp_path / "avg.cxp")}))
        assert run_cli(["average", "--config", str(cfg)]) == 0
        assert os.path.exists(tmp_path / "avg.cxp")

    def test_no_checkpoints_exits_1(self, tmp_path, capsys):
        rc = run_cli(["average", "--out", str(tmp_path / "avg.cxp")])
        assert rc == 1
        assert "error[ConfigError]" in capsys.readouterr().err

    def test_k_larger_than_pool_exits_1(self, tmp_path, trained, capsys):
        rc = run_cli(["average", trained["epoch0"], "--k", "5",
                      "--out", str(tmp_path / "avg.cxp")])
        assert rc == 1
        assert "error[ContractError]" in capsys.readouterr().err


class TestGradCheckCli:
    def test_passes_on_the_joint_loss(self, capsys):
        rc = run_cli(["grad-check", "--max-entries", "1", "--tol", "1e-3"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_failure_exits_1(self, monkeypatch, capsys):
        import ctxasr.cli as cli_mod

        def fake_grad_check(*a, **k):
            return GradCheckReport([GradCheckEntry("w", 1.0, 1e-3)])

        monkeypatch.setattr(cli_mod, "grad_check", fake_grad_check)
        rc = run_cli(["grad-check", "--max-entries", "1"])
        assert rc == 1
        assert "GradCheckFailed" in capsys.readouterr().err
