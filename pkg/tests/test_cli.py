"""Command-line interface: resolution order, echo files, failure reporting."""

import json
import math

import pytest

from leantuner.cli import main


TINY_MODEL_FLAGS = [
    "--d-model", "16",
    "--n-layers", "1",
    "--n-heads", "2",
    "--max-seq-len", "32",
]


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("the quick brown fox jumps over the lazy dog. " * 60)
    return path


def finetune_argv(corpus, out, *extra):
    return [
        "finetune",
        "--data", str(corpus),
        "--out", str(out),
        "--steps", "2",
        "--batch-size", "2",
        "--seq-len", "16",
        *TINY_MODEL_FLAGS,
        *extra,
    ]


class TestResolution:
    def test_defaults_then_config_then_flags(self, corpus, tmp_path, capsys):
        config = tmp_path / "run.cfg"
        config.write_text("steps = 4\nlr = 0.002\n# comment line\n\nseed = 7\n")
        out = tmp_path / "out"
        rc = main(finetune_argv(corpus, out, "--config", str(config), "--steps", "2"))
        assert rc == 0, capsys.readouterr().err
        text = (out / "resolved_config.txt").read_text()
        assert "steps=2" in text  # flag beats config
        assert "lr=0.002" in text  # config beats default
        assert "seed=7" in text
        assert "batch_size=2" in text

    def test_echo_is_sorted_and_typed(self, corpus, tmp_path):
        out = tmp_path / "out"
        rc = main(finetune_argv(corpus, out, "--deterministic"))
        assert rc == 0
        lines = (out / "resolved_config.txt").read_text().splitlines()
        assert lines[0] == "# leantuner finetune: resolved settings"
        keys = [line.split("=", 1)[0] for line in lines[1:]]
        assert keys == sorted(keys)
        assert "deterministic=true" in lines
        assert "tie_embeddings=true" in lines
        assert all("None" not in line for line in lines)

    def test_no_flag_overrides_config_true(self, corpus, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("deterministic = true\n")
        out = tmp_path / "out"
        rc = main(
            finetune_argv(
                corpus, out, "--config", str(config), "--no-deterministic"
            )
        )
        assert rc == 0
        assert "deterministic=false" in (out / "resolved_config.txt").read_text()

    def test_unknown_config_key_names_file_and_line(self, corpus, tmp_path, capsys):
        config = tmp_path / "run.cfg"
        config.write_text("steps = 4\nlearning_rate = 0.1\n")
        rc = main(finetune_argv(corpus, tmp_path / "out", "--config", str(config)))
        assert rc == 1
        err = capsys.readouterr().err
        assert "error [finetune:config]" in err
        assert "run.cfg:2" in err and "learning_rate" in err

    def test_malformed_config_line(self, corpus, tmp_path, capsys):
        config = tmp_path / "run.cfg"
        config.write_text("steps 4\n")
        rc = main(finetune_argv(corpus, tmp_path / "out", "--config", str(config)))
        assert rc == 1
        assert "expected key=value" in capsys.readouterr().err

    def test_missing_required_flag(self, corpus, capsys):
        rc = main(["finetune", "--data", str(corpus)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "error [finetune:config]" in err and "--out is required" in err

    def test_unknown_flag_exits_two(self, corpus, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(finetune_argv(corpus, tmp_path / "out", "--bogus", "1"))
        assert exc.value.code == 2


class TestFinetuneCommand:
    def test_smoke_writes_artifacts(self, corpus, tmp_path):
        out = tmp_path / "out"
        rc = main(finetune_argv(corpus, out))
        assert rc == 0
        assert (out / "metrics.jsonl").exists()
        assert (out / "model.safetensors").exists()
        assert (out / "resolved_config.txt").exists()
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2  # one record per macro step
        last = json.loads(lines[-1])
        assert last["step"] == 2 and last["train_loss"] > 0
        assert last["test_loss"] is not None  # final-step eval

    def test_lora_mode_writes_adapters(self, corpus, tmp_path):
        out = tmp_path / "out"
        rc = main(finetune_argv(corpus, out, "--mode", "lora", "--lora-r", "2"))
        assert rc == 0
        assert (out / "adapter.safetensors").exists()
        assert not (out / "model.safetensors").exists()

    def test_deterministic_rerun_is_byte_identical(self, corpus, tmp_path):
        out = tmp_path / "out"
        argv = finetune_argv(corpus, out, "--deterministic")
        assert main(argv) == 0
        first_metrics = (out / "metrics.jsonl").read_bytes()
        first_config = (out / "resolved_config.txt").read_bytes()
        assert main(argv) == 0
        assert (out / "resolved_config.txt").read_bytes() == first_config
        assert (out / "metrics.jsonl").read_bytes() == first_metrics

    def test_volatile_metrics_nulled_when_deterministic(self, corpus, tmp_path):
        out = tmp_path / "out"
        assert main(finetune_argv(corpus, out, "--deterministic")) == 0
        row = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
        assert row["rss_bytes"] is None and row["wall_ms"] is None

    def test_grad_accum_resolves_micro_batch(self, corpus, tmp_path):
        out = tmp_path / "out"
        rc = main(
            finetune_argv(corpus, out, "--batch-size", "4", "--grad-accum", "2")
        )
        assert rc == 0
        lines = (out / "resolved_config.txt").read_text().splitlines()
        assert "micro_batch_size=2" in lines
        assert not any(line.startswith("grad_accum=") for line in lines)

    def test_grad_accum_conflict(self, corpus, tmp_path, capsys):
        rc = main(
            finetune_argv(
                corpus, tmp_path / "out",
                "--batch-size", "8", "--grad-accum", "2", "--micro-batch-size", "2",
            )
        )
        assert rc == 1
        assert "disagree" in capsys.readouterr().err

    def test_grad_accum_must_divide(self, corpus, tmp_path, capsys):
        rc = main(
            finetune_argv(corpus, tmp_path / "out", "--batch-size", "8",
                          "--grad-accum", "3")
        )
        assert rc == 1
        assert "does not divide" in capsys.readouterr().err

    def test_missing_data_file(self, tmp_path, capsys):
        rc = main(finetune_argv(tmp_path / "nope.txt", tmp_path / "out"))
        assert rc == 1
        assert "error [finetune:data]" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore:layer group")
    def test_sharding_and_throttle_flags(self, corpus, tmp_path):
        out = tmp_path / "out"
        rc = main(
            finetune_argv(
                corpus, out,
                "--shard-segments", "2",
                "--spill-dir", str(tmp_path / "spill"),
                "--sim-battery", "80:20:2",
                "--throttle-mu", "90",
                "--active-watts", "5",
            )
        )
        assert rc == 0
        row = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
        assert row["power"] is not None

    def test_bad_sim_battery_spec(self, corpus, tmp_path, capsys):
        rc = main(finetune_argv(corpus, tmp_path / "out", "--sim-battery", "80"))
        assert rc == 1
        assert "sim_battery" in capsys.readouterr().err


@pytest.fixture
def trained(corpus, tmp_path):
    out = tmp_path / "trained"
    assert main(finetune_argv(corpus, out)) == 0
    return out


class TestEvalCommand:
    def test_eval_prints_json(self, trained, corpus, capsys):
        rc = main(
            ["eval", "--model", str(trained / "model.safetensors"),
             "--data", str(corpus), "--seq-len", "16"]
        )
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["ppl"] == pytest.approx(math.exp(doc["test_loss"]))
        assert doc["accuracy"] is None  # no MCQ file given

    def test_eval_mcq(self, trained, tmp_path, capsys):
        mcq = tmp_path / "items.jsonl"
        mcq.write_text(
            '{"question": "pick", "options": ["aa", "bb"], "answer": 0}\n'
        )
        rc = main(
            ["eval", "--model", str(trained / "model.safetensors"),
             "--mcq", str(mcq)]
        )
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["accuracy"] in (0.0, 1.0)

    def test_eval_needs_data_or_mcq(self, trained, capsys):
        rc = main(["eval", "--model", str(trained / "model.safetensors")])
        assert rc == 1
        assert "error [eval:config]" in capsys.readouterr().err

    def test_eval_out_writes_metrics(self, trained, corpus, tmp_path, capsys):
        out = tmp_path / "evalout"
        rc = main(
            ["eval", "--model", str(trained / "model.safetensors"),
             "--data", str(corpus), "--seq-len", "16", "--out", str(out)]
        )
        assert rc == 0
        assert (out / "resolved_config.txt").exists()
        row = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
        assert row["step"] == 0 and row["test_loss"] is not None

    def test_missing_checkpoint(self, tmp_path, capsys):
        rc = main(["eval", "--model", str(tmp_path / "no.safetensors"),
                   "--data", "x"])
        assert rc == 1
        assert "error [eval:model]" in capsys.readouterr().err


class TestGenerateCommand:
    def test_generate_prints_text(self, trained, capsys):
        rc = main(
            ["generate", "--model", str(trained / "model.safetensors"),
             "--prompt", "the quick", "--max-new-tokens", "8"]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("the quick")
        assert len(out.rstrip("\n")) > len("the quick")

    def test_cache_and_no_cache_agree(self, trained, capsys):
        argv = ["generate", "--model", str(trained / "model.safetensors"),
                "--prompt", "lazy dog", "--max-new-tokens", "6"]
        assert main(argv) == 0
        cached = capsys.readouterr().out
        assert main(argv + ["--greedy-no-cache"]) == 0
        assert capsys.readouterr().out == cached

    def test_empty_prompt_rejected(self, trained, capsys):
        rc = main(
            ["generate", "--model", str(trained / "model.safetensors"),
             "--prompt", ""]
        )
        assert rc == 1
        err = capsys.readouterr().err
        assert "error [generate:config]" in err and "required" in err
