import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from patentsum import cli
from patentsum.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from patentsum.corpus import generate_synthetic, read_records, write_records
from patentsum.decoder import DecodeTrace
from patentsum.training import load_checkpoint


def file_hashes(directory):
    out = {}
    for p in sorted(Path(directory).glob("*")):
        if p.is_file():
            out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


TINY_TRAIN_FLAGS = [
    "--hidden-master", "4", "--hidden-slave", "4", "--hidden-decoder", "4",
    "--embedding", "4", "--d-c", "4", "--dropout", "0.0", "--epochs", "1",
    "--batch-size", "4", "--patience", "0", "--quiet",
]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "synth"
    assert main(["synth", "20", "--out-dir", str(d), "--seed", "9"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir):
    d = tmp_path_factory.mktemp("run") / "model"
    code = main(["train", "--data-dir", str(synth_dir), "--out-dir", str(d),
                 "--K", "3", "--seed", "1", *TINY_TRAIN_FLAGS])
    assert code == EXIT_OK
    return d


class TestSynth:
    def test_split_counts_40_5_5(self, tmp_path):
        d = tmp_path / "s50"
        assert main(["synth", "50", "--out-dir", str(d), "--seed", "3"]) == EXIT_OK
        assert len(read_records(d / "train.jsonl")) == 40
        assert len(read_records(d / "test.jsonl")) == 5
        assert len(read_records(d / "validation.jsonl")) == 5

    def test_rerun_same_seed_identical_artifacts(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["synth", "12", "--out-dir", str(a), "--seed", "7"])
        main(["synth", "12", "--out-dir", str(b), "--seed", "7"])
        assert file_hashes(a) == file_hashes(b)

    def test_manifest_written_with_hashes(self, synth_dir):
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        assert manifest["subcommand"] == "synth"
        assert "vocab.tsv" in manifest["artifact_hashes"]
        assert manifest["seed"] == 9


class TestPreprocess:
    def _toy_records(self):
        records = generate_synthetic(10, seed=0)
        # wrap one record's text in markup to exercise cleaning
        records[0].specification = "<script>x=1</script>" + records[0].specification
        return records

    def test_ten_records_split_8_1_1(self, tmp_path):
        raw = tmp_path / "raw.jsonl"
        write_records(raw, self._toy_records())
        out = tmp_path / "out"
        code = main(["preprocess", str(raw), "--out-dir", str(out),
                     "--tokenizer", "whitespace", "--seed", "1"])
        assert code == EXIT_OK
        assert len(read_records(out / "train.jsonl")) == 8
        assert len(read_records(out / "test.jsonl")) == 1
        assert len(read_records(out / "validation.jsonl")) == 1
        cleaned = read_records(out / "train.jsonl") + read_records(out / "test.jsonl") \
            + read_records(out / "validation.jsonl")
        assert not any("<script>" in r.specification for r in cleaned)

    def test_rerun_same_seed_identical(self, tmp_path):
        raw = tmp_path / "raw.jsonl"
        write_records(raw, self._toy_records())
        a, b = tmp_path / "a", tmp_path / "b"
        args = [str(raw), "--tokenizer", "whitespace", "--seed", "4"]
        main(["preprocess", *args, "--out-dir", str(a)])
        main(["preprocess", *args, "--out-dir", str(b)])
        assert file_hashes(a) == file_hashes(b)

    def test_empty_claims_rejected_with_report(self, tmp_path, capsys):
        records = self._toy_records() + generate_synthetic(2, seed=3)
        records[3].claims = "   "
        raw = tmp_path / "raw.jsonl"
        write_records(raw, records)
        out = tmp_path / "out"
        code = main(["preprocess", str(raw), "--out-dir", str(out),
                     "--tokenizer", "whitespace", "--seed", "1"])
        assert code == EXIT_OK
        report = [json.loads(line) for line in
                  (out / "errors.jsonl").read_text().splitlines()]
        assert len(report) == 1
        assert report[0]["publication_number"] == records[3].publication_number
        assert "claims" in report[0]["reason"]

    def test_missing_input_is_data_error(self, tmp_path):
        code = main(["preprocess", str(tmp_path / "nope.jsonl"),
                     "--out-dir", str(tmp_path / "o")])
        assert code == EXIT_DATA


class TestTrain:
    def test_artifacts_and_manifest(self, trained_dir):
        assert (trained_dir / "metrics.tsv").exists()
        assert (trained_dir / "checkpoint_last.npz").exists()
        assert (trained_dir / "checkpoint_best.npz").exists()
        manifest = json.loads((trained_dir / "manifest.json").read_text())
        assert manifest["subcommand"] == "train"
        assert manifest["config"]["K"] == 3
        assert "vocab_sha256" in manifest["inputs"]

    def test_metrics_header(self, trained_dir):
        first = (trained_dir / "metrics.tsv").read_text().splitlines()[0]
        assert first == "epoch\ttrain_loss\tval_loss\trouge_1\trouge_2\trouge_l"

    def test_defaults_match_reference_settings(self, synth_dir, tmp_path, monkeypatch):
        seen = {}

        def fake_train(data, cfg, **kwargs):
            seen["cfg"] = cfg
            raise SystemExit(0)

        monkeypatch.setattr(cli, "train", fake_train)
        with pytest.raises(SystemExit):
            main(["train", "--data-dir", str(synth_dir), "--out-dir",
                  str(tmp_path / "x")])
        cfg = seen["cfg"]
        assert cfg.K == 100
        assert cfg.hidden_master == cfg.hidden_slave == cfg.hidden_decoder == 256
        assert cfg.learning_rate == 0.001
        assert cfg.batch_size == 32
        assert cfg.dropout == 0.5
        assert cfg.vocab_max == 100_000
        assert cfg.max_in == 500 and cfg.max_out == 100
        assert cfg.embedding == 256

    def test_config_file_and_flag_override(self, synth_dir, tmp_path, monkeypatch):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("K=20\nepochs=7\n# comment\ndropout=0.25\n")
        seen = {}

        def fake_train(data, cfg, **kwargs):
            seen["cfg"] = cfg
            raise SystemExit(0)

        monkeypatch.setattr(cli, "train", fake_train)
        with pytest.raises(SystemExit):
            main(["train", "--data-dir", str(synth_dir), "--out-dir",
                  str(tmp_path / "x"), "--config", str(cfg_file), "--K", "40"])
        assert seen["cfg"].K == 40          # flag beats file
        assert seen["cfg"].epochs == 7      # file beats default
        assert seen["cfg"].dropout == 0.25

    def test_spec_claims_flags_conflict(self, synth_dir, tmp_path):
        code = main(["train", "--data-dir", str(synth_dir), "--out-dir",
                     str(tmp_path / "x"), "--spec-only", "--claims-only",
                     *TINY_TRAIN_FLAGS])
        assert code == EXIT_CONFIG

    @pytest.mark.parametrize("K", ["20", "200"])
    def test_k_sweep_runs_to_completion(self, synth_dir, tmp_path, K):
        d = tmp_path / f"k{K}"
        code = main(["train", "--data-dir", str(synth_dir), "--out-dir", str(d),
                     "--K", K, *TINY_TRAIN_FLAGS])
        assert code == EXIT_OK
        assert (d / "checkpoint_last.npz").exists()

    def test_divergence_exit_code(self, synth_dir, tmp_path):
        flags = [
            "--hidden-master", "4", "--hidden-slave", "4", "--hidden-decoder", "4",
            "--embedding", "4", "--d-c", "4", "--dropout", "0.0", "--batch-size", "4",
            "--patience", "0", "--quiet", "--lr", "1e9", "--grad-clip", "0",
            "--epochs", "10",
        ]
        with np.errstate(all="ignore"):
            code = main(["train", "--data-dir", str(synth_dir), "--out-dir",
                         str(tmp_path / "d"), *flags])
        assert code == cli.EXIT_DIVERGENCE

    def test_env_var_default_data_dir(self, synth_dir, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.DATA_DIR_ENV, str(synth_dir))
        d = tmp_path / "envrun"
        code = main(["train", "--out-dir", str(d), "--K", "50",
                     *TINY_TRAIN_FLAGS, "--epochs", "1"])
        assert code == EXIT_OK

    def test_missing_data_dir_is_config_error(self, tmp_path, monkeypatch):
        monkeypatch.delenv(cli.DATA_DIR_ENV, raising=False)
        code = main(["train", "--out-dir", str(tmp_path / "x"), *TINY_TRAIN_FLAGS])
        assert code == EXIT_CONFIG

    def test_ablation_flags_reduce_gradient_flow_to_seq2seq(self, synth_dir, tmp_path):
        from patentsum import autodiff as ad
        from patentsum import training as tr
        from patentsum.config import TrainConfig
        from patentsum.corpus import Vocabulary

        cfg = TrainConfig(hidden_master=4, hidden_slave=4, hidden_decoder=4, d_c=4,
                          embedding=4, dropout=0.0, tokenizer="whitespace",
                          pointer=False, coverage=False, slave=False, epochs=1,
                          batch_size=2, early_stop_patience=0)
        vocab = Vocabulary.load(synth_dir / "vocab.tsv")
        records = read_records(synth_dir / "train.jsonl")
        data = tr.prepare_data(records[:2], records[:1], vocab, cfg)
        params = tr.init_model_params(cfg, len(vocab))
        with ad.Tape() as t:
            loss, _ = tr.step_loss(data.train, params, cfg)
            t.backward(loss)
        flowing = {k for k, p in params.as_dict().items()
                   if p.grad is not None and np.abs(p.grad).any()}
        seq2seq = {
            "embedding",
            "master_fwd.W_u", "master_fwd.W_r", "master_fwd.W_h",
            "master_bwd.W_u", "master_bwd.W_r", "master_bwd.W_h",
            "P_0", "dec_gru.W_u", "dec_gru.W_r", "dec_gru.W_h",
            "attn.v_a", "attn.W_a", "attn.U_a", "W_v", "b_v",
        }
        assert flowing == seq2seq


class TestSummarize:
    def test_summaries_and_traces(self, synth_dir, trained_dir, tmp_path):
        out = tmp_path / "summaries.jsonl"
        traces = tmp_path / "traces"
        code = main(["summarize", str(trained_dir / "checkpoint_last.npz"),
                     str(synth_dir / "test.jsonl"), "--output", str(out),
                     "--trace", str(traces), "--max-out", "12"])
        assert code == EXIT_OK
        records = read_records(synth_dir / "test.jsonl")
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(lines) == len(records)
        for line, record in zip(lines, records):
            assert line["publication_number"] == record.publication_number
            assert len(line["summary"].split()) <= 12
            trace = DecodeTrace.load(traces / f"{record.publication_number}.trace.jsonl")
            emitted = len(line["summary"].split())
            assert len(trace.steps) in (emitted, emitted + 1)  # +1 for STOP

    def test_fusion_period_comes_from_checkpoint(self, synth_dir, trained_dir, tmp_path):
        traces = tmp_path / "tr"
        main(["summarize", str(trained_dir / "checkpoint_last.npz"),
              str(synth_dir / "test.jsonl"), "--output",
              str(tmp_path / "s.jsonl"), "--trace", str(traces)])
        ckpt = load_checkpoint(trained_dir / "checkpoint_last.npz")
        assert ckpt.cfg.K == 3
        for path in traces.glob("*.trace.jsonl"):
            trace = DecodeTrace.load(path)
            L = len(trace.steps)
            assert trace.fused_steps() == [s for s in range(1, L + 1) if s % 3 == 0]

    def test_beam_flag(self, synth_dir, trained_dir, tmp_path):
        out = tmp_path / "beam.jsonl"
        code = main(["summarize", str(trained_dir / "checkpoint_last.npz"),
                     str(synth_dir / "test.jsonl"), "--output", str(out),
                     "--beam", "3", "--max-out", "8"])
        assert code == EXIT_OK
        n_test = len(read_records(synth_dir / "test.jsonl"))
        assert len(out.read_text().splitlines()) == n_test


class TestEvaluate:
    def test_report_columns_and_determinism(self, synth_dir, trained_dir, tmp_path):
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        for path in (a, b):
            code = main(["evaluate", str(trained_dir / "checkpoint_last.npz"),
                         "--data-dir", str(synth_dir), "--split", "validation",
                         "--output", str(path), "--name", "model"])
            assert code == EXIT_OK
        assert a.read_text() == b.read_text()
        header, row = a.read_text().splitlines()
        assert header == "model\trouge-1\trouge-2\trouge-l"
        assert row.startswith("model\t")
        assert len(row.split("\t")) == 4

    def test_table_assembly(self, synth_dir, trained_dir, tmp_path):
        r1 = tmp_path / "r1.tsv"
        main(["evaluate", str(trained_dir / "checkpoint_last.npz"),
              "--data-dir", str(synth_dir), "--split", "validation",
              "--output", str(r1), "--name", "full"])
        r2 = tmp_path / "r2.tsv"
        main(["evaluate", str(trained_dir / "checkpoint_last.npz"),
              "--data-dir", str(synth_dir), "--split", "test",
              "--output", str(r2), "--name", "variant"])
        merged = tmp_path / "table.tsv"
        assert main(["table", str(r1), str(r2), "--output", str(merged)]) == EXIT_OK
        lines = merged.read_text().splitlines()
        assert lines[0] == "model\trouge-1\trouge-2\trouge-l"
        assert [l.split("\t")[0] for l in lines[1:]] == ["full", "variant"]

    def test_vocab_mismatch_is_config_error(self, trained_dir, tmp_path):
        other = tmp_path / "other"
        main(["synth", "10", "--out-dir", str(other), "--seed", "123",
              "--body-sentences", "4"])
        code = main(["evaluate", str(trained_dir / "checkpoint_last.npz"),
                     "--data-dir", str(other), "--split", "validation"])
        assert code == EXIT_CONFIG
