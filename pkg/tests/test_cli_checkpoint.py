import json
import os
import struct

import numpy as np
import pytest

from advcap.checkpoint import (
    MAGIC,
    VERSION,
    generator_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from advcap.cli import main, read_sweep_csv
from advcap.errors import CheckpointError
from advcap.generator import beam_search, greedy_decode
from advcap.metrics import MetricId, corpus_scores
from advcap.textdata import load_jsonl_records, make_examples


class TestCheckpointFormat:
    def payload(self):
        meta = {"config": {"seed": 3}, "phase": "adversarial", "iteration": 7,
                "rng": {"adv_gen": {"state": "123"}}}
        tensors = {
            "gen.embed": np.arange(12.0).reshape(3, 4),
            "gen.out_b": np.array([0.5, -1.5]),
            "scalar": np.asarray(3.25),
        }
        return meta, tensors

    def test_roundtrip_bit_identical(self, tmp_path):
        meta, tensors = self.payload()
        p = tmp_path / "a.advc"
        save_checkpoint(p, meta, tensors)
        meta2, tensors2 = load_checkpoint(p)
        assert meta2 == meta
        assert set(tensors2) == set(tensors)
        for k in tensors:
            assert tensors2[k].shape == np.asarray(tensors[k]).shape
            assert np.array_equal(tensors2[k], tensors[k])
        # save(load(save(x))) is byte-identical
        p2 = tmp_path / "b.advc"
        save_checkpoint(p2, meta2, tensors2)
        assert p.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.advc"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_version_mismatch_rejected(self, tmp_path):
        meta, tensors = self.payload()
        p = tmp_path / "v.advc"
        save_checkpoint(p, meta, tensors)
        raw = bytearray(p.read_bytes())
        raw[4:8] = struct.pack("<I", VERSION + 1)
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_truncation_rejected(self, tmp_path):
        meta, tensors = self.payload()
        p = tmp_path / "t.advc"
        save_checkpoint(p, meta, tensors)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_magic_bytes(self, tmp_path):
        meta, tensors = self.payload()
        p = tmp_path / "m.advc"
        save_checkpoint(p, meta, tensors)
        assert p.read_bytes()[:4] == MAGIC == b"ADVC"


def write_config(tmp_path, **overrides):
    cfg = {
        "train_data": str(tmp_path / "train.jsonl"),
        "val_data": str(tmp_path / "val.jsonl"),
        "out_dir": str(tmp_path / "run"),
        "batch_size": 4,
        "mle_epochs": 1,
        "disc_epochs": 1,
        "adv_iterations": 4,
        "eval_interval": 2,
        "patience": 0,
        "embed_dim": 6,
        "hidden": 8,
        "disc_hidden": 8,
        "t_max": 12,
        "min_count": 1,
        "seed": 5,
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


def make_data(tmp_path, n_train=14, n_val=5):
    spec = tmp_path / "grammar.json"
    spec.write_text(json.dumps({
        "subjects": ["cat", "dog", "bird"], "attributes": ["red", "blue"],
        "relations": ["chases", "finds"], "objects": ["ball", "box"],
        "feature_dim": 8, "noise_std": 0.02,
    }))
    assert main(["gen-data", "--spec", str(spec), "--n", str(n_train), "--seed", "1",
                 "--out", str(tmp_path / "train.jsonl")]) == 0
    assert main(["gen-data", "--spec", str(spec), "--n", str(n_val), "--seed", "2",
                 "--out", str(tmp_path / "val.jsonl")]) == 0
    return spec


class TestGenData:
    def test_line_count_and_determinism(self, tmp_path):
        out1, out2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert main(["gen-data", "--n", "10", "--seed", "3", "--out", str(out1)]) == 0
        assert main(["gen-data", "--n", "10", "--seed", "3", "--out", str(out2)]) == 0
        assert len(out1.read_text().splitlines()) == 10
        assert out1.read_bytes() == out2.read_bytes()
        records = load_jsonl_records(out1)
        assert len(records) == 10
        assert all(len(caps) == 5 for _, _, caps in records)


@pytest.fixture()
def trained(tmp_path):
    make_data(tmp_path)
    cfg_path, cfg = write_config(tmp_path)
    code = main(["advtrain", "--config", str(cfg_path)])
    assert code == 0
    return tmp_path, cfg_path, cfg


class TestTrainingCommands:
    def test_full_pipeline_outputs(self, trained):
        tmp_path, cfg_path, cfg = trained
        out = tmp_path / "run"
        for tag in ("gen_mle", "disc_pre", "iter000002", "iter000004", "final"):
            assert (out / f"checkpoint_{tag}.advc").exists(), tag
        assert (out / "train_log.jsonl").exists()
        fig = out / "train_curves.png"
        assert fig.exists() and fig.stat().st_size > 0
        records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
        adv = [r for r in records if r.get("phase") == "adv"]
        assert len(adv) == 4
        assert set(adv[0]) == {"phase", "iter", "loss", "mean_p", "mean_s", "mean_adv"}

    def test_phase_commands_run_separately(self, tmp_path):
        make_data(tmp_path)
        cfg_path, cfg = write_config(tmp_path)
        assert main(["pretrain-gen", "--config", str(cfg_path)]) == 0
        assert (tmp_path / "run" / "checkpoint_gen_mle.advc").exists()
        assert main(["pretrain-disc", "--config", str(cfg_path)]) == 0
        assert (tmp_path / "run" / "checkpoint_disc_pre.advc").exists()

    def test_invalid_lambda_exits_one_naming_key(self, tmp_path, capsys):
        make_data(tmp_path)
        cfg_path, _ = write_config(tmp_path)
        blob = json.loads(cfg_path.read_text())
        blob["lambda"] = 1.5
        cfg_path.write_text(json.dumps(blob))
        assert main(["advtrain", "--config", str(cfg_path)]) == 1
        assert "lambda" in capsys.readouterr().err

    def test_unknown_config_key_exits_one(self, tmp_path, capsys):
        make_data(tmp_path)
        cfg_path, _ = write_config(tmp_path)
        blob = json.loads(cfg_path.read_text())
        blob["lamda"] = 0.3  # typo must be caught
        cfg_path.write_text(json.dumps(blob))
        assert main(["advtrain", "--config", str(cfg_path)]) == 1
        assert "lamda" in capsys.readouterr().err

    def test_resume_from_final_is_clean_noop(self, trained, capsys):
        tmp_path, cfg_path, cfg = trained
        final = tmp_path / "run" / "checkpoint_final.advc"
        before = final.read_bytes()
        assert main(["advtrain", "--config", str(cfg_path), "--resume", str(final)]) == 0
        assert "nothing to do" in capsys.readouterr().out
        assert final.read_bytes() == before

    def test_resume_reproduces_final_checkpoint_bitwise(self, trained, tmp_path):
        base, cfg_path, cfg = trained
        mid = base / "run" / "checkpoint_iter000002.advc"
        resume_cfg = dict(cfg)
        resume_cfg["out_dir"] = str(base / "run_resumed")
        cfg2 = base / "config_resume.json"
        cfg2.write_text(json.dumps(resume_cfg))
        assert main(["advtrain", "--config", str(cfg2), "--resume", str(mid)]) == 0
        a = load_checkpoint(base / "run" / "checkpoint_final.advc")
        b = load_checkpoint(base / "run_resumed" / "checkpoint_final.advc")
        assert a[0]["iteration"] == b[0]["iteration"]
        assert set(a[1]) == set(b[1])
        for k in a[1]:
            assert np.array_equal(a[1][k], b[1][k]), k
        assert (base / "run" / "checkpoint_final.advc").read_bytes() == \
               (base / "run_resumed" / "checkpoint_final.advc").read_bytes()


class TestEvalAndDecode:
    def test_eval_report_and_figure(self, trained):
        tmp_path, cfg_path, cfg = trained
        report = tmp_path / "report.jsonl"
        code = main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint_final.advc"),
                     "--data", str(tmp_path / "val.jsonl"), "--beam", "2",
                     "--out", str(report)])
        assert code == 0
        lines = [json.loads(x) for x in report.read_text().splitlines()]
        metric_lines = [l for l in lines if "metric" in l]
        assert {l["metric"] for l in metric_lines} == {m.value for m in MetricId}
        assert all(l["level"] == "corpus" for l in metric_lines)
        fig = tmp_path / "report.png"
        assert fig.exists() and fig.stat().st_size > 0

    def test_beam_one_report_matches_library_greedy(self, trained):
        tmp_path, cfg_path, cfg = trained
        ckpt = tmp_path / "run" / "checkpoint_final.advc"
        report = tmp_path / "g.jsonl"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "val.jsonl"),
                     "--beam", "1", "--out", str(report)]) == 0
        lines = {l["metric"]: l["value"] for l in
                 (json.loads(x) for x in report.read_text().splitlines())}

        meta, tensors = load_checkpoint(ckpt)
        gen, vocab, cfg_t, idf = generator_from_checkpoint(meta, tensors)
        examples = make_examples(load_jsonl_records(tmp_path / "val.jsonl"), vocab, cfg_t.t_max)
        cands = [greedy_decode(gen, ex.feature, cfg_t.t_max).caption for ex in examples]
        want = corpus_scores(cands, [ex.references for ex in examples], idf)
        for m, v in want.items():
            assert lines[m] == v

    def test_eval_rejects_meteor(self, trained, capsys):
        tmp_path, cfg_path, cfg = trained
        assert main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint_final.advc"),
                     "--data", str(tmp_path / "val.jsonl"), "--metrics", "METEOR",
                     "--out", str(tmp_path / "x.jsonl")]) == 1
        assert "METEOR" in capsys.readouterr().err

    def test_eval_disc_probs(self, trained):
        tmp_path, cfg_path, cfg = trained
        report = tmp_path / "probs.jsonl"
        assert main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint_final.advc"),
                     "--data", str(tmp_path / "val.jsonl"), "--beam", "1",
                     "--out", str(report), "--disc-probs"]) == 0
        lines = [json.loads(x) for x in report.read_text().splitlines()]
        per_pair = [l for l in lines if "image_id" in l]
        assert len(per_pair) == 5
        assert all(0.0 <= l["p"] <= 1.0 for l in per_pair)
        assert any(l.get("metric") == "CNN_D" for l in lines)

    def test_decode_prints_one_line_per_example(self, trained, tmp_path):
        base, cfg_path, cfg = trained
        ckpt = base / "run" / "checkpoint_final.advc"
        out = base / "caps.txt"
        assert main(["decode", "--checkpoint", str(ckpt), "--data", str(base / "val.jsonl"),
                     "--beam", "2", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 5

    def test_decode_ensemble_of_same_model_matches_single(self, trained):
        base, cfg_path, cfg = trained
        ckpt = str(base / "run" / "checkpoint_final.advc")
        out1, out2 = base / "one.txt", base / "two.txt"
        assert main(["decode", "--checkpoint", ckpt, "--data", str(base / "val.jsonl"),
                     "--beam", "2", "--out", str(out1)]) == 0
        assert main(["decode", "--checkpoint", ckpt, "--checkpoint", ckpt,
                     "--data", str(base / "val.jsonl"), "--beam", "2",
                     "--out", str(out2)]) == 0
        assert out1.read_text() == out2.read_text()


class TestSweepCommand:
    def test_sweep_csv_roundtrip_and_figure(self, tmp_path):
        make_data(tmp_path, n_train=10, n_val=4)
        cfg_path, _ = write_config(tmp_path, adv_iterations=1, eval_interval=1)
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([
            {"cell": "lambda=0", "overrides": {"lambda": 0.0}},
            {"cell": "steps=g1_d1", "overrides": {"g_steps": 1, "d_steps": 1}},
        ]))
        out = tmp_path / "sweep.csv"
        assert main(["sweep", "--config", str(cfg_path), "--grid", str(grid),
                     "--out", str(out)]) == 0
        rows = read_sweep_csv(out)
        assert len(rows) == 2
        assert all(r["status"] == "ok" for r in rows)
        for r in rows:
            assert isinstance(r["CIDER_D"], float)
        fig = tmp_path / "sweep.png"
        assert fig.exists() and fig.stat().st_size > 0
        # lossless numeric round-trip through repr
        raw = out.read_text().splitlines()
        assert raw[0].startswith("cell,lambda,metric_q,g_steps,d_steps,status,error,")

    def test_empty_grid_rejected(self, tmp_path, capsys):
        make_data(tmp_path, n_train=8, n_val=3)
        cfg_path, _ = write_config(tmp_path)
        grid = tmp_path / "empty.json"
        grid.write_text("[]")
        assert main(["sweep", "--config", str(cfg_path), "--grid", str(grid),
                     "--out", str(tmp_path / "s.csv")]) == 1
