import json
from pathlib import Path

import numpy as np
import pytest

from das import checkpoint
from das.cli import EXIT_NUMERIC, EXIT_OK, EXIT_SCHEMA, EXIT_USAGE, main
from das.data import load_proposals, save_proposals, synthetic_records

FIXTURES = Path(__file__).parent / "fixtures"

TINY_MODEL = {"n_segments": 3, "n_words": 4, "hidden": 8, "embed_dim": 8, "att_width": 6, "mlp_width": 8,
              "fusion_dim": 8}


@pytest.fixture
def workspace(tmp_path):
    save_proposals(synthetic_records(n_records=6, n_segments=4, feat_dim=6), tmp_path / "data.jsonl")
    conf = {"model": TINY_MODEL, "train": {"epochs": 2, "batch_size": 4, "max_len": 8}, "data": {"min_count": 1}}
    (tmp_path / "conf.json").write_text(json.dumps(conf))
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def _train(ws, out, *extra):
    return run("train", ws / "data.jsonl", "--config", ws / "conf.json", "--out", ws / out, *extra)


# usage and errors ------------------------------------------------------------------

def test_usage_errors(capsys):
    assert run() == EXIT_USAGE
    for argv in (["train"], ["summarize", "x.jsonl", "--mode", "XX", "--out", "o"], ["train", "d", "--bogus"]):
        with pytest.raises(SystemExit) as exc:
            run(*argv)
        assert exc.value.code == EXIT_USAGE


def test_missing_dataset(tmp_path, capsys):
    assert run("train", tmp_path / "none.jsonl", "--out", tmp_path / "m") == EXIT_USAGE
    assert "none.jsonl" in capsys.readouterr().err


def test_bad_config_field(workspace, capsys):
    (workspace / "bad.json").write_text(json.dumps({"model": {"hiden": 3}}))
    assert run("train", workspace / "data.jsonl", "--config", workspace / "bad.json", "--out",
               workspace / "m") == EXIT_USAGE
    assert "hiden" in capsys.readouterr().err


def test_schema_error_exit_code(workspace, capsys):
    (workspace / "broken.jsonl").write_text(json.dumps({"video_id": "v", "proposal_id": "p", "t_start": 2,
                                                        "t_end": 1, "segments": [], "references": ["x"]}) + "\n")
    assert _train_path(workspace, "broken.jsonl") == EXIT_SCHEMA
    assert "t_start" in capsys.readouterr().err


def _train_path(ws, name):
    return run("train", ws / name, "--config", ws / "conf.json", "--out", ws / "m")


def test_non_finite_training_exit_code(workspace, capsys):
    recs = synthetic_records(n_records=2, n_segments=4, feat_dim=6)
    for seg in recs[0].segments:
        seg.feature = np.full(6, np.nan)  # written as a NaN literal, which the JSON reader accepts
    save_proposals(recs, workspace / "nan.jsonl")
    assert _train_path(workspace, "nan.jsonl") == EXIT_NUMERIC
    assert "numerical" in capsys.readouterr().err


def test_scst_needs_init(workspace, capsys):
    assert _train(workspace, "m", "--mode", "scst") == EXIT_USAGE
    assert "--init" in capsys.readouterr().err


# train ---------------------------------------------------------------------------

def test_seeded_training_is_reproducible(workspace, capsys):
    assert _train(workspace, "a.dasc", "--seed", 7) == EXIT_OK
    assert _train(workspace, "b.dasc", "--seed", 7) == EXIT_OK
    assert (workspace / "a.dasc").read_bytes() == (workspace / "b.dasc").read_bytes()
    lines = (workspace / "a.dasc.log").read_text().splitlines()
    assert len(lines) == 2 and all(len(line.split("\t")) == 6 for line in lines)
    printed = [line for line in capsys.readouterr().out.splitlines() if line.count("\t") == 5]
    assert printed[:2] == lines
    params, meta = checkpoint.load(workspace / "a.dasc")
    assert meta["seed"] == 7 and params.cfg.feat_dim == 6 and params.cfg.vocab_size == len(meta["vocab"]["words"]) + 4


def test_scst_from_checkpoint(workspace, capsys):
    assert _train(workspace, "x.dasc", "--epochs", 1) == EXIT_OK
    assert _train(workspace, "r.dasc", "--epochs", 1, "--mode", "scst", "--init", workspace / "x.dasc") == EXIT_OK


# caption-segments and summarize ------------------------------------------------------

def _ta_train(ws):
    conf = json.loads((ws / "conf.json").read_text())
    conf["model"]["attention"] = "none"
    (ws / "ta.json").write_text(json.dumps(conf))
    assert run("train", ws / "data.jsonl", "--config", ws / "ta.json", "--out", ws / "ta.dasc", "--epochs", 1) == 0
    return ws / "ta.dasc"


def test_caption_segments_twenty_segments(workspace, capsys):
    ckpt = _ta_train(workspace)
    save_proposals(synthetic_records(n_records=2, n_segments=20, feat_dim=6, seed=4), workspace / "twenty.jsonl")
    assert run("caption-segments", workspace / "twenty.jsonl", "--checkpoint", ckpt, "--out",
               workspace / "cap.jsonl") == EXIT_OK
    recs = load_proposals(workspace / "cap.jsonl")
    assert [len(r.segments) for r in recs] == [20, 20]
    for r in recs:
        for s in r.segments:
            assert len(s.token_logprobs) == len(s.sentence.split()) <= 25


def test_caption_segments_rejects_non_ta(workspace, capsys):
    assert _train(workspace, "ha.dasc", "--epochs", 1) == EXIT_OK
    assert run("caption-segments", workspace / "data.jsonl", "--checkpoint", workspace / "ha.dasc", "--out",
               workspace / "c.jsonl") == EXIT_USAGE


def test_caption_segments_empty_segments_is_schema_error(workspace, capsys):
    ckpt = _ta_train(workspace)
    (workspace / "e.jsonl").write_text(json.dumps({"video_id": "v", "proposal_id": "p", "t_start": 0, "t_end": 1,
                                                   "segments": [], "references": ["x"]}) + "\n")
    assert run("caption-segments", workspace / "e.jsonl", "--checkpoint", ckpt, "--out",
               workspace / "c.jsonl") == EXIT_SCHEMA


def _read_rows(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


@pytest.mark.parametrize("mode", ["SA", "HA"])
def test_summarize_model_modes(workspace, mode, capsys):
    conf = json.loads((workspace / "conf.json").read_text())
    conf["model"]["attention"] = mode
    (workspace / "m.json").write_text(json.dumps(conf))
    assert run("train", workspace / "data.jsonl", "--config", workspace / "m.json", "--out", workspace / "m.dasc",
               "--epochs", 1) == EXIT_OK
    outs = []
    for name in ("p1.jsonl", "p2.jsonl"):
        assert run("summarize", workspace / "data.jsonl", "--mode", mode, "--checkpoint", workspace / "m.dasc",
                   "--out", workspace / name, "--max-len", 6, "--seed", 1) == EXIT_OK
        outs.append((workspace / name).read_bytes())
    assert outs[0] == outs[1]
    rows = _read_rows(workspace / "p1.jsonl")
    assert len(rows) == 6 and all(len(r["sentence"].split()) <= 6 for r in rows)
    other = "HA" if mode == "SA" else "SA"
    assert run("summarize", workspace / "data.jsonl", "--mode", other, "--checkpoint", workspace / "m.dasc",
               "--out", workspace / "x.jsonl") == EXIT_USAGE


def test_dm_best_single_segment_is_verbatim(tmp_path, capsys):
    rec = synthetic_records(n_records=1, n_segments=1, feat_dim=3)[0]
    rec.segments[0].sentence = "A Man, plays the guitar!"
    rec.segments[0].token_logprobs = [-0.1, -0.2, -0.3, -0.4, -0.5]
    save_proposals([rec], tmp_path / "one.jsonl")
    assert run("summarize", tmp_path / "one.jsonl", "--mode", "DM-best", "--out", tmp_path / "o.jsonl") == EXIT_OK
    (row,) = _read_rows(tmp_path / "o.jsonl")
    assert row["sentence"] == "A Man, plays the guitar!"


def test_dm_best_picks_most_confident(tmp_path, capsys):
    rec = synthetic_records(n_records=1, n_segments=2, feat_dim=3)[0]
    rec.segments[0].sentence, rec.segments[0].token_logprobs = "a b", [np.log(0.9), np.log(0.1)]
    rec.segments[1].sentence, rec.segments[1].token_logprobs = "c d", [np.log(0.5), np.log(0.5)]
    save_proposals([rec], tmp_path / "two.jsonl")
    assert run("summarize", tmp_path / "two.jsonl", "--mode", "DM-best", "--nm", 2, "--out",
               tmp_path / "o.jsonl") == EXIT_OK
    assert _read_rows(tmp_path / "o.jsonl")[0]["sentence"] == "c d"


def test_dm_best_without_scores_needs_checkpoint(workspace, capsys):
    assert run("summarize", workspace / "data.jsonl", "--mode", "DM-best", "--out", workspace / "o") == EXIT_USAGE
    ckpt = _ta_train(workspace)
    assert run("summarize", workspace / "data.jsonl", "--mode", "DM-best", "--checkpoint", ckpt, "--nm", 4,
               "--out", workspace / "o.jsonl") == EXIT_OK
    rows = _read_rows(workspace / "o.jsonl")
    recs = load_proposals(workspace / "data.jsonl")
    assert [r["sentence"] in {s.sentence for s in rec.segments} for r, rec in zip(rows, recs)] == [True] * 6


def test_dm_ave_writes_one_row_per_sampled_segment(workspace, capsys):
    assert run("summarize", workspace / "data.jsonl", "--mode", "DM-ave", "--nm", 3, "--out",
               workspace / "o.jsonl") == EXIT_OK
    rows = _read_rows(workspace / "o.jsonl")
    assert len(rows) == 18 and {r["proposal_id"] for r in rows} == {f"p{k}" for k in range(6)}


# eval ----------------------------------------------------------------------------

def test_eval_golden_fixture_is_bit_exact(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert run("eval", FIXTURES / "golden_pred.jsonl", FIXTURES / "golden_gt.jsonl", "--out", out) == EXIT_OK
    assert out.read_bytes() == (FIXTURES / "golden_report.json").read_bytes()
    assert "pairing=all" in capsys.readouterr().out


def test_eval_identical_predictions(tmp_path, capsys):
    gt = [json.loads(line) for line in (FIXTURES / "golden_gt.jsonl").read_text().splitlines()]
    rows = [{"video_id": g["video_id"], "t_start": g["t_start"], "t_end": g["t_end"],
             "sentence": g["references"][0]} for g in gt[:1]]
    (tmp_path / "p.jsonl").write_text(json.dumps(rows[0]) + "\n")
    (tmp_path / "g.jsonl").write_text(json.dumps(gt[0]) + "\n")
    assert run("eval", tmp_path / "p.jsonl", tmp_path / "g.jsonl", "--out", tmp_path / "r.json") == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    assert all(report["per_threshold"][t]["Bleu_1"] == 1.0 for t in ("0.3", "0.5", "0.7", "0.9"))


def test_eval_empty_predictions(tmp_path, capsys):
    (tmp_path / "p.jsonl").write_text("")
    assert run("eval", tmp_path / "p.jsonl", FIXTURES / "golden_gt.jsonl", "--out", tmp_path / "r.json") == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    assert all(v == 0.0 for v in report["mean"].values())


def test_eval_schema_error(tmp_path, capsys):
    (tmp_path / "p.jsonl").write_text('{"video_id": "v", "t_start": 0, "t_end": 1}\n')
    assert run("eval", tmp_path / "p.jsonl", FIXTURES / "golden_gt.jsonl") == EXIT_SCHEMA


# gradcheck and metrics -----------------------------------------------------------

@pytest.mark.slow
def test_gradcheck_command(capsys):
    assert run("gradcheck", "--mode", "TA") == EXIT_OK
    out = capsys.readouterr().out
    assert out.rstrip().endswith("PASS") and "out" in out and "dec_lstm.W" in out
    assert run("gradcheck", "--mode", "TA", "--scale", 0.5, "--inject-bug") == EXIT_NUMERIC
    assert "FAIL: out" in capsys.readouterr().out


def test_metrics_command(capsys):
    assert run("metrics", "the cat sat", "--ref", "the cat sat down") == EXIT_OK
    out = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert float(out["Bleu_1"]) == pytest.approx(0.716531, abs=1e-6) and "CIDEr-D" not in out
    assert run("metrics", "a man plays guitar", "--ref", "A man is playing a guitar on stage.", "--corpus",
               FIXTURES / "golden_gt.jsonl") == EXIT_OK
    assert "CIDEr-D" in capsys.readouterr().out
