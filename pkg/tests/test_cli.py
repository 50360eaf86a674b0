import csv
import json
import math

import pytest

from llm2slm.cli import main
from llm2slm.models import ModelConfig, init_checkpoint

TINY_FLAGS = ["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--max-seq-len", "48"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["data", "--kind", "reversal_translation", "--alphabet", "abcd", "--min-len", "2", "--max-len", "4",
                 "--n-train", "40", "--n-test", "8", "--out-dir", str(root / "data")]) == 0
    train = str(root / "data" / "train.jsonl")
    assert main(["train", "--train", train, "--out", str(root / "slm.l2s"), "--steps", "2", "--micro-batch", "8",
                 "--accumulation", "1", *TINY_FLAGS]) == 0
    assert main(["train", "--train", train, "--out", str(root / "llm.l2s"), "--steps", "2", "--micro-batch", "8",
                 "--accumulation", "1", "--role", "llm", "--d-model", "24", "--n-layers", "1", "--n-heads", "2",
                 "--d-ff", "48", "--max-seq-len", "48"]) == 0
    assert main(["train", "--train", train, "--out", str(root / "bundle.json"), "--mode", "llm2slm_full",
                 "--llm", str(root / "llm.l2s"), "--init", str(root / "slm.l2s"), "--steps", "2",
                 "--micro-batch", "8", "--accumulation", "1", "--trace", str(root / "trace.csv")]) == 0
    return root


def test_data_files_exist_and_are_seeded(workspace, tmp_path):
    main(["data", "--kind", "reversal_translation", "--alphabet", "abcd", "--min-len", "2", "--max-len", "4",
          "--n-train", "40", "--n-test", "8", "--out-dir", str(tmp_path)])
    assert (tmp_path / "train.jsonl").read_bytes() == (workspace / "data" / "train.jsonl").read_bytes()


def test_trace_is_written(workspace):
    assert (workspace / "trace.csv").read_text().splitlines()[0] == "step,lr,loss"


def test_eval_identical_files_gives_bleu_100(workspace, capsys):
    ref = str(workspace / "data" / "test.jsonl")
    out = workspace / "metrics.csv"
    assert main(["eval", "--hyp", ref, "--ref", ref, "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["metric"]: float(r["value"]) for r in rows}["bleu"] == 100.0
    assert "bleu,100.0000" in capsys.readouterr().out


def test_generate_and_eval_model(workspace):
    out = workspace / "gen.jsonl"
    assert main(["generate", "--model", str(workspace / "bundle.json"), "--prompts",
                 str(workspace / "data" / "test.jsonl"), "--max-new-tokens", "5", "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 8 and all(r["source"] == "gen" for r in rows)
    assert main(["eval", "--model", str(workspace / "slm.l2s"), "--test", str(workspace / "data" / "test.jsonl"),
                 "--max-new-tokens", "5"]) == 0


def test_generation_is_byte_identical_across_runs(workspace, tmp_path):
    args = ["generate", "--model", str(workspace / "slm.l2s"), "--prompt", "translate: abc", "--strategy", "nucleus",
            "--seed", "5", "--max-new-tokens", "6"]
    main(args + ["--out", str(tmp_path / "a.jsonl")])
    main(args + ["--out", str(tmp_path / "b.jsonl")])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_specdec_reports_bounded_statistics(workspace):
    out = workspace / "sd.jsonl"
    n = 9
    assert main(["specdec", "--target", str(workspace / "llm.l2s"), "--draft", str(workspace / "bundle.json"),
                 "--gamma", "4", "--prompt", "translate: abc", "--prompt", "translate: dd",
                 "--max-new-tokens", str(n), "--out", str(out)]) == 0
    for row in map(json.loads, out.read_text().splitlines()):
        assert 0.0 <= row["acceptance_rate"] <= 1.0
        assert math.ceil(row["n"] / 4) <= row["target_calls"] <= row["n"] <= n


def test_ablate_truncation_grid_has_one_row_per_depth(tmp_path, workspace):
    deep = init_checkpoint(ModelConfig("encoder_decoder", d_model=16, n_layers=4, n_heads=2, d_ff=32,
                                       max_seq_len=48), seed=0)
    deep.save(tmp_path / "deep.l2s")
    out = tmp_path / "ablate.csv"
    assert main(["ablate", "--model", str(tmp_path / "deep.l2s"), "--test", str(workspace / "data" / "test.jsonl"),
                 "--truncate", "1,2,4", "--max-new-tokens", "4", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["value"] for r in rows] == ["1", "2", "4"]
    assert set(rows[0]) == {"grid", "value", "bleu", "rouge_l", "exact_match"}


def test_ablate_fusion_grid_on_a_bundle(workspace, tmp_path):
    out = tmp_path / "fusion.csv"
    assert main(["ablate", "--model", str(workspace / "bundle.json"), "--test", str(workspace / "data" / "test.jsonl"),
                 "--fusion", "add,replace", "--max-new-tokens", "4", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


def test_bench_and_sweep(workspace, tmp_path):
    assert main(["bench", "--model", str(workspace / "slm.l2s"), "--m", "8", "--n", "6",
                 "--out", str(tmp_path / "b.csv")]) == 0
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 2
    assert main(["sweep", "--model", f"slm={workspace / 'slm.l2s'}", "--model", f"l2s={workspace / 'bundle.json'}",
                 "--ns", "4,8", "--m", "6", "--out", str(tmp_path / "s.csv")]) == 0
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 5


def test_config_file_supplies_defaults(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"generation": {"max_new_tokens": 2}}))
    out = tmp_path / "g.jsonl"
    assert main(["generate", "--config", str(cfg), "--model", str(workspace / "slm.l2s"),
                 "--prompt", "translate: abcd", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["target"]) <= 2


def test_usage_errors_exit_with_code_2(workspace, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["bench", "--model", str(tmp_path / "missing.l2s")])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--train", str(workspace / "data" / "train.jsonl"), "--out", str(tmp_path / "x.l2s"),
              "--mode", "projector_only"])
    assert e.value.code == 2


def test_contract_errors_exit_with_code_1(workspace, tmp_path, capsys):
    # prompt longer than the model context
    assert main(["generate", "--model", str(workspace / "slm.l2s"), "--prompt", "x" * 60]) == 1
    assert "error:" in capsys.readouterr().err
