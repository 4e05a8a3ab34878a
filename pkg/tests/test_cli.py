import json
import subprocess
import sys

import pytest

from specdec.cli import EXIT_IO, EXIT_MISMATCH, main, parse_units
from specdec.errors import ContractViolationError
from specdec.runtime import VirtualUnit
from specdec.tree import VerificationTree
from specdec.tuner import HeadAccuracyTable


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "nano.ghdr"
    assert main(["gen-model", "--seed", "5", "--preset", "nano",
                 "--out", str(path)]) == 0
    return str(path)


def test_parse_units():
    units = parse_units("u0:workers=4,throttle=1;u1:workers=2,throttle=3")
    assert units == (
        VirtualUnit(0, worker_count=4, throttle=1.0),
        VirtualUnit(1, worker_count=2, throttle=3.0),
    )


def test_parse_units_rejects_garbage():
    with pytest.raises(ContractViolationError):
        parse_units("w0:workers=4")


def test_gen_model_deterministic(tmp_path):
    a, b = tmp_path / "a.ghdr", tmp_path / "b.ghdr"
    main(["gen-model", "--seed", "9", "--preset", "nano", "--out", str(a)])
    main(["gen-model", "--seed", "9", "--preset", "nano", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_decode_seq_deterministic_stdout(model_path, capsys):
    args = ["decode", "--model", model_path, "--prompt", "hi there",
            "--max-tokens", "12", "--seq"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    second = capsys.readouterr().out
    assert first == second
    assert "acceptance_length: 1.0000" in first


def test_decode_speculative_matches_seq_text(model_path, capsys):
    base = ["decode", "--model", model_path, "--prompt", "equivalence",
            "--max-tokens", "16"]
    assert main(base + ["--seq"]) == 0
    seq_text = capsys.readouterr().out.splitlines()[0]
    assert main(base + ["--width", "16"]) == 0
    spec_out = capsys.readouterr().out.splitlines()
    assert spec_out[0] == seq_text


def test_decode_timing_goes_to_stderr(model_path, capsys):
    assert main(["decode", "--model", model_path, "--prompt", "x",
                 "--max-tokens", "4", "--seq"]) == 0
    captured = capsys.readouterr()
    assert "tokens_per_s" in captured.err
    assert "tokens_per_s" not in captured.out


def test_tune_tree_width1_empty_nodes(tmp_path, capsys):
    acc = tmp_path / "acc.json"
    acc.write_text(HeadAccuracyTable(acc=[[0.5, 0.2]] * 4).to_json())
    out = tmp_path / "tree.json"
    assert main(["tune-tree", "--acc-table", str(acc), "--width", "1",
                 "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["nodes"] == []


def test_tune_tree_builds_greedy(tmp_path, capsys):
    acc = tmp_path / "acc.json"
    acc.write_text(HeadAccuracyTable(acc=[[0.6, 0.3], [0.5, 0.2]]).to_json())
    out = tmp_path / "tree.json"
    assert main(["tune-tree", "--acc-table", str(acc), "--width", "4",
                 "--out", str(out)]) == 0
    tree = VerificationTree.from_json(out.read_text())
    assert tree.width == 4


def test_calibrate_writes_table(model_path, tmp_path, capsys):
    calib = tmp_path / "calib.jsonl"
    calib.write_text('{"prompt": "abc"}\n{"prompt": "defg"}\n')
    out = tmp_path / "acc.json"
    assert main(["calibrate", "--model", model_path, "--calib", str(calib),
                 "--k", "2", "--steps", "8", "--out", str(out)]) == 0
    table = HeadAccuracyTable.from_json(out.read_text())
    assert table.acc.shape == (4, 2)


def test_bench_json_schema(model_path, tmp_path, capsys):
    acc = tmp_path / "acc.json"
    acc.write_text(HeadAccuracyTable(acc=[[0.5, 0.2]] * 4).to_json())
    tree_path = tmp_path / "tree.json"
    main(["tune-tree", "--acc-table", str(acc), "--width", "4", "--out", str(tree_path)])
    # build a minimal strategy file around the tree
    from specdec.config import NANO
    from specdec.runtime import plan_from_ratio
    from specdec.tuner import Strategy

    tree = VerificationTree.from_json(tree_path.read_text())
    strategy = Strategy(width=4, tree=tree,
                        plans={32: plan_from_ratio(NANO, 0.5, 32, width=4)})
    spath = tmp_path / "strategy.json"
    spath.write_text(strategy.to_json())
    capsys.readouterr()  # drop the tune-tree status line
    assert main(["bench", "--model", model_path, "--strategy", str(spath),
                 "--max-tokens", "8", "--reps", "2", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    for field in ("width", "acceptance_length", "median_latency_ms",
                  "tokens_per_s", "ratio", "units", "context_bucket"):
        assert field in report
    assert report["width"] == 4


def test_missing_model_file_is_io_error(capsys):
    assert main(["decode", "--model", "/nonexistent.ghdr", "--prompt", "x",
                 "--seq"]) == EXIT_IO


def test_corrupt_model_is_io_error(tmp_path, capsys):
    bad = tmp_path / "bad.ghdr"
    bad.write_bytes(b"NOPEnope")
    assert main(["decode", "--model", str(bad), "--prompt", "x",
                 "--seq"]) == EXIT_IO


def test_prompt_beyond_context_is_capacity_error(model_path, capsys):
    from specdec.cli import EXIT_CAPACITY

    long_prompt = "y" * 400  # nano max_context is 256
    assert main(["decode", "--model", model_path, "--prompt", long_prompt,
                 "--max-tokens", "4", "--seq"]) == EXIT_CAPACITY


def test_strategy_model_mismatch_exit_code(model_path, tmp_path, capsys):
    # strategy tree wants ranks the nano model's drafter can provide, but a
    # width larger than max_context cannot: use a mismatched vocab plan instead
    from specdec.config import TINY
    from specdec.runtime import plan_from_ratio
    from specdec.tuner import HeadAccuracyTable as HAT, Strategy, greedy_tree

    table = HAT(acc=[[0.5, 0.2]] * 4)
    tree = greedy_tree(table, 4)
    strategy = Strategy(width=4, tree=tree,
                        plans={32: plan_from_ratio(TINY, 0.5, 32, width=4)})
    spath = tmp_path / "strategy.json"
    spath.write_text(strategy.to_json())
    rc = main(["decode", "--model", model_path, "--prompt", "x",
               "--strategy", str(spath), "--units", "u0:workers=1;u1:workers=1",
               "--max-tokens", "4"])
    assert rc == EXIT_MISMATCH


def test_decode_with_units_and_strategy_matches_seq(model_path, tmp_path, capsys):
    from specdec.config import NANO
    from specdec.runtime import plan_from_ratio
    from specdec.tuner import HeadAccuracyTable as HAT, Strategy, greedy_tree

    table = HAT(acc=[[0.5, 0.2]] * 4)
    tree = greedy_tree(table, 4)
    strategy = Strategy(width=4, tree=tree,
                        plans={16: plan_from_ratio(NANO, 0.5, 16, width=4)})
    spath = tmp_path / "strategy.json"
    spath.write_text(strategy.to_json())
    base = ["decode", "--model", model_path, "--prompt", "parallel path",
            "--max-tokens", "12"]
    assert main(base + ["--seq"]) == 0
    seq_text = capsys.readouterr().out.splitlines()[0]
    assert main(base + ["--strategy", str(spath),
                        "--units", "u0:workers=1;u1:workers=1"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == seq_text


def test_profile_end_to_end(model_path, tmp_path, capsys):
    calib = tmp_path / "calib.jsonl"
    calib.write_text('{"prompt": "profiling run"}\n')
    out = tmp_path / "strategy.json"
    rc = main(["profile", "--model", model_path, "--widths", "2,4",
               "--calib", str(calib), "--calib-steps", "6", "--buckets", "16",
               "--units", "u0:workers=1;u1:workers=1", "--reps", "3",
               "--out", str(out)])
    assert rc == 0
    from specdec.tuner import Strategy

    strategy = Strategy.from_json(out.read_text())
    assert strategy.width in (2, 4)
    assert 16 in strategy.plans
    assert strategy.provenance["latency_source"] == "measured"


def test_cli_subprocess_entry_point(model_path):
    proc = subprocess.run(
        [sys.executable, "-m", "specdec.cli", "decode", "--model", model_path,
         "--prompt", "subprocess", "--max-tokens", "6", "--seq"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert "acceptance_length" in proc.stdout
