import json

import pytest

from cli_pipeline import steps
from panoenv.cli import main


@pytest.mark.parametrize("name", [n for n, _ in steps(__import__("pathlib").Path("/x"))])
def test_subcommand_succeeds_and_is_reproducible(cli_runs, name):
    (res_a, files_a), (res_b, files_b) = cli_runs
    assert res_a[name][0] == 0, res_a[name]
    assert res_a[name] == res_b[name]


def test_all_outputs_byte_identical(cli_runs):
    (_, files_a), (_, files_b) = cli_runs
    assert sorted(files_a) == sorted(files_b)
    diff = [k for k in files_a if files_a[k] != files_b[k]]
    assert diff == []


def test_threaded_eval_matches_serial(cli_runs):
    (_, files), _ = cli_runs
    assert files["metrics.json"] == files["metrics_mt.json"]


def test_mix_ratio_zero_ignores_generated(tmp_path, cli_runs):
    (res, _), _ = cli_runs
    root = tmp_path
    assert main(["make-world", "--seed", "3", "--nodes", "6", "--episodes", "4", "--out", f"{root}/w"]) == 0
    assert main(["pretrain", "--world", f"{root}/w", "--iters", "3", "--seed", "7", "--out", f"{root}/pt"]) == 0
    base = ["finetune", "--world", f"{root}/w", "--agent", f"{root}/pt/agent.pgpp", "--iters", "3", "--seed", "8"]
    assert main(base + ["--out", f"{root}/a"]) == 0
    # a generation directory for the same world, with ratio 0, must not change anything
    fake = root / "gen"
    (fake / "panos").mkdir(parents=True)
    manifest = {"mode": "inpaint", "nodes": []}
    for p in sorted((root / "w" / "panos").iterdir()):
        (fake / "panos" / p.name).write_bytes(p.read_bytes())
        manifest["nodes"].append({"id": int(p.stem.split("_")[1]), "pano": f"panos/{p.name}"})
    (fake / "generated.json").write_text(json.dumps(manifest))
    assert main(base + ["--gen-dir", str(fake), "--mix-ratio", "0", "--out", f"{root}/b"]) == 0
    assert (root / "a" / "agent.pgpp").read_bytes() == (root / "b" / "agent.pgpp").read_bytes()


def test_eval_stub_policies(tmp_path, capsys):
    assert main(["make-world", "--seed", "9", "--nodes", "8", "--episodes", "5", "--out", f"{tmp_path}/w"]) == 0
    assert main(["eval", "--world", f"{tmp_path}/w", "--agent", "oracle", "--out", f"{tmp_path}/o.json"]) == 0
    o = json.loads((tmp_path / "o.json").read_text())
    assert o["SR"] == 100.0 and o["SPL"] == 100.0 and o["NE"] == 0.0
    assert main(["eval", "--world", f"{tmp_path}/w", "--agent", "stationary", "--out", f"{tmp_path}/s.json"]) == 0
    s = json.loads((tmp_path / "s.json").read_text())
    assert s["TL"] == 0.0 and s["GP"] == 0.0


@pytest.mark.parametrize(
    "argv,code",
    [
        (["make-world", "--seed", "1", "--nodes", "1", "--out", "x"], 2),
        (["make-world", "--seed", "-1", "--nodes", "5", "--out", "x"], 2),
        (["bogus"], 2),
        (["finetune", "--world", "w", "--mix-ratio", "1.3", "--seed", "0", "--out", "x"], 2),
        (["eval", "--world", "/nonexistent/world.json", "--agent", "oracle"], 3),
        (["validate", "/nonexistent.json"], 3),
    ],
)
def test_exit_codes(tmp_path, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_usage_errors_in_pipeline(tmp_path):
    r = tmp_path
    assert main(["make-world", "--seed", "3", "--nodes", "6", "--episodes", "2", "--out", f"{r}/w"]) == 0
    assert main(["build-pairs", "--world", f"{r}/w", "--out", f"{r}/p.jsonl"]) == 0
    assert main(["train-base", "--seed", "1", "--iters", "1", "--images", "4", "--T", "2", "--width", "16", "--blocks", "1", "--out", f"{r}/b"]) == 0
    assert main(["adapt", "--pairs", f"{r}/p.jsonl", "--model", f"{r}/b/model.pgpp", "--rank", "128", "--seed", "0", "--out", f"{r}/a"]) == 2
    assert main(["generate", "--mode", "inpaint", "--model", f"{r}/b/model.pgpp", "--world", f"{r}/w", "--seed", "0", "--out", f"{r}/g"]) == 2
    assert main(["pretrain", "--world", f"{r}/w", "--iters", "1", "--seed", "0", "--out", f"{r}/pt"]) == 0
    assert main(["finetune", "--world", f"{r}/w", "--mix-ratio", "0.5", "--iters", "1", "--seed", "0", "--out", f"{r}/ft"]) == 2
    assert not (r / "a").exists() and not (r / "g").exists() and not (r / "ft").exists()


def test_validate_flags_bad_files(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps({"TL": 1, "NE": 1, "SR": 10, "SPL": 20, "GP": 0, "episodes": []}))
    (tmp_path / "e.jsonl").write_text('{"path": [0], "instruction": []}\n')
    (tmp_path / "x.pan").write_bytes(b"PAN1" + b"\0" * 5)
    assert main(["validate", str(tmp_path / "m.json"), str(tmp_path / "e.jsonl"), str(tmp_path / "x.pan")]) == 3
    out = capsys.readouterr().out
    assert out.count("INVALID") == 3
