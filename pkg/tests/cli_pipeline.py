"""Runs every CLI subcommand once, at toy sizes, under one root directory."""

from __future__ import annotations

import contextlib
import io
from pathlib import Path

from panoenv.cli import main

TINY_ABLATE = ["--worlds", "1", "--nodes", "6", "--episodes", "2", "--T", "4", "--gen-iters", "4", "--adapt-iters", "4", "--pt-iters", "4", "--ft-iters", "3"]


def steps(root: Path) -> list[tuple[str, list[str]]]:
    r = str(root)
    return [
        ("make-world", ["make-world", "--seed", "3", "--nodes", "6", "--episodes", "4", "--out", f"{r}/w"]),
        ("make-world-2", ["make-world", "--seed", "4", "--nodes", "6", "--episodes", "4", "--out", f"{r}/w2"]),
        ("build-pairs", ["build-pairs", "--world", f"{r}/w", "--out", f"{r}/pairs.jsonl"]),
        ("train-base", ["train-base", "--seed", "1", "--iters", "6", "--images", "16", "--T", "4", "--width", "16", "--blocks", "1", "--out", f"{r}/base"]),
        ("adapt", ["adapt", "--pairs", f"{r}/pairs.jsonl", "--model", f"{r}/base/model.pgpp", "--rank", "4", "--iters", "5", "--batch", "4", "--optimizer", "adam", "--seed", "2", "--out", f"{r}/adapter"]),
        ("generate-inpaint", ["generate", "--mode", "inpaint", "--mask", "prm", "--model", f"{r}/base/model.pgpp", "--adapter", f"{r}/adapter/adapter.pgpp", "--world", f"{r}/w", "--seed", "5", "--out", f"{r}/gen"]),
        ("generate-outpaint", ["generate", "--mode", "outpaint", "--model", f"{r}/base/model.pgpp", "--world", f"{r}/w", "--nodes", "0", "--seed", "6", "--out", f"{r}/out"]),
        ("pretrain", ["pretrain", "--world", f"{r}/w", "--iters", "6", "--seed", "7", "--out", f"{r}/pt"]),
        ("finetune", ["finetune", "--world", f"{r}/w", "--gen-dir", f"{r}/gen", "--agent", f"{r}/pt/agent.pgpp", "--mix-ratio", "0.5", "--iters", "4", "--seed", "8", "--out", f"{r}/ft"]),
        ("finetune-sweep", ["finetune", "--world", f"{r}/w", "--gen-dir", f"{r}/gen", "--agent", f"{r}/pt/agent.pgpp", "--sweep-ratios", "0,0.5", "--eval-world", f"{r}/w2", "--iters", "3", "--seed", "8", "--out", f"{r}/sweep"]),
        ("eval", ["eval", "--world", f"{r}/w2", "--agent", f"{r}/ft/agent.pgpp", "--out", f"{r}/metrics.json"]),
        ("eval-threads", ["eval", "--world", f"{r}/w2", "--agent", f"{r}/ft/agent.pgpp", "--threads", "3", "--out", f"{r}/metrics_mt.json"]),
        ("fid", ["fid", "--set-a", f"{r}/w/panos", "--set-b", f"{r}/gen/panos", "--out", f"{r}/fid.json"]),
        ("ablate-rank", ["ablate", "--kind", "rank", "--seed", "0", "--ranks", "4,16", *TINY_ABLATE, "--out", f"{r}/rank.json"]),
        ("ablate-mask", ["ablate", "--kind", "mask", "--seed", "0", *TINY_ABLATE, "--out", f"{r}/mask.json"]),
        ("ablate-mix", ["ablate", "--kind", "mix", "--seed", "0", "--seeds", "0,1", "--ratios", "0,0.5", *TINY_ABLATE, "--out", f"{r}/mix.json"]),
        ("validate", ["validate", f"{r}/w/world.json", f"{r}/w/episodes.jsonl", f"{r}/w/panos/node_0000.pan", f"{r}/pairs.jsonl", f"{r}/base/model.pgpp", f"{r}/base/trace.jsonl", f"{r}/adapter/adapter.pgpp", f"{r}/gen/generated.json", f"{r}/out/generated.json", f"{r}/pt/trace.jsonl", f"{r}/sweep/sweep.json", f"{r}/metrics.json", f"{r}/fid.json", f"{r}/rank.json", f"{r}/mask.json", f"{r}/mix.json"]),
    ]


def run(root: Path) -> dict[str, tuple[int, str]]:
    """Exit code and stdout (root path masked) per step."""
    out = {}
    for name, argv in steps(root):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main(argv)
        out[name] = (code, buf.getvalue().replace(str(root), "<root>"))
    return out


def snapshot(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
