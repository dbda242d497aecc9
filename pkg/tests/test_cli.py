import json
import subprocess
import sys

import pytest

from plandiff.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_USAGE, main

TINY = ["--set", "model.d_model=16", "--set", "model.n_layers=1", "--set", "model.n_heads=2",
        "--set", "model.d_ff=32", "--set", "model.max_seq_len=512", "--max-len", "512"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    corpus = ["--set", "corpus.n_heldout=4", "--set", "corpus.span_min=8", "--set", "corpus.span_max=12"]
    assert main(["gen-corpus", "--out", str(d / "corpus"), "-n", "24", *corpus]) == EXIT_OK
    for method in ("pd", "ar"):
        rc = main(["train", "--corpus", str(d / "corpus"), "--out", str(d / "runs" / method), "--method", method,
                   "--steps", "3", "--set", "train.batch_size=4", *TINY])
        assert rc == EXIT_OK
    return d


def test_gen_corpus_outputs(workdir):
    c = workdir / "corpus"
    assert len((c / "train.jsonl").read_text().splitlines()) == 24
    assert len((c / "heldout.jsonl").read_text().splitlines()) == 4
    manifest = (c / "manifest.txt").read_text()
    assert "seed = 0" in manifest and "config_digest" in manifest
    assert main(["validate", str(c / "train.jsonl")]) == EXIT_OK


def test_train_outputs(workdir):
    run = workdir / "runs" / "pd"
    assert (run / "final.ckpt").exists() and (run / "run_config.ini").exists()
    assert len((run / "loss_log.csv").read_text().splitlines()) == 4


def test_generate_writes_results_and_traces(workdir, tmp_path):
    prompts = tmp_path / "prompts.txt"
    first = json.loads((workdir / "corpus" / "heldout.jsonl").read_text().splitlines()[0])["prompt"]
    prompts.write_text(first + "\n\n" + first + "\n")
    out = tmp_path / "gen"
    rc = main(["generate", str(prompts), "--checkpoint", str(workdir / "runs" / "pd" / "final.ckpt"),
               "--out", str(out), "--steps-ratio", "0.5", *TINY])
    assert rc == EXIT_OK
    rows = [json.loads(l) for l in (out / "results.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    for r in rows:
        assert r["prompt"] == first
        assert {"raw", "stripped", "critical_path", "checkpoint", "config_digest"} <= set(r) or "error" in r
    traces = (out / "traces.jsonl").read_text().splitlines()
    assert "header" in json.loads(traces[0])
    meta = json.loads((out / "results.meta.json").read_text())
    assert meta["config"]["generate"]["steps_ratio"] == 0.5


def test_bench_report(workdir, tmp_path):
    rc = main(["bench", "--corpus", str(workdir / "corpus"), "--runs", str(workdir / "runs"), "--out",
               str(tmp_path / "bench"), "--methods", "pd,ar,pd-tau", "--n", "2", *TINY])
    assert rc == EXIT_OK
    lines = (tmp_path / "bench" / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("# config:") and lines[1].startswith("# checkpoints:")
    report = json.loads((tmp_path / "bench" / "bench.json").read_text())
    assert [r["method"] for r in report["rows"]] == ["PD", "AR", "PD+tau"]
    assert set(report["checkpoints"]) == {"pd", "ar"}


def test_exit_codes(workdir, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"prompt": "list", "response": "<topic> color </topic> <async> red </async>"}\n')
    assert main(["validate", str(bad)]) == EXIT_INVALID
    assert main(["validate", str(tmp_path / "missing.jsonl")]) == EXIT_IO
    assert main(["validate", str(bad), "--set", "train.nope=1"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["gen-corpus", "--out", str(tmp_path / "c"), "--set", "corpus.span_min=2"]) == EXIT_USAGE
    prompts = tmp_path / "p.txt"
    prompts.write_text("list <topic>\n")
    ck = str(workdir / "runs" / "pd" / "final.ckpt")
    assert main(["generate", str(prompts), "--checkpoint", ck, "--out", str(tmp_path / "g"), *TINY]) == EXIT_INVALID


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "plandiff", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-corpus" in out.stdout
