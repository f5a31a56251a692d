import csv
import json

import jsonschema
import pytest

from normkit import checks as checks_mod
from normkit.cli import (BENCH_SCHEMA, KEYS, main, parse_config_text, render_config, resolve)
from normkit.errors import ConfigError

TINY = ["--set", "data.classes=3", "--set", "data.samples_per_class=6", "--set", "data.height=6",
        "--set", "data.width=6", "--set", "train.eval_batch=9", "--set", "train.probe_size=4",
        "--batch-size", "4", "--epochs", "2"]


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


# -- config ------------------------------------------------------------------------

def test_parse_config_text():
    text = "# comment\nseed = 4\n\n norm.method = LN  # trailing\n"
    assert parse_config_text(text) == {"seed": "4", "norm.method": "LN"}
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("norm.kind = gn")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("seed = 1\nnonsense")


def test_resolve_layers_later_wins():
    v = resolve([{"seed": "1", "norm.groups": "8"}, {"norm.groups": "4"}])
    assert v["seed"] == 1 and v["norm.groups"] == 4 and v["norm.method"] == "gn"
    assert resolve([{"train.lr_drops": "0.3, 0.6,0.9"}])["train.lr_drops"] == (0.3, 0.6, 0.9)
    assert resolve([{"norm.method": "BatchNorm"}])["norm.method"] == "bn"
    with pytest.raises(ConfigError):
        resolve([{"train.epochs": "ten"}])
    with pytest.raises(ConfigError):
        resolve([{"model.dtype": "float16"}])


def test_render_round_trip():
    defaults = resolve([])
    assert resolve([parse_config_text(render_config(defaults))]) == defaults
    assert set(defaults) == set(KEYS)


def test_precedence_file_flag_set(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.epochs = 5\nnorm.groups = 2\nseed = 3\n")
    out = tmp_path / "o"
    code, _ = run(["train", "--config", cfg, "--out", out, *TINY, "--set", "norm.groups=4"], capsys)
    assert code == 0
    eff = parse_config_text((out / "effective_config").read_text())
    assert eff["train.epochs"] == "2" and eff["norm.groups"] == "4" and eff["seed"] == "3"


# -- usage errors -------------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["train", "--set", "bogus.key=1"],
    ["train", "--set", "novalue"],
    ["train", "--batch-size", "0"],
    ["train", "--norm", "gn", "--groups", "5"],
    ["train", "--noise-sigma", "-1"],
    ["train", "--config", "/nonexistent/file.cfg"],
    ["sweep", "--axis", "batch_size"],
    ["sweep", "--axis", "depth", "--values", "1"],
    ["sweep", "--axis", "batch_size", "--values", "2,x"],
    ["bench", "--threads", "0", "--shape", "1x2x2x2"],
    ["bench", "--shape", "2x3"],
    ["check", "--method", "gn", "--groups", "7", "--quick"],
])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    code, _ = run([*argv, "--out", tmp_path / "o"], capsys)
    assert code == 2


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 2


# -- check ---------------------------------------------------------------------------

def test_check_quick_passes(capsys):
    code, out = run(["check", "--quick"], capsys)
    assert code == 0
    lines = [json.loads(x) for x in out.out.splitlines()]
    assert lines and all(r["pass"] for r in lines)
    assert {r["check"] for r in lines} == {"equivalence", "moments", "gradcheck"}


def test_check_filters(capsys):
    code, out = run(["check", "--quick", "--method", "gn", "--groups", "2"], capsys)
    assert code == 0
    lines = [json.loads(x) for x in out.out.splitlines()]
    assert lines and all("gn" in r["name"] for r in lines)
    code, out = run(["check", "--quick", "--method", "bn"], capsys)
    names = [json.loads(x)["name"] for x in out.out.splitlines()]
    assert code == 0 and names and all("bn" in n for n in names)


def test_check_failure_exits_1_and_lists_failures_last(monkeypatch, capsys):
    import normkit.normlayer as nl
    original = nl._dx_block
    monkeypatch.setattr(nl, "_dx_block", lambda g, xh, s: original(g, xh, s) * 1.01)
    code, out = run(["check", "--quick", "--method", "ln"], capsys)
    assert code == 1
    flags = [json.loads(x)["pass"] for x in out.out.splitlines()]
    assert False in flags and flags == sorted(flags, reverse=True)


def test_check_exception_becomes_failed_report(monkeypatch, capsys):
    def boom(*a, **k):
        raise RuntimeError("broken")
    monkeypatch.setattr(checks_mod, "check_layer", boom)
    code, out = run(["check", "--quick", "--method", "in"], capsys)
    assert code == 1 and "broken" in out.out


# -- train -----------------------------------------------------------------------------

def test_train_writes_outputs_and_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train", "--out", a, *TINY], capsys)[0] == 0
    assert run(["train", "--out", b, *TINY], capsys)[0] == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    rows = list(csv.DictReader(open(a / "metrics.csv")))
    assert {r["layer"] for r in rows if r["layer"]} == set(KEYS["model.monitor"][1])
    assert run(["train", "--out", tmp_path / "c", *TINY, "--seed", "1"], capsys)[0] == 0
    assert (tmp_path / "c" / "metrics.csv").read_bytes() != (a / "metrics.csv").read_bytes()


def test_train_unnormalized_and_bn(tmp_path, capsys):
    for norm in ("none", "bn", "ln", "in"):
        code, out = run(["train", "--out", tmp_path / norm, *TINY, "--norm", norm], capsys)
        assert code == 0, out.err
        assert "final error" in out.out


def test_train_divergence_exits_3(tmp_path, capsys):
    code, out = run(["train", "--out", tmp_path / "d", *TINY, "--norm", "none", "--lr", "1e8",
                     "--set", "model.dtype=float64"], capsys)
    assert code == 3 and "diverged" in out.err
    assert (tmp_path / "d" / "metrics.csv").exists()
    assert not (tmp_path / "d" / "model.ckpt").exists()


def test_unknown_monitor_site_is_usage_error(tmp_path, capsys):
    code, _ = run(["train", "--out", tmp_path / "m", *TINY, "--monitor", "conv1,nowhere"], capsys)
    assert code == 2


# -- sweep ---------------------------------------------------------------------------------

def test_sweep_batch_sizes_by_method(tmp_path, capsys):
    out = tmp_path / "s"
    code, _ = run(["sweep", "--out", out, *TINY, "--axis", "batch_size", "--values", "2,4",
                   "--methods", "bn,gn", "--seeds", "0,1", "--epochs", "1"], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [(r["value"], r["seed"]) for r in rows] == [
        (v, s) for v in ("bn/2", "bn/4", "gn/2", "gn/4") for s in ("0", "1")]
    assert all(r["axis"] == "method/batch_size" for r in rows)
    assert all(0 <= float(r["final_error"]) <= 1 for r in rows)
    assert (out / "runs" / "gn-4" / "seed1" / "metrics.csv").exists()


def test_sweep_groups_axis(tmp_path, capsys):
    out = tmp_path / "g"
    code, _ = run(["sweep", "--out", out, *TINY, "--axis", "groups", "--values", "1,2",
                   "--epochs", "1"], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [r["value"] for r in rows] == ["1", "2"]


def test_sweep_invalid_group_value(tmp_path, capsys):
    code, _ = run(["sweep", "--out", tmp_path / "x", *TINY, "--axis", "channels_per_group",
                   "--values", "3"], capsys)
    assert code == 2


# -- bench -------------------------------------------------------------------------------------

def test_bench_schema_and_thread_determinism(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _ = run(["bench", "--out", out, "--shape", "2x4x3x3", "--shape", "2x4x2x3x3",
                       "--threads", "1", "--threads", "8", "--repeats", "1", "--groups", "2"], capsys)
        assert code == 0
        doc = json.loads((out / "bench.json").read_text())
        jsonschema.validate(doc, BENCH_SCHEMA)
        outs.append(doc)
    doc = outs[0]
    assert doc["deterministic"] and len(doc["results"]) == 2 * 4 * 2
    for r in doc["results"]:
        assert r["matches_single_thread"]
    by_key = {}
    for r in doc["results"]:
        by_key.setdefault((r["method"], tuple(r["shape"])), set()).add(r["checksum"])
    assert all(len(v) == 1 for v in by_key.values())
    assert [r["checksum"] for r in outs[0]["results"]] == [r["checksum"] for r in outs[1]["results"]]
    assert {r["groups"] for r in doc["results"] if r["method"] == "gn"} == {2}


def test_bench_mismatch_exits_1(tmp_path, monkeypatch, capsys):
    import normkit.cli as cli
    original = cli._pass_outputs

    def flaky(x, dy, scheme, params, threads):
        y, dx, dg, db = original(x, dy, scheme, params, threads)
        return (y + 1.0 if threads > 1 else y), dx, dg, db
    monkeypatch.setattr(cli, "_pass_outputs", flaky)
    code, _ = run(["bench", "--out", tmp_path / "f", "--shape", "1x2x2x2", "--threads", "2",
                   "--repeats", "1", "--methods", "ln"], capsys)
    assert code == 1
    doc = json.loads((tmp_path / "f" / "bench.json").read_text())
    assert doc["deterministic"] is False


def test_bench_group_count_capped_by_channels(tmp_path, capsys):
    code, _ = run(["bench", "--out", tmp_path / "c", "--shape", "1x4x2x2", "--repeats", "1",
                   "--methods", "gn"], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "c" / "bench.json").read_text())
    assert doc["results"][0]["groups"] == 4
