"""INI config resolution and the command-line entry points."""

import json
import os

import numpy as np
import pytest

from ssmprune.cli import cli
from ssmprune.config import DEFAULTS, SCHEMA, load_config, write_resolved
from ssmprune.errors import ConfigError
from ssmprune.model import load_model
from ssmprune.pruning import read_jsonl


def write_ini(path, text):
    with open(path, "w") as f:
        f.write(text)
    return str(path)


# -- config resolution ------------------------------------------------------


def test_defaults_without_file():
    cfg = load_config(None)
    assert set(cfg) == set(SCHEMA)
    for sec in cfg:
        assert cfg[sec] == DEFAULTS[sec]
    # a fresh dict each call, not a shared mutable default
    cfg["train"]["steps"] = 1
    assert load_config(None)["train"]["steps"] == DEFAULTS["train"]["steps"]


def test_partial_file_overlays_defaults(tmp_path):
    path = write_ini(tmp_path / "c.ini", "[train]\nsteps = 7\n")
    cfg = load_config(path)
    assert cfg["train"]["steps"] == 7
    assert cfg["train"]["d_model"] == DEFAULTS["train"]["d_model"]
    assert cfg["eval"] == DEFAULTS["eval"]


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unreadable or missing"):
        load_config(str(tmp_path / "absent.ini"))


def test_unknown_section_named(tmp_path):
    path = write_ini(tmp_path / "c.ini", "[frobnicate]\nx = 1\n")
    with pytest.raises(ConfigError, match=r"unknown section \[frobnicate\]"):
        load_config(path)


def test_unknown_key_named(tmp_path):
    path = write_ini(tmp_path / "c.ini", "[train]\nstepz = 10\n")
    with pytest.raises(ConfigError, match="unknown key 'stepz'.*\\[train\\]"):
        load_config(path)


@pytest.mark.parametrize("line,field", [
    ("steps = zero", "train.steps"),
    ("steps = -3", "train.steps"),
    ("lr = -0.1", "train.lr"),
    ("variant = mamba9", "train.variant"),
    ("transformer_at = 1,spam", "train.transformer_at"),
])
def test_bad_value_names_field(tmp_path, line, field):
    path = write_ini(tmp_path / "c.ini", f"[train]\n{line}\n")
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(path)


def test_bool_keys_parse_both_spellings(tmp_path):
    path = write_ini(tmp_path / "c.ini",
                     "[prune]\ncompact = false\nemit_trace = yes\n")
    cfg = load_config(path)["prune"]
    assert cfg["compact"] is False and cfg["emit_trace"] is True
    bad = write_ini(tmp_path / "d.ini", "[prune]\ncompact = maybe\n")
    with pytest.raises(ConfigError, match="prune.compact"):
        load_config(bad)


def test_resolved_round_trip(tmp_path):
    """write_resolved output re-reads to exactly the values written."""
    for sec in SCHEMA:
        values = dict(DEFAULTS[sec])
        path = str(tmp_path / f"{sec}.ini")
        write_resolved(path, sec, values)
        back = load_config(path)[sec]
        assert back == values, sec


# -- CLI flows --------------------------------------------------------------


TINY_TRAIN = """
[train]
n_blocks = 4
transformer_at = 1
d_model = 32
d_state = 8
mlp_hidden = 48
steps = 25
batch_size = 4
seq_len = 48
warmup = 5
eval_windows = 6
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One trained tiny checkpoint shared by the CLI tests below."""
    root = tmp_path_factory.mktemp("cli")
    ini = write_ini(root / "train.ini", TINY_TRAIN)
    out = str(root / "train_out")
    assert cli(["train", "--config", ini, "--out", out]) == 0
    return {"root": root, "ckpt": os.path.join(out, "model.ckpt"),
            "out": out}


def test_train_writes_artifacts(run_dir):
    for name in ("model.ckpt", "loss.csv", "resolved.ini"):
        assert os.path.exists(os.path.join(run_dir["out"], name)), name


def test_train_resolved_round_trips(run_dir):
    cfg = load_config(os.path.join(run_dir["out"], "resolved.ini"))["train"]
    assert cfg["steps"] == 25 and cfg["d_model"] == 32
    assert cfg["transformer_at"] == (1,)


def test_eval_reproduces_training_val_ppl(run_dir, capsys):
    """eval on a fresh checkpoint, same windows and length, is bit-equal
    to the validation perplexity recorded at the end of training."""
    _, meta = load_model(run_dir["ckpt"])
    ini = write_ini(run_dir["root"] / "eval.ini",
                    f"[eval]\ncheckpoint = {run_dir['ckpt']}\n"
                    f"windows = {meta['val_windows']}\n"
                    f"length = {meta['val_length']}\n")
    assert cli(["eval", "--config", ini]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    got = float(line.split()[2])
    assert got == pytest.approx(meta["final_val_ppl"], abs=5e-7)


def test_prune_plan_only_leaves_no_checkpoint(run_dir, capsys):
    ini = write_ini(run_dir["root"] / "po.ini",
                    f"[prune]\ncheckpoint = {run_dir['ckpt']}\n"
                    "schedule = mamba_block:1\ncal_count = 4\ncal_length = 32\n")
    out = str(run_dir["root"] / "plan_only")
    before = open(run_dir["ckpt"], "rb").read()
    assert cli(["prune", "--config", ini, "--out", out, "--plan-only"]) == 0
    capsys.readouterr()
    assert os.path.exists(os.path.join(out, "plan.jsonl"))
    assert not os.path.exists(os.path.join(out, "pruned.ckpt"))
    assert not os.path.exists(os.path.join(out, "compact.ckpt"))
    assert open(run_dir["ckpt"], "rb").read() == before


def test_prune_then_report_trace_csv(run_dir, capsys):
    ini = write_ini(run_dir["root"] / "pr.ini",
                    f"[prune]\ncheckpoint = {run_dir['ckpt']}\n"
                    "schedule = ssm:2\ncal_count = 4\ncal_length = 32\n")
    out = str(run_dir["root"] / "prune_out")
    assert cli(["prune", "--config", ini, "--out", out, "--emit-trace"]) == 0
    assert cli(["report", "--out", out]) == 0
    capsys.readouterr()
    rows = read_jsonl(os.path.join(out, "trace.jsonl"))
    lines = open(os.path.join(out, "trace.csv")).read().strip().splitlines()
    assert lines[0] == "iter,stage,kind,block,g,score"
    assert len(lines) - 1 == len(rows)
    for line, r in zip(lines[1:], rows):
        it, stage, kind, block, g, score = line.split(",")
        assert (int(it), int(stage), kind, int(block)) == \
            (r["iter"], r["stage"], r["kind"], r["block"])
        assert float(score) == r["score"]
        assert g == ("" if "g" not in r else str(r["g"]))


def test_prune_compact_checkpoint_matches_overlay(run_dir):
    out = os.path.join(str(run_dir["root"]), "prune_out")
    overlay, _ = load_model(os.path.join(out, "pruned.ckpt"))
    compacted, meta = load_model(os.path.join(out, "compact.ckpt"))
    assert meta["compacted"] is True
    rng = np.random.default_rng(5)
    probe = rng.integers(0, 96, size=(2, 20))
    a = overlay.forward(probe).data
    b = compacted.forward(probe).data
    assert np.max(np.abs(a - b)) <= 1e-6


def test_seed_flag_overrides_config(run_dir, tmp_path, capsys):
    ini = write_ini(tmp_path / "t.ini", TINY_TRAIN)
    out = str(tmp_path / "seeded")
    assert cli(["train", "--config", ini, "--out", out, "--seed", "3"]) == 0
    capsys.readouterr()
    cfg = load_config(os.path.join(out, "resolved.ini"))["train"]
    assert cfg["seed"] == 3
    _, meta = load_model(os.path.join(out, "model.ckpt"))
    assert meta["train_config"]["seed"] == 3


def test_cli_error_paths_exit_nonzero(tmp_path, capsys):
    cases = [
        ["eval", "--config", str(tmp_path / "nope.ini")],
        ["prune", "--out", str(tmp_path / "o1")],
        ["report", "--out", str(tmp_path / "empty_missing")],
        ["train", "--config",
         write_ini(tmp_path / "bad.ini", "[train]\nbogus = 1\n"),
         "--out", str(tmp_path / "o2")],
    ]
    for argv in cases:
        assert cli(argv) == 2, argv
        err = capsys.readouterr().err
        assert err.startswith("error: "), argv


def test_cli_bad_checkpoint_reports_and_exits(tmp_path, capsys):
    ck = tmp_path / "junk.ckpt"
    ck.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    ini = write_ini(tmp_path / "e.ini", f"[eval]\ncheckpoint = {ck}\n")
    assert cli(["eval", "--config", ini]) == 2
    assert "magic" in capsys.readouterr().err


def test_report_on_empty_dir_exits_nonzero(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli(["report", "--out", str(empty)]) == 2
    assert "no run artifacts" in capsys.readouterr().err
