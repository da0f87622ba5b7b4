import json
import os

import numpy as np
import pytest

from pemorl import cli, persistence, reporting
from pemorl import trainer as tr
from pemorl.config import RunConfig

TINY = """\
[data]
episodes = 8
test_episodes = 3
[model]
epochs = 2
n_members = 2
embed_dim = 8
n_heads = 2
hidden = 16
[learner]
hidden = 16
[trainer]
max_iterations = 2
min_iterations = 1
q_steps = 2
policy_steps = 2
eval_episodes = 3
n_starts = 16
batch_size = 32
n_projections = 8
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return str(p)


def run(*argv):
    return cli.main(["-q" if a == "QUIET" else a for a in argv])


def files(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


# -- exit codes ----------------------------------------------------------------


@pytest.mark.parametrize("argv", [[], ["fly"], ["ablate", "--lambdas", "a,b"], ["ablate", "--lambdas", "-1"],
                                  ["ablate", "--seeds", "0"], ["eval", "--seed", "-3"], ["gen-data", "--bogus"]])
def test_bad_flags_exit_one(argv, capsys):
    assert cli.main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_user_errors_exit_one(tmp_path, tiny, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[learner]\nlamda = 1\n")
    assert run("gen-data", "--config", str(bad), "--out", str(tmp_path / "o")) == 1
    assert run("gen-data", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "o")) == 1
    assert run("eval", "--config", tiny, "--out", str(tmp_path / "empty")) == 1
    assert run("report", "--config", tiny, "--out", str(tmp_path / "empty")) == 1
    junk = tmp_path / "junk"
    junk.mkdir()
    (junk / "policy.ckpt").write_bytes(b"not a checkpoint")
    assert run("eval", "--config", tiny, "--out", str(junk)) == 1
    assert "internal" not in capsys.readouterr().err


def test_internal_errors_exit_two(tmp_path, tiny, monkeypatch, capsys):
    def boom(cfg, args):
        raise RuntimeError("kaput")

    monkeypatch.setitem(cli.HANDLERS, "gen-data", boom)
    assert run("gen-data", "--config", tiny, "--out", str(tmp_path)) == 2
    assert "internal error" in capsys.readouterr().err


# -- seed resolution -------------------------------------------------------------


def test_seed_precedence(tiny, monkeypatch):
    parser = cli.build_parser()
    args = parser.parse_args(["eval", "--config", tiny])
    assert cli.resolve_config(args, env={}).seed == 0
    assert cli.resolve_config(args, env={"PEMORL_SEED": "7"}).seed == 7
    args = parser.parse_args(["eval", "--config", tiny, "--seed", "2", "--out", "x"])
    cfg = cli.resolve_config(args, env={"PEMORL_SEED": "7"})
    assert cfg.seed == 2 and cfg.out == "x"


# -- end to end ----------------------------------------------------------------


def pipeline(tiny, out):
    for cmd in ("gen-data", "train-model", "train-policy", "eval", "report"):
        assert run(cmd, "--config", tiny, "--out", out, "QUIET") == 0, cmd
    return files(out)


def test_pipeline_outputs_and_byte_identical_repeat(tmp_path, tiny):
    a = pipeline(tiny, str(tmp_path / "a"))
    assert {"real.jsonl", "test.jsonl", "config.resolved.toml", "model.ckpt", "metrics.csv", "policy.ckpt",
            "eval_report.json", "curves.csv", "report.gp", "manifest.json"} <= set(a)
    manifest = json.loads(a["manifest.json"])
    h = manifest["metrics.csv"]
    assert set(manifest.values()) == {h}
    assert a["config.resolved.toml"].decode().startswith(f"# config_hash = {h}")
    assert reporting.read_csv(tmp_path / "a" / "metrics.csv")[0]["config_hash"] == h
    report = json.loads(a["eval_report.json"])
    assert report["config_hash"] == h and report["online_rate_definition"]
    b = pipeline(tiny, str(tmp_path / "b"))
    # the resolved config records its own output directory; everything else must match
    for d in (a, b):
        d["config.resolved.toml"] = b"".join(
            ln for ln in d["config.resolved.toml"].splitlines(True) if not ln.startswith(b"out = "))
    assert a == b


def test_env_seed_changes_outputs(tmp_path, tiny, monkeypatch):
    assert run("gen-data", "--config", tiny, "--out", str(tmp_path / "a"), "QUIET") == 0
    monkeypatch.setenv("PEMORL_SEED", "5")
    assert run("gen-data", "--config", tiny, "--out", str(tmp_path / "b"), "QUIET") == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a["real.jsonl"] != b["real.jsonl"]
    assert "seed = 5" in b["config.resolved.toml"].decode()


def test_ablate_and_compare_commands(tmp_path, tiny):
    out = str(tmp_path)
    assert run("ablate", "--config", tiny, "--out", out, "--lambdas", "3,0", "--seeds", "2", "--lower-bound", "QUIET") == 0
    agg = reporting.read_csv(tmp_path / "ablation.csv")
    assert [float(r["lam"]) for r in agg] == [0.0, 3.0] and all(r["n_seeds"] == "2" for r in agg)
    assert len(reporting.read_csv(tmp_path / "ablation_runs.csv")) == 4
    assert len(reporting.read_csv(tmp_path / "lower_bound.csv")) == 8
    assert run("report", "--config", tiny, "--out", out, "QUIET") == 0
    assert "ablation.csv" in (tmp_path / "report.gp").read_text()
    assert run("compare-models", "--config", tiny, "--out", out, "--seeds", "1", "QUIET") == 0
    rows = reporting.read_csv(tmp_path / "model_compare.csv")
    assert [r["model"] for r in rows] == ["pe", "fc_non_pe", "gsp_proxy"]


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trips(tmp_path):
    cfg = RunConfig().replace(**{
        "data": {"episodes": 6}, "model": {"epochs": 1, "n_members": 2, "embed_dim": 8, "n_heads": 2, "hidden": 16},
        "learner": {"hidden": 16},
    })
    real = tr.make_real_data(cfg, 0)
    ens = tr.fit_ensemble(real, cfg.model, 0)
    persistence.save_ensemble(ens, tmp_path / "m.ckpt")
    back = persistence.load_ensemble(tmp_path / "m.ckpt", cfg)
    X, _ = real.model_xy()
    for a, b in zip(ens.predict_members(X), back.predict_members(X)):
        assert a.tobytes() == b.tobytes()
    pol = tr.learner_for(real, cfg, 1.0, 3).policy
    persistence.save_policy(pol, tmp_path / "p.ckpt")
    pol2 = persistence.load_policy(tmp_path / "p.ckpt", cfg)
    obs = np.random.default_rng(0).normal(size=(10, 6))
    assert pol.act(obs).tobytes() == pol2.act(obs).tobytes()
    wider = cfg.replace(model={"embed_dim": 16}, learner={"hidden": 32})
    with pytest.raises(persistence.CheckpointError):
        persistence.load_ensemble(tmp_path / "m.ckpt", wider)
    with pytest.raises(persistence.CheckpointError):
        persistence.load_policy(tmp_path / "p.ckpt", wider)
    with pytest.raises(persistence.CheckpointError):
        persistence.load_policy(tmp_path / "m.ckpt", cfg)
