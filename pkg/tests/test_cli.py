import io
import json
import math

import numpy as np
import pytest

from maac import checkpoint
from maac.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    attention_dump,
    evaluate,
    main,
    mean_ci,
    paired_focus_rate,
    restore,
)
from maac.config import ExperimentConfig, load_config, parse_override
from maac.envsim import ConfigError

TINY = """\
[env]
task = "rt"
n_rovers = 2
episode_length = 20

[learner]
hidden = 8
heads = 2
batch_size = 16
num_envs = 2
steps_per_update = 10

[run]
episodes = 6
checkpoint_interval = 4
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


def read_lines(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


class TestConfig:
    def test_defaults_match_reference_values(self):
        cfg = load_config(environ={})
        lc = cfg.learner
        assert (lc.gamma, lc.tau, lc.lr, lc.batch_size, lc.buffer_capacity) == (0.99, 0.005, 0.001, 1024, 1_000_000)
        assert (lc.num_envs, lc.steps_per_update, lc.critic_updates, lc.heads, lc.hidden) == (12, 100, 4, 4, 128)
        assert cfg.env.episode_length == 100

    def test_unknown_key_reports_line(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[env]\ntask = "cn"\n\n[learner]\ngama = 0.9\n')
        with pytest.raises(ConfigError, match=r"c\.toml:5: unknown key learner\.gama"):
            load_config(p, environ={})

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[env]\ntask = "cn"\n[optim]\nlr = 1\n')
        with pytest.raises(ConfigError, match=r":3: unknown section \[optim\]"):
            load_config(p, environ={})

    def test_missing_required_field_named(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[learner]\nhidden = 8\n")
        with pytest.raises(ConfigError, match="env.task"):
            load_config(p, environ={})

    def test_type_error_reports_line(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[env]\ntask = "cn"\nn_cn_agents = "three"\n')
        with pytest.raises(ConfigError, match=r":3: env\.n_cn_agents expects int"):
            load_config(p, environ={})

    def test_syntax_error(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[env\n")
        with pytest.raises(ConfigError):
            load_config(p, environ={})

    def test_override_and_seed_precedence(self, tiny):
        cfg = load_config(tiny, ["learner.gamma=0", "env.task=cn"], environ={"MAAC_SEED": "9"})
        assert cfg.learner.gamma == 0.0 and cfg.env.task == "cn"
        assert cfg.run.seed == 9
        assert load_config(tiny, seed=4, environ={"MAAC_SEED": "9"}).run.seed == 4
        assert cfg.train_config().seed == 9

    def test_parse_override(self):
        assert parse_override("learner.alpha=0.5") == ("learner", "alpha", 0.5)
        assert parse_override("env.task=rt") == ("env", "task", "rt")
        with pytest.raises(ConfigError):
            parse_override("gamma=1")

    def test_invalid_value_rejected(self, tiny):
        with pytest.raises(ConfigError, match="gamma"):
            load_config(tiny, ["learner.gamma=2.0"], environ={})

    def test_toml_round_trip(self, tiny, tmp_path):
        cfg = load_config(tiny, environ={})
        p = tmp_path / "again.toml"
        p.write_text(cfg.to_toml())
        assert load_config(p, environ={}) == cfg
        assert load_config(p, environ={}).hash() == cfg.hash()


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tiny, tmp_path):
        assert run_cli("train", "--config", tiny, "--out", tmp_path / "r") == EXIT_OK
        first = tmp_path / "r" / "final.ckpt"
        ckpt = checkpoint.load(str(first))
        again = tmp_path / "again.ckpt"
        checkpoint.save(ckpt, str(again))
        assert first.read_bytes() == again.read_bytes()
        _, learner, _ = restore(str(first))
        from maac.cli import make_checkpoint

        cfg = load_config(tiny, environ={})
        third = tmp_path / "third.ckpt"
        checkpoint.save(make_checkpoint(cfg, learner), str(third))
        assert first.read_bytes() == third.read_bytes()

    def test_layout(self, tiny, tmp_path):
        run_cli("train", "--config", tiny, "--out", tmp_path / "r")
        raw = (tmp_path / "r" / "final.ckpt").read_bytes()
        assert raw[:8] == checkpoint.MAGIC
        size = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16:16 + size])
        assert header["schema"] == 1 and len(header["config_hash"]) == 64
        entry = header["tensors"][0]
        start = 16 + size + entry["offset"]
        arr = np.frombuffer(raw[start:start + entry["nbytes"]], dtype="<f8")
        assert arr.size == math.prod(entry["shape"])

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(str(bad))

    def test_adam_state_round_trip(self):
        from maac.numcore import ParamTensor, adam_step

        p = ParamTensor(np.array([[1.0, 2.0]]), name="w")
        p.grad[:] = [[0.5, -0.5]]
        adam_step(p, 0.1)
        ck = checkpoint.Checkpoint.from_tensors({}, "h", {}, {"w": p})
        buf = io.BytesIO()
        checkpoint.write(ck, buf)
        back = checkpoint.read(io.BytesIO(buf.getvalue()))
        q = ParamTensor(np.zeros((1, 2)), name="w")
        back.apply({"w": q})
        np.testing.assert_array_equal(q.adam_m, p.adam_m)
        np.testing.assert_array_equal(q.adam_v, p.adam_v)
        assert q.step_count == 1


class TestTrain:
    def test_artifacts(self, tiny, tmp_path):
        out = tmp_path / "r"
        assert run_cli("train", "--config", tiny, "--out", out, "--export-csv",
                       "--override", "learner.gamma=0") == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["learner"]["gamma"] == 0.0
        assert manifest["deterministic"] is True
        recs = read_lines(out / "metrics.jsonl")
        assert [r["episode"] for r in recs] == list(range(6))
        assert all(r["schema"] == 1 and r["wall_clock"] is None for r in recs)
        assert set(recs[0]) >= {"agent_rewards", "team_reward", "critic_loss", "policy_loss",
                                "attention_entropy", "wall_clock"}
        assert (out / "checkpoints" / "ep0000004.ckpt").exists()
        assert (out / "metrics.csv").read_text().startswith("episode,team_reward")

    def test_same_seed_byte_identical(self, tiny, tmp_path):
        for name in ("a", "b"):
            assert run_cli("train", "--config", tiny, "--seed", 7, "--out", tmp_path / name) == EXIT_OK
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        run_cli("train", "--config", tiny, "--seed", 8, "--out", tmp_path / "c")
        assert a != (tmp_path / "c" / "metrics.jsonl").read_bytes()

    def test_resume_appends(self, tiny, tmp_path):
        out = tmp_path / "r"
        run_cli("train", "--config", tiny, "--out", out)
        assert run_cli("train", "--config", tiny, "--out", out, "--override", "run.episodes=10",
                       "--resume", out / "final.ckpt") == EXIT_OK
        assert [r["episode"] for r in read_lines(out / "metrics.jsonl")] == list(range(10))

    def test_resume_with_other_model_rejected(self, tiny, tmp_path):
        out = tmp_path / "r"
        run_cli("train", "--config", tiny, "--out", out)
        assert run_cli("train", "--config", tiny, "--out", out, "--override", "learner.hidden=16",
                       "--resume", out / "final.ckpt") == EXIT_CONFIG

    def test_config_errors_exit_2(self, tmp_path, capsys):
        p = tmp_path / "c.toml"
        p.write_text("[learner]\nhidden = 8\n")
        assert run_cli("train", "--config", p, "--out", tmp_path / "r") == EXIT_CONFIG
        assert "env.task" in capsys.readouterr().err
        assert not (tmp_path / "r" / "metrics.jsonl").exists()

    def test_missing_checkpoint_exit_3(self, tmp_path):
        assert run_cli("eval", "--checkpoint", tmp_path / "nope.ckpt") == 3


class TestEval:
    @pytest.fixture
    def trained(self, tiny, tmp_path):
        run_cli("train", "--config", tiny, "--out", tmp_path / "r")
        return tmp_path / "r" / "final.ckpt"

    def test_read_only_and_negative(self, trained):
        before = checkpoint.load(str(trained)).params_digest()
        s = evaluate(str(trained), episodes=4, seeds=[0, 1])
        assert s["params_sha256"] == before
        assert s["mean"] < 0 and s["n_episodes"] == 8
        assert checkpoint.load(str(trained)).params_digest() == before

    def test_ci_halves_with_four_times_the_episodes(self, trained):
        small = evaluate(str(trained), episodes=25, seeds=[0])["ci95"]
        big = evaluate(str(trained), episodes=100, seeds=[1])["ci95"]
        assert 0.3 < big / small < 0.75

    def test_config_mismatch(self, trained, tiny):
        other = load_config(tiny, ["learner.hidden=16"], environ={})
        with pytest.raises(ConfigError):
            evaluate(str(trained), 1, [0], expected=other)
        assert run_cli("eval", "--checkpoint", trained, "--config", tiny, "--override",
                       "learner.hidden=16") == EXIT_CONFIG

    def test_trajectory_dump(self, trained, tmp_path, capsys):
        path = tmp_path / "traj.jsonl"
        assert run_cli("eval", "--checkpoint", trained, "--episodes", 2, "--greedy",
                       "--dump-trajectory", path) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["greedy"] is True
        lines = read_lines(path)
        assert len(lines) == 20 and set(lines[0]) == {"state", "actions", "rewards"}


class TestInspectAttention:
    def test_rows_and_pairing(self, tiny, tmp_path):
        run_cli("train", "--config", tiny, "--out", tmp_path / "r")
        out = tmp_path / "att.jsonl"
        assert run_cli("inspect-attention", "--checkpoint", tmp_path / "r" / "final.ckpt",
                       "--episodes", 2, "--out", out) == EXIT_OK
        rows = read_lines(out)
        assert len(rows) == 40
        for row in rows:
            assert sorted(row["pairing"]) == [0, 1]
            for i, agent in enumerate(row["weights"]):
                for head in agent:
                    assert abs(sum(head) - 1.0) < 1e-9
                    assert head[i] == 0.0

    def test_uniform_entropy(self, tiny, tmp_path):
        run_cli("train", "--config", tiny, "--out", tmp_path / "u", "--override", "learner.algorithm=maac_uniform")
        _, learner, _ = restore(str(tmp_path / "u" / "final.ckpt"))
        for row in attention_dump(learner, 1, seed=0):
            np.testing.assert_allclose(row["entropy"], math.log(3), atol=1e-12)

    def test_non_attention_checkpoint(self, tiny, tmp_path):
        run_cli("train", "--config", tiny, "--out", tmp_path / "m", "--override", "learner.algorithm=maddpg_sac")
        assert run_cli("inspect-attention", "--checkpoint", tmp_path / "m" / "final.ckpt") == EXIT_CONFIG

    def test_paired_focus_rate(self):
        rows = [
            {"pairing": [1, 0], "weights": [[[0, 0, 0.1, 0.9], [0, 0, 0.2, 0.8]],
                                             [[0, 0, 0.6, 0.4], [0, 0, 0.3, 0.7]]]},
        ]
        # rover 0: tower maxima (0.2, 0.9) -> paired tower 1 wins
        # rover 1: tower maxima (0.6, 0.7) -> paired tower 0 loses
        assert paired_focus_rate(rows, 2) == 0.5


class TestScaling:
    def test_table_shape_and_normalisation(self, tiny, tmp_path):
        out = tmp_path / "s.csv"
        assert run_cli("scaling", "--config", tiny, "--counts", "4,6", "--episodes", 2, "--out", out) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0] == "algorithm,count,final_reward,normalized,improvement_pct,range_min,range_max"
        rows = [l.split(",") for l in lines[1:]]
        assert {(r[0], r[1]) for r in rows} == {(a, c) for a in ("maddpg_sac", "maac") for c in ("4", "6")}
        for r in rows:
            assert 0.0 <= float(r[3]) <= 1.0
            lo, hi, fin = float(r[5]), float(r[6]), float(r[2])
            assert float(r[3]) == pytest.approx((fin - lo) / (hi - lo))

    def test_invalid_count(self, tiny):
        assert run_cli("scaling", "--config", tiny, "--counts", "5") == EXIT_CONFIG


def test_dump_config_round_trips(tmp_path, capsys):
    assert run_cli("dump-config", "--override", "env.task=ctc") == EXIT_OK
    text = capsys.readouterr().out
    p = tmp_path / "d.toml"
    p.write_text(text)
    assert load_config(p, environ={}).env.task == "ctc"


def test_mean_ci():
    m, ci = mean_ci([1.0, 3.0])
    assert m == 2.0 and ci == pytest.approx(1.959963984540054 * math.sqrt(2) / math.sqrt(2))
    assert mean_ci([5.0])[1] is None
    assert isinstance(ExperimentConfig().hash(), str)
