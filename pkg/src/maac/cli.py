"""Command-line front end: ``maac train | eval | inspect-attention | scaling | dump-config``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace
from typing import Sequence

import numpy as np

from maac import __version__, checkpoint
from maac.agents import sample
from maac.config import SCHEMA_VERSION, ExperimentConfig, config_from_dict, load_config
from maac.critics import AttentionCritic
from maac.envsim import ConfigError, ParticleEnv, dump_trajectory
from maac.learner import Learner, rollout_rewards
from maac.numcore import one_hot
from maac.physics import BACKEND

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
Z95 = 1.959963984540054


def mean_ci(values: Sequence[float]) -> tuple[float, float | None]:
    """Mean and half-width of a normal-approximation 95% interval."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return float(arr.mean()), None
    return float(arr.mean()), float(Z95 * arr.std(ddof=1) / math.sqrt(arr.size))


# -- shared plumbing ---------------------------------------------------------
def make_checkpoint(cfg: ExperimentConfig, learner: Learner) -> checkpoint.Checkpoint:
    return checkpoint.Checkpoint.from_tensors(cfg.to_dict(), cfg.hash(), learner.counters(),
                                              learner.named_tensors())


def restore(path: str, expected: ExperimentConfig | None = None,
            threads: int = 1) -> tuple[ExperimentConfig, Learner, checkpoint.Checkpoint]:
    """Rebuild the learner stored in a checkpoint.

    The stored configuration must hash to the stored hash.  When ``expected``
    is given its environment, learner and seed must match the checkpoint's;
    its run section (episode budget, paths) replaces the stored one.
    """
    ckpt = checkpoint.load(path)
    cfg = config_from_dict(ckpt.config)
    if cfg.hash() != ckpt.config_hash:
        raise checkpoint.CheckpointError(f"{path}: stored configuration does not match its hash")
    if expected is not None:
        if expected.model_hash() != cfg.model_hash():
            raise ConfigError(f"{path}: checkpoint was trained with a different configuration "
                              f"({cfg.model_hash()[:12]} != {expected.model_hash()[:12]})")
        cfg = expected
    learner = Learner(cfg.env, cfg.train_config(), threads=threads)
    ckpt.apply(learner.named_tensors())
    learner.restore_counters(ckpt.counters)
    return cfg, learner, ckpt


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def metrics_to_csv(jsonl_path: str, csv_path: str) -> None:
    """Flatten the metrics stream into one tidy row per episode."""
    with open(jsonl_path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows:
        return
    n = len(rows[0]["agent_rewards"])
    header = ["episode", "team_reward", "critic_loss", "wall_clock"]
    header += [f"reward_agent{i}" for i in range(n)] + [f"policy_loss_agent{i}" for i in range(n)]
    heads = max((len(r["attention_entropy"][0]) for r in rows if r["attention_entropy"]), default=0)
    header += [f"attention_entropy_agent{i}_head{h}" for i in range(n) for h in range(heads)]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            pl = r["policy_loss"] or [None] * n
            ent = r["attention_entropy"] or [[None] * heads for _ in range(n)]
            w.writerow([r["episode"], r["team_reward"], r["critic_loss"], r["wall_clock"],
                        *r["agent_rewards"], *pl, *[e for row in ent for e in row]])


# -- train -------------------------------------------------------------------
def train_run(cfg: ExperimentConfig, out_dir: str, threads: int = 1, resume: str | None = None,
              export_csv: bool = False, argv: Sequence[str] = ()) -> str:
    """Train per ``cfg`` writing artefacts into ``out_dir``; returns the final checkpoint path."""
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    deterministic = threads == 1
    if resume is not None:
        _, learner, _ = restore(resume, expected=cfg, threads=threads)
    else:
        learner = None
    manifest = {
        "schema": SCHEMA_VERSION,
        "code_version": __version__,
        "physics_backend": BACKEND,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.run.seed,
        "threads": threads,
        "deterministic": deterministic,
        "resumed_from": resume,
        "argv": list(argv),
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    if learner is None:
        learner = Learner(cfg.env, cfg.train_config(), threads=threads)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    eval_path = os.path.join(out_dir, "eval.jsonl")
    run = cfg.run
    next_ckpt = _next_multiple(learner.episodes_done, run.checkpoint_interval)
    next_eval = _next_multiple(learner.episodes_done, run.eval_interval)
    mode = "a" if resume is not None else "w"
    try:
        with open(metrics_path, mode) as mfh, open(eval_path, mode) as efh:
            def on_iteration(records: list[dict]) -> None:
                nonlocal next_ckpt, next_eval
                for rec in records:
                    rec = {"schema": SCHEMA_VERSION, **rec}
                    if deterministic:
                        rec["wall_clock"] = None
                    mfh.write(json.dumps(rec, sort_keys=True) + "\n")
                mfh.flush()
                done = learner.episodes_done
                if next_ckpt is not None and done >= next_ckpt:
                    path = os.path.join(out_dir, "checkpoints", f"ep{done:07d}.ckpt")
                    checkpoint.save(make_checkpoint(cfg, learner), path)
                    next_ckpt = _next_multiple(done, run.checkpoint_interval)
                if next_eval is not None and done >= next_eval:
                    rewards = rollout_rewards(learner.policies, learner.env_config, run.eval_episodes,
                                              seed=run.seed + done, greedy=True)
                    mean, ci = mean_ci(rewards)
                    efh.write(json.dumps({"episode": done, "mean": mean, "ci95": ci}, sort_keys=True) + "\n")
                    efh.flush()
                    next_eval = _next_multiple(done, run.eval_interval)

            for _ in learner.train(run.episodes, callback=on_iteration):
                pass
    finally:
        learner.close()
    final = os.path.join(out_dir, "final.ckpt")
    checkpoint.save(make_checkpoint(cfg, learner), final)
    if export_csv:
        metrics_to_csv(metrics_path, os.path.join(out_dir, "metrics.csv"))
    return final


def _next_multiple(done: int, interval: int) -> int | None:
    if interval <= 0:
        return None
    return (done // interval + 1) * interval


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override, seed=args.seed)
    out_dir = args.out or cfg.run.output_dir
    final = train_run(cfg, out_dir, threads=args.threads, resume=args.resume,
                      export_csv=args.export_csv, argv=sys.argv)
    print(json.dumps({"output_dir": out_dir, "final_checkpoint": final}))
    return EXIT_OK


# -- eval --------------------------------------------------------------------
def policy_actor(learner: Learner, rng: np.random.Generator, greedy: bool):
    def act(obs):
        return [int(sample(p.net, obs[j][None], rng, greedy=greedy).action[0])
                for j, p in enumerate(learner.policies)]
    return act


def evaluate(ckpt_path: str, episodes: int, seeds: Sequence[int], greedy: bool = False,
             expected: ExperimentConfig | None = None, trajectory: str | None = None) -> dict:
    cfg, learner, ckpt = restore(ckpt_path, expected=expected)
    before = checkpoint.params_digest(learner.named_tensors())
    per_episode: list[float] = []
    per_seed = []
    for seed in seeds:
        r = rollout_rewards(learner.policies, learner.env_config, episodes, seed=seed, greedy=greedy)
        per_episode += r.tolist()
        per_seed.append(float(r.mean()))
    if trajectory is not None:
        env = ParticleEnv(learner.env_config)
        with open(trajectory, "w") as fh:
            dump_trajectory(env, policy_actor(learner, np.random.default_rng(seeds[0]), greedy),
                            seed=seeds[0], out=fh)
    after = checkpoint.params_digest(learner.named_tensors())
    if before != after or after != ckpt.params_digest():
        raise RuntimeError("evaluation modified the policy parameters")
    mean, ci = mean_ci(per_episode)
    return {
        "mean": mean,
        "ci95": ci,
        "n_episodes": len(per_episode),
        "per_seed_mean": per_seed,
        "seeds": list(seeds),
        "greedy": greedy,
        "params_sha256": after,
        "config_hash": ckpt.config_hash,
    }


def cmd_eval(args) -> int:
    expected = load_config(args.config, args.override) if args.config else None
    summary = evaluate(args.checkpoint, args.episodes, args.seeds, greedy=args.greedy,
                       expected=expected, trajectory=args.dump_trajectory)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- inspect-attention ---------------------------------------------------------
def attention_dump(learner: Learner, episodes: int, seed: int, greedy: bool = False):
    """Yield one record per environment step with every agent's attention rows.

    ``weights[i][h]`` is agent i's head-h distribution over all N agents
    (its own slot is 0); ``pairing`` is the rover -> tower map for Rover-Tower.
    """
    critic = learner.critic
    if not isinstance(critic, AttentionCritic):
        raise ConfigError(f"algorithm {learner.config.algorithm!r} has no attention critic to inspect")
    env = ParticleEnv(learner.env_config)
    rng = np.random.default_rng(seed)
    env.rng = np.random.default_rng(rng.integers(2**63))
    act = policy_actor(learner, rng, greedy)
    for ep in range(episodes):
        state, obs = env.reset()
        for t in range(learner.env_config.episode_length):
            joint = act(obs)
            onehots = [one_hot(np.array([a]), d) for a, d in zip(joint, learner.action_dims)]
            _, _, trace = critic.forward([o[None] for o in obs], onehots)
            weights = [[trace.weights[h][0, i].tolist() for h in range(critic.heads)]
                       for i in range(learner.n_agents)]
            yield {
                "episode": ep,
                "step": t,
                "pairing": None if state.pairing is None else [int(x) for x in state.pairing],
                "weights": weights,
                "entropy": trace.entropies().tolist(),
            }
            res = env.step(joint)
            state, obs = res.next_state, res.observations


def paired_focus_rate(records, n_rovers: int) -> float:
    """Fraction of (step, rover) cases whose head-maximum attention on the
    paired tower exceeds the head-maximum attention on every other tower."""
    hits = total = 0
    for rec in records:
        for r in range(n_rovers):
            w = np.asarray(rec["weights"][r])  # (heads, N)
            towers = w[:, n_rovers:2 * n_rovers].max(axis=0)
            paired = rec["pairing"][r]
            others = np.delete(towers, paired)
            hits += bool(np.all(towers[paired] > others))
            total += 1
    return hits / total if total else float("nan")


def cmd_inspect_attention(args) -> int:
    _, learner, _ = restore(args.checkpoint)
    rows = attention_dump(learner, args.episodes, args.seed, greedy=args.greedy)
    out = open(args.out, "w") if args.out else sys.stdout
    summary_rows = []
    try:
        for rec in rows:
            out.write(json.dumps(rec) + "\n")
            summary_rows.append(rec)
    finally:
        if out is not sys.stdout:
            out.close()
    if learner.env_config.task == "rt" and args.out:
        rate = paired_focus_rate(summary_rows, learner.env_config.n_rovers)
        print(json.dumps({"paired_tower_focus": rate, "steps": len(summary_rows)}))
    return EXIT_OK


# -- scaling -----------------------------------------------------------------
def scaling_table(cfg: ExperimentConfig, counts: Sequence[int], algorithms: Sequence[str],
                  episodes: int | None = None, threads: int = 1) -> list[dict]:
    """Train every algorithm at every agent count with shared seeds.

    Final reward is the mean team reward over the last tenth of training.
    Normalisation uses the observed minimum and maximum episode team reward
    across all algorithms for that count; improvements are relative to the
    first algorithm listed.
    """
    episodes = episodes or cfg.run.episodes
    rows = []
    for n in counts:
        env_cfg = cfg.env.with_agent_count(n)
        finals, seen = {}, []
        for alg in algorithms:
            tc = replace(cfg.train_config(), algorithm=alg)
            learner = Learner(env_cfg, tc, threads=threads)
            try:
                rewards = [r["team_reward"] for r in learner.train(episodes)]
            finally:
                learner.close()
            tail = max(1, len(rewards) // 10)
            finals[alg] = float(np.mean(rewards[-tail:]))
            seen += rewards
        lo, hi = float(min(seen)), float(max(seen))
        span = hi - lo
        norm = {a: (f - lo) / span if span > 0 else 0.0 for a, f in finals.items()}
        base = algorithms[0]
        for alg in algorithms:
            imp = None
            if alg != base and norm[base] > 0:
                imp = 100.0 * (norm[alg] - norm[base]) / norm[base]
            rows.append({"algorithm": alg, "count": n, "final_reward": finals[alg],
                         "normalized": norm[alg], "improvement_pct": imp,
                         "range_min": lo, "range_max": hi})
    return rows


def cmd_scaling(args) -> int:
    cfg = load_config(args.config, args.override, seed=args.seed)
    counts = [int(c) for c in args.counts.split(",")]
    algorithms = [a.strip() for a in args.algorithms.split(",")]
    for n in counts:
        cfg.env.with_agent_count(n)  # validate every count before any training
    rows = scaling_table(cfg, counts, algorithms, episodes=args.episodes, threads=args.threads)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# -- dump-config -------------------------------------------------------------
def cmd_dump_config(args) -> int:
    cfg = load_config(args.config, args.override, seed=args.seed)
    sys.stdout.write(cfg.to_toml())
    return EXIT_OK


# -- entry point -------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maac", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML experiment file")
        sp.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train agents and write metrics/checkpoints")
    common(t)
    t.add_argument("--out", help="output directory (default: run.output_dir)")
    t.add_argument("--threads", type=int, default=1, help="1 = deterministic single-threaded mode")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--export-csv", action="store_true", help="also write metrics.csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpoint's policies without learning")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seeds", type=int, nargs="+", default=[0])
    e.add_argument("--greedy", action="store_true")
    e.add_argument("--config", help="verify the checkpoint matches this configuration")
    e.add_argument("--override", action="append", default=[])
    e.add_argument("--dump-trajectory", help="write one episode as JSON lines")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("inspect-attention", help="dump attention weights of a trained critic")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--episodes", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--greedy", action="store_true")
    a.add_argument("--out", help="JSON-lines output (default stdout)")
    a.set_defaults(func=cmd_inspect_attention)

    s = sub.add_parser("scaling", help="compare algorithms across agent counts")
    common(s)
    s.add_argument("--counts", required=True, help="comma-separated total agent counts")
    s.add_argument("--algorithms", default="maddpg_sac,maac")
    s.add_argument("--episodes", type=int, default=None)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", help="CSV output (default stdout)")
    s.set_defaults(func=cmd_scaling)

    d = sub.add_parser("dump-config", help="print the fully resolved configuration")
    common(d, config_required=False)
    d.set_defaults(func=cmd_dump_config)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any failure as a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
