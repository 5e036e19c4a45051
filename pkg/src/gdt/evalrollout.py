"""Closed-loop evaluation: roll a trained model in an environment.

The model sees a sliding window of the most recent K steps, left-padded at
episode start exactly like training windows. The action slot for the step
being decided is a placeholder; the attention structure guarantees the
prediction for a step never reads that slot, so the placeholder value is
irrelevant.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import envs as envs_mod
from . import trajstore as ts
from .graphformer import ConfigError, GDTModel

# Published return-to-go conditioning targets, by task name.
RTG_TARGETS: dict[str, float] = {
    "breakout": 120.0,
    "qbert": 5000.0,
    "pong": 20.0,
    "seaquest": 1450.0,
    "halfcheetah": 6000.0,
    "hopper": 3600.0,
    "walker": 5000.0,
}


def default_rtg_target(task: str) -> float:
    if task not in RTG_TARGETS:
        raise LookupError(f"no conditioning target for task {task!r}")
    return RTG_TARGETS[task]


@dataclass
class RolloutReport:
    env_spec: str
    returns: list[float] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return len(self.returns)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std_return(self) -> float:
        return float(np.std(self.returns))

    @property
    def mean_steps(self) -> float:
        return float(np.mean(self.steps))


def _window_batch(model: GDTModel, std: ts.Standardizer, states, actions,
                  rtgs, prevs, tsteps):
    cfg = model.cfg
    K = cfg.K
    n = min(len(states), K)
    pad = K - n
    shape = tuple(cfg.state_shape)
    if cfg.state_kind == "vector":
        st = np.zeros((1, K) + shape, dtype=np.float32)
    else:
        st = np.zeros((1, K) + shape, dtype=np.uint8)
    st[0, pad:] = np.asarray(states[-n:])
    if cfg.action_kind == "discrete":
        act = np.zeros((1, K), dtype=np.int64)
    else:
        act = np.zeros((1, K, cfg.action_dim), dtype=np.float32)
    act[0, pad:] = np.asarray(actions[-n:])
    rtg = np.zeros((1, K), dtype=np.float32)
    rtg[0, pad:] = np.asarray(rtgs[-n:], dtype=np.float32)
    prev = np.zeros((1, K), dtype=np.float32)
    prev[0, pad:] = np.asarray(prevs[-n:], dtype=np.float32)
    tstep = np.zeros((1, K), dtype=np.int64)
    tstep[0, pad:] = np.minimum(np.asarray(tsteps[-n:]), cfg.max_timestep)
    mask = np.zeros((1, K), dtype=bool)
    mask[0, pad:] = True
    return {"states": std.apply(st), "actions": act, "rtg": rtg,
            "prev_rewards": prev, "timesteps": tstep, "mask": mask}


def _pick_action(model: GDTModel, pred_row: np.ndarray, argmax: bool,
                 rng: np.random.Generator):
    if model.cfg.action_kind == "continuous":
        return pred_row.astype(np.float32)
    logits = pred_row.astype(np.float64)
    if argmax:
        return int(np.argmax(logits))
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def rollout_episode(model: GDTModel, env: envs_mod.ToyEnv, std: ts.Standardizer,
                    rtg_target: float, rng: np.random.Generator,
                    argmax: bool = True, episode_seed: int | None = None,
                    rtg_floor: float | None = None,
                    max_steps: int | None = None) -> tuple[float, int]:
    """One closed-loop episode; returns (raw return, steps taken)."""
    obs = env.reset(seed=episode_seed)
    states = [obs]
    actions: list = []
    rtgs = [float(rtg_target)]
    prevs = [0.0]
    tsteps = [0]
    total = 0.0
    t = 0
    cap = max_steps if max_steps is not None else env.horizon + 1
    placeholder = (0 if model.cfg.action_kind == "discrete"
                   else np.zeros(model.cfg.action_dim, dtype=np.float32))
    while t < cap:
        batch = _window_batch(model, std, states, actions + [placeholder],
                              rtgs, prevs, tsteps)
        out = model.forward(batch, train=False)
        pred_row = out.pred.data[0, -1]
        action = _pick_action(model, pred_row, argmax, rng)
        obs, reward, done = env.step(action)
        actions.append(action)
        total += reward
        t += 1
        if done:
            break
        nxt = rtg_target - total
        if rtg_floor is not None:
            nxt = max(rtg_floor, nxt)
        states.append(obs)
        rtgs.append(float(nxt))
        prevs.append(float(reward))
        tsteps.append(t)
    return total, t


def evaluate(model: GDTModel, env_spec: str, std: ts.Standardizer,
             rtg_target: float, episodes: int, seed: int,
             argmax: bool = True, rtg_floor: float | None = None) -> RolloutReport:
    env = envs_mod.make_env(env_spec)
    rng = np.random.default_rng(seed)
    report = RolloutReport(env_spec=env_spec)
    for i in range(episodes):
        ret, steps = rollout_episode(
            model, env, std, rtg_target, rng, argmax=argmax,
            episode_seed=int(rng.integers(2 ** 31)), rtg_floor=rtg_floor)
        report.returns.append(ret)
        report.steps.append(steps)
    return report


def baselines_from_metadata(meta: dict[str, str]) -> tuple[float, float] | None:
    if "score.random" in meta and "score.expert" in meta:
        return float(meta["score.random"]), float(meta["score.expert"])
    return None


def eval_report(model: GDTModel, env_spec: str, std: ts.Standardizer,
                rtg_target: float, seeds: list[int], episodes: int,
                out_csv: str | None = None,
                baselines: tuple[float, float] | None = None,
                argmax: bool = True) -> list[dict]:
    """One row per seed: env, seed, raw/normalized return, episodes, steps."""
    rows = []
    for seed in seeds:
        rep = evaluate(model, env_spec, std, rtg_target, episodes, seed,
                       argmax=argmax)
        raw = rep.mean_return
        if baselines is not None:
            rnd, expert = baselines
            normalized = 100.0 * (raw - rnd) / (expert - rnd)
        else:
            normalized = None
        rows.append({"env": env_spec, "seed": seed, "raw_return": raw,
                     "normalized": normalized, "episodes": episodes,
                     "steps": rep.mean_steps})
    if out_csv:
        os.makedirs(os.path.dirname(out_csv) or ".", exist_ok=True)
        with open(out_csv, "w", newline="") as f:
            write_report_csv(rows, f)
    return rows


def write_report_csv(rows: list[dict], stream) -> None:
    """Env specs contain commas, so the report needs real CSV quoting."""
    w = csv.writer(stream)
    w.writerow(["env", "seed", "raw_return", "normalized", "episodes", "steps"])
    for r in rows:
        norm = "" if r["normalized"] is None else f"{r['normalized']:.6g}"
        w.writerow([r["env"], r["seed"], f"{r['raw_return']:.6g}", norm,
                    r["episodes"], f"{r['steps']:.6g}"])


def compare_reward_settings(checkpoints: dict[str, str], env_spec: str,
                            rtg_target: float, episodes: int,
                            seed: int) -> dict[str, float]:
    """Mean return per reward setting, loading one checkpoint per setting.

    Every setting in the mapping must exist on disk; a missing file is
    reported with the setting's name so sweep scripts fail loudly.
    """
    from .trainer import load_model_checkpoint
    results = {}
    for setting, path in checkpoints.items():
        if not os.path.exists(path):
            raise ConfigError(f"missing checkpoint for reward setting "
                              f"{setting!r}: {path}")
        model, ck = load_model_checkpoint(path)
        std = ts.Standardizer.from_metadata(ck.metadata)
        rep = evaluate(model, env_spec, std, rtg_target, episodes, seed)
        results[setting] = rep.mean_return
    return results
