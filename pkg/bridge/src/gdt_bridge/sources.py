"""Readers for offline RL corpora and the export pipeline around them.

Two source layouts are understood:

  d4rl   an hdf5 file with flat observations/actions/rewards/terminals
         arrays (plus optional timeouts), as distributed for the MuJoCo
         locomotion tasks; becomes vector states + continuous actions.
  atari  an npz with uint8 frame stacks and discrete action ids drawn
         from the minimal ALE action set; becomes image states +
         discrete actions.

Both are step streams, so episodes are recovered by cutting after each
done flag. The exporter never derives anything the training side owns:
no return-to-go, no observation statistics, just the raw per-step data
plus the published baseline scores in metadata.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .baselines import ATARI_ACTION_COUNTS, resolve_task
from .gdtraj import (ACTION_CONTINUOUS, ACTION_DISCRETE, STATE_IMAGE,
                     STATE_VECTOR, Episode, pack_dataset)

SOURCE_KINDS = ("d4rl", "atari")

FETCH_HINTS = {
    "d4rl": ("download it from "
             "http://rail.eecs.berkeley.edu/datasets/offline_rl/ and place "
             "it at {path}"),
    "atari": ("copy the DQN replay shard with "
              "`gsutil cp -r gs://atari-replay-datasets/dqn/<game> .`, "
              "repack observations/actions/rewards/terminals into an .npz, "
              "and place it at {path}"),
}


class SourceError(Exception):
    """Anything wrong with the source data or how it was asked for."""


@dataclass
class SourceSpec:
    """What to export: which corpus, which task, how much of it."""

    kind: str
    task: str
    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SOURCE_KINDS:
            raise SourceError(
                f"unknown source {self.kind!r}; expected one of "
                f"{', '.join(SOURCE_KINDS)}")
        if not 0.0 < self.fraction <= 1.0:
            raise SourceError(
                f"fraction must be in (0, 1], got {self.fraction}")


def default_input(spec: SourceSpec, data_dir: str) -> str:
    ext = "hdf5" if spec.kind == "d4rl" else "npz"
    return os.path.join(data_dir, f"{spec.task}.{ext}")


def segment_episodes(done: np.ndarray) -> list[tuple[int, int]]:
    """Cut a flat step stream into [start, stop) episode ranges.

    A true flag marks the last step of its episode. Steps after the
    final flag belong to an episode that never finished, so they are
    dropped rather than exported as a truncated trajectory.
    """
    ranges = []
    start = 0
    for end in np.flatnonzero(np.asarray(done, dtype=bool)):
        stop = int(end) + 1
        if stop > start:
            ranges.append((start, stop))
        start = stop
    return ranges


def _require(table, key, path):
    if key not in table:
        raise SourceError(f"{path}: missing required array {key!r}")
    return np.asarray(table[key])


def read_d4rl(path: str, task: str):
    """Load a locomotion corpus: flat float arrays, continuous actions."""
    import h5py

    with h5py.File(path, "r") as f:
        obs = _require(f, "observations", path).astype(np.float32)
        actions = _require(f, "actions", path).astype(np.float32)
        rewards = _require(f, "rewards", path).astype(np.float32)
        done = _require(f, "terminals", path).astype(bool)
        if "timeouts" in f:
            done = done | np.asarray(f["timeouts"]).astype(bool)

    if obs.ndim != 2:
        raise SourceError(
            f"{path}: observations must be (steps, dim), got {obs.shape}")
    if actions.ndim != 2:
        raise SourceError(
            f"{path}: actions must be (steps, dim), got {actions.shape}")
    n = len(obs)
    if not (len(actions) == len(rewards.reshape(-1)) == len(done) == n):
        raise SourceError(f"{path}: arrays disagree on step count")

    rewards = rewards.reshape(-1)
    episodes = [Episode(obs[a:b], actions[a:b], rewards[a:b])
                for a, b in segment_episodes(done)]
    state_shape = (obs.shape[1],)
    return episodes, STATE_VECTOR, state_shape, ACTION_CONTINUOUS, \
        actions.shape[1]


def read_atari(path: str, task: str):
    """Load a replay corpus: uint8 frames, minimal-action-set ids."""
    game, _, _ = resolve_task("atari", task)
    n_actions = ATARI_ACTION_COUNTS[game]

    with np.load(path) as z:
        obs = _require(z, "observations", path)
        actions = _require(z, "actions", path)
        rewards = _require(z, "rewards", path).astype(np.float32)
        done = _require(z, "terminals", path).astype(bool)

    if obs.dtype != np.uint8:
        raise SourceError(
            f"{path}: observations must be uint8 frames, got {obs.dtype}")
    if obs.ndim == 3:
        obs = obs[..., None]  # single-channel stacks come without an axis
    if obs.ndim != 4:
        raise SourceError(
            f"{path}: observations must be (steps, h, w, c), got {obs.shape}")
    actions = actions.reshape(-1).astype(np.int64)
    if actions.size and (actions.min() < 0 or actions.max() >= n_actions):
        bad = int(actions.min() if actions.min() < 0 else actions.max())
        raise SourceError(
            f"{path}: action id {bad} outside the {n_actions}-action "
            f"minimal set for {game}")
    n = len(obs)
    if not (len(actions) == len(rewards.reshape(-1)) == len(done) == n):
        raise SourceError(f"{path}: arrays disagree on step count")

    rewards = rewards.reshape(-1)
    episodes = [Episode(obs[a:b], actions[a:b].astype(np.uint32),
                        rewards[a:b])
                for a, b in segment_episodes(done)]
    state_shape = tuple(int(s) for s in obs.shape[1:])
    return episodes, STATE_IMAGE, state_shape, ACTION_DISCRETE, n_actions


def sample_episodes(episodes: list[Episode], fraction: float,
                    seed: int) -> list[Episode]:
    """Keep a uniform, order-preserving subsample of whole episodes.

    fraction 1.0 keeps everything and never consults the seed, so a
    full export is reproducible without pinning one.
    """
    if fraction >= 1.0:
        return list(episodes)
    n = len(episodes)
    count = max(1, int(round(fraction * n + 1e-9)))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=count, replace=False))
    return [episodes[int(i)] for i in keep]


def export(spec: SourceSpec, input_path: str, out_path: str) -> dict:
    """Read, subsample, and pack one corpus; returns a summary dict.

    The packed bytes are built fully in memory before anything touches
    the output path, and the manifest is written after the data file,
    so an export that dies partway leaves no half-written dataset.
    """
    try:
        game, random_score, expert_score = resolve_task(spec.kind, spec.task)
    except KeyError as e:
        raise SourceError(str(e)) from None

    if not os.path.exists(input_path):
        hint = FETCH_HINTS[spec.kind].format(path=input_path)
        raise SourceError(f"source file {input_path} not found; {hint}")

    reader = read_d4rl if spec.kind == "d4rl" else read_atari
    episodes, state_kind, state_shape, action_kind, action_dim = \
        reader(input_path, spec.task)
    if not episodes:
        raise SourceError(
            f"{input_path}: no complete episodes (is every done flag unset?)")

    kept = sample_episodes(episodes, spec.fraction, spec.seed)
    metadata = {
        "env": spec.task,
        "gen.fraction": f"{spec.fraction:g}",
        "gen.seed": str(spec.seed),
        "gen.source": spec.kind,
        "score.expert": expert_score,
        "score.random": random_score,
    }
    blob = pack_dataset(kept, state_kind, state_shape, action_kind,
                        action_dim, metadata)

    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(out_path, "wb") as f:
        f.write(blob)

    summary = {
        "source": spec.kind,
        "task": spec.task,
        "game": game,
        "input": input_path,
        "out": out_path,
        "episodes_in_source": len(episodes),
        "episodes_exported": len(kept),
        "steps_exported": int(sum(len(ep) for ep in kept)),
        "fraction": spec.fraction,
        "seed": spec.seed,
        "bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(out_path + ".manifest.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
