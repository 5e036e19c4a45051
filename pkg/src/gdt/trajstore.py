"""Trajectory datasets: binary storage, return-to-go, window sampling, and
score normalization.

File layout (magic "GDTRAJ01", all integers little-endian):

    u8 state kind (0 vector, 1 image) + u8 ndim + ndim * u32 state shape
    u8 action kind (0 discrete, 1 continuous) + u32 action dim/cardinality
    u32 episode count
    u32 metadata pair count, then u32-length-prefixed UTF-8 key/value pairs
    per episode: u32 T, states (f32 for vectors, u8 for images), actions
    (u32 ids or f32 rows), rewards (f32)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import envs as envs_mod

MAGIC = b"GDTRAJ01"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray   # (T, *state_shape)
    actions: np.ndarray  # (T,) uint32 or (T, A) float32
    rewards: np.ndarray  # (T,) float32

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def ret(self) -> float:
        return float(self.rewards.astype(np.float64).sum())


@dataclass
class TrajectoryDataset:
    state_kind: str                 # "vector" | "image"
    state_shape: tuple[int, ...]
    action_kind: str                # "discrete" | "continuous"
    action_dim: int                 # cardinality for discrete, width otherwise
    episodes: list[Trajectory]
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def total_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    @property
    def max_length(self) -> int:
        return max(len(ep) for ep in self.episodes)


def compute_rtg(rewards: np.ndarray) -> np.ndarray:
    """Suffix sums over the whole episode, accumulated in float64."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + acc
        out[t] = acc
    return out


# ----------------------------------------------------------------- file io

def save_dataset(ds: TrajectoryDataset, path: str) -> None:
    if ds.state_kind not in ("vector", "image"):
        raise DatasetFormatError(f"bad state kind {ds.state_kind!r}")
    if ds.action_kind not in ("discrete", "continuous"):
        raise DatasetFormatError(f"bad action kind {ds.action_kind!r}")
    out: list[bytes] = [MAGIC]
    out.append(struct.pack("<BB", 0 if ds.state_kind == "vector" else 1,
                           len(ds.state_shape)))
    out.append(struct.pack(f"<{len(ds.state_shape)}I", *ds.state_shape))
    out.append(struct.pack("<BI", 0 if ds.action_kind == "discrete" else 1,
                           ds.action_dim))
    out.append(struct.pack("<I", len(ds.episodes)))
    out.append(struct.pack("<I", len(ds.metadata)))
    for k, v in ds.metadata.items():
        ke, ve = k.encode("utf-8"), v.encode("utf-8")
        out.append(struct.pack("<I", len(ke)))
        out.append(ke)
        out.append(struct.pack("<I", len(ve)))
        out.append(ve)
    sdtype = "<f4" if ds.state_kind == "vector" else np.uint8
    for ep in ds.episodes:
        t = len(ep)
        if t == 0:
            raise DatasetFormatError("cannot save a zero-length episode")
        out.append(struct.pack("<I", t))
        out.append(np.ascontiguousarray(ep.states, dtype=sdtype).tobytes())
        if ds.action_kind == "discrete":
            out.append(np.ascontiguousarray(ep.actions, dtype="<u4").tobytes())
        else:
            out.append(np.ascontiguousarray(ep.actions, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(ep.rewards, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(
                f"truncated dataset: wanted {n} bytes for {what} at byte {self.pos}, "
                f"file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_dataset(path: str) -> TrajectoryDataset:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) == 0:
        raise DatasetFormatError(f"empty file: {path}")
    r = _Reader(buf)
    if r.take(8, "magic") != MAGIC:
        raise DatasetFormatError(f"bad magic at byte 0 in {path}")
    skind, sndim = r.unpack("<BB", "state header")
    if skind not in (0, 1):
        raise DatasetFormatError(f"unknown state kind {skind} at byte 8")
    state_shape = r.unpack(f"<{sndim}I", "state shape")
    akind, adim = r.unpack("<BI", "action header")
    if akind not in (0, 1):
        raise DatasetFormatError(f"unknown action kind {akind} at byte {r.pos - 5}")
    (n_episodes,) = r.unpack("<I", "episode count")
    (n_meta,) = r.unpack("<I", "metadata count")
    metadata = {}
    for _ in range(n_meta):
        (klen,) = r.unpack("<I", "metadata key length")
        key = r.take(klen, "metadata key").decode("utf-8")
        (vlen,) = r.unpack("<I", "metadata value length")
        metadata[key] = r.take(vlen, "metadata value").decode("utf-8")
    state_kind = "vector" if skind == 0 else "image"
    action_kind = "discrete" if akind == 0 else "continuous"
    state_elems = int(np.prod(state_shape)) if state_shape else 1
    sdtype, ssize = (("<f4", 4) if skind == 0 else (np.uint8, 1))
    episodes = []
    for e in range(n_episodes):
        (t,) = r.unpack("<I", f"episode {e} length")
        if t == 0:
            raise DatasetFormatError(f"episode {e} has zero length at byte {r.pos - 4}")
        raw = r.take(t * state_elems * ssize, f"episode {e} states")
        states = np.frombuffer(raw, dtype=sdtype).reshape((t,) + tuple(state_shape)).copy()
        if akind == 0:
            raw = r.take(t * 4, f"episode {e} actions")
            actions = np.frombuffer(raw, dtype="<u4").copy()
            if actions.size and actions.max() >= adim:
                raise DatasetFormatError(
                    f"episode {e}: action id {actions.max()} outside cardinality {adim}")
        else:
            raw = r.take(t * adim * 4, f"episode {e} actions")
            actions = np.frombuffer(raw, dtype="<f4").reshape(t, adim).copy()
        raw = r.take(t * 4, f"episode {e} rewards")
        rewards = np.frombuffer(raw, dtype="<f4").copy()
        episodes.append(Trajectory(states, actions, rewards))
    if r.pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - r.pos} trailing bytes at byte {r.pos}")
    if not episodes:
        raise DatasetFormatError(f"no episodes in {path}")
    return TrajectoryDataset(state_kind, tuple(int(d) for d in state_shape),
                             action_kind, int(adim), episodes, metadata)


def validate_dataset(ds: TrajectoryDataset) -> list[str]:
    """Semantic checks beyond what load_dataset enforces. Returns warnings."""
    warnings = []
    for i, ep in enumerate(ds.episodes):
        if not np.all(np.isfinite(ep.rewards)):
            warnings.append(f"episode {i}: non-finite rewards")
        if ds.state_kind == "vector" and not np.all(np.isfinite(ep.states)):
            warnings.append(f"episode {i}: non-finite states")
        if ep.states.shape[1:] != tuple(ds.state_shape):
            warnings.append(f"episode {i}: state shape {ep.states.shape[1:]} "
                            f"!= header {ds.state_shape}")
        if ds.action_kind == "continuous" and not np.all(np.isfinite(ep.actions)):
            warnings.append(f"episode {i}: non-finite actions")
    return warnings


# ----------------------------------------------------------------- windows

@dataclass
class Window:
    """K consecutive steps of one episode, left-padded to fixed size.

    rtg[i] is the return-to-go at the step's position in the full episode.
    prev_rewards[i] is the reward observed entering that step (0 at t=0),
    which is what reward-token models consume.
    """
    rtg: np.ndarray           # (K,) float64
    states: np.ndarray        # (K, *state_shape)
    actions: np.ndarray       # (K,) or (K, A)
    prev_rewards: np.ndarray  # (K,) float32
    timesteps: np.ndarray     # (K,) int64
    mask: np.ndarray          # (K,) bool; True where the slot holds a real step
    episode_index: int = -1


def window_at(ds: TrajectoryDataset, rtgs: list[np.ndarray], ep_idx: int,
              end: int, K: int) -> Window:
    ep = ds.episodes[ep_idx]
    start = end - K + 1
    lo = max(0, start)
    pad = lo - start
    sl = slice(lo, end + 1)
    state_shape = tuple(ds.state_shape)
    states = np.zeros((K,) + state_shape, dtype=ep.states.dtype)
    if ds.action_kind == "discrete":
        actions = np.zeros(K, dtype=np.uint32)
    else:
        actions = np.zeros((K, ds.action_dim), dtype=np.float32)
    rtg = np.zeros(K, dtype=np.float64)
    prev = np.zeros(K, dtype=np.float32)
    tsteps = np.zeros(K, dtype=np.int64)
    mask = np.zeros(K, dtype=bool)
    states[pad:] = ep.states[sl]
    actions[pad:] = ep.actions[sl]
    rtg[pad:] = rtgs[ep_idx][sl]
    tsteps[pad:] = np.arange(lo, end + 1)
    mask[pad:] = True
    if lo == 0:
        prev[pad + 1:] = ep.rewards[0:end]
    else:
        prev[pad:] = ep.rewards[lo - 1:end]
    return Window(rtg, states, actions, prev, tsteps, mask, ep_idx)


def sample_windows(ds: TrajectoryDataset, K: int, count: int,
                   rng: np.random.Generator) -> list[Window]:
    """Uniform over every valid window end position across all episodes."""
    if K < 1:
        raise ValueError("window length must be >= 1")
    lengths = [len(ep) for ep in ds.episodes]
    total = sum(lengths)
    bounds = np.cumsum(lengths)
    rtgs = [compute_rtg(ep.rewards) for ep in ds.episodes]
    picks = rng.integers(0, total, size=count)
    out = []
    for flat in picks:
        ep_idx = int(np.searchsorted(bounds, flat, side="right"))
        end = int(flat - (bounds[ep_idx - 1] if ep_idx else 0))
        out.append(window_at(ds, rtgs, ep_idx, end, K))
    return out


# ----------------------------------------------------------- normalization

# Baseline (random, expert) scores for the published benchmark tasks.
BASELINE_SCORES: dict[str, tuple[float, float]] = {
    "breakout": (2.0, 30.0),
    "qbert": (164.0, 13455.0),
    "pong": (-21.0, 15.0),
    "seaquest": (68.0, 42055.0),
    "halfcheetah": (-280.2, 12135.0),
    "hopper": (-20.3, 3234.3),
    "walker": (1.6, 4592.3),
}


@dataclass
class NormalizationTable:
    rows: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def builtin(cls) -> "NormalizationTable":
        return cls(dict(BASELINE_SCORES))

    def add(self, task: str, random_score: float, expert_score: float) -> None:
        self.rows[task.lower()] = (float(random_score), float(expert_score))

    def normalize(self, task: str, raw: float) -> float:
        key = task.lower()
        if key not in self.rows:
            raise LookupError(f"no baseline scores for task {task!r}; "
                              f"known: {sorted(self.rows)}")
        lo, hi = self.rows[key]
        return 100.0 * (raw - lo) / (hi - lo)


def normalize_score(task: str, raw: float,
                    table: NormalizationTable | None = None) -> float:
    return (table or NormalizationTable.builtin()).normalize(task, raw)


# -------------------------------------------------------------- statistics

@dataclass
class Standardizer:
    """Per-dimension shift/scale for vector observations; identity for images
    (the image path scales pixels itself)."""
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def apply(self, states: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return states
        shape = states.shape
        flat = states.astype(np.float64).reshape(-1, self.mean.size)
        out = (flat - self.mean) / self.std
        return out.astype(np.float32).reshape(shape)

    @classmethod
    def from_dataset(cls, ds: TrajectoryDataset) -> "Standardizer":
        if ds.state_kind != "vector":
            return cls()
        if "state.mean" in ds.metadata and "state.std" in ds.metadata:
            return cls(parse_vec(ds.metadata["state.mean"]),
                       parse_vec(ds.metadata["state.std"]))
        mean, std = state_stats(ds)
        return cls(mean, std)

    @classmethod
    def from_metadata(cls, metadata: dict[str, str]) -> "Standardizer":
        if "state.mean" in metadata and "state.std" in metadata:
            return cls(parse_vec(metadata["state.mean"]),
                       parse_vec(metadata["state.std"]))
        return cls()

    def to_metadata(self) -> dict[str, str]:
        if self.mean is None:
            return {}
        return {"state.mean": _fmt_vec(self.mean), "state.std": _fmt_vec(self.std)}


def state_stats(ds: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean/std over all steps (vector states), in float64."""
    flat = np.concatenate([ep.states.reshape(len(ep), -1) for ep in ds.episodes])
    mean = flat.astype(np.float64).mean(axis=0)
    std = flat.astype(np.float64).std(axis=0)
    return mean, np.maximum(std, 1e-6)


def action_stats(ds: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray]:
    flat = np.concatenate([np.asarray(ep.actions, dtype=np.float64).reshape(len(ep), -1)
                           for ep in ds.episodes])
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), 1e-6)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_vec(v: np.ndarray) -> str:
    return ",".join(_fmt(x) for x in v)


def parse_vec(s: str) -> np.ndarray:
    return np.array([float(x) for x in s.split(",")], dtype=np.float64)


# ---------------------------------------------------------------- synthetic

def _roll_episodes(env, eps: float, episodes: int,
                   rng: np.random.Generator) -> list[Trajectory]:
    policy = envs_mod.ScriptedPolicy(env, eps, rng)
    out = []
    for _ in range(episodes):
        obs = env.reset(seed=int(rng.integers(2 ** 31)))
        states, actions, rewards = [obs], [], []
        t = 0
        while True:
            a = policy.act(env.state_id, t)
            obs, r, done = env.step(a)
            actions.append(a)
            rewards.append(r)
            t += 1
            if done:
                break
            states.append(obs)
        out.append(Trajectory(
            np.asarray(states, dtype=np.float32),
            np.asarray(actions, dtype=np.uint32),
            np.asarray(rewards, dtype=np.float32)))
    return out


def _finish_dataset(env, eps_list: list[Trajectory], metadata: dict[str, str],
                    path: str) -> TrajectoryDataset:
    metadata = dict(metadata)
    metadata.update({
        "env": env.spec,
        "score.random": _fmt(envs_mod.random_policy_return(env)),
        "score.expert": _fmt(envs_mod.optimal_return(env)),
    })
    ds = TrajectoryDataset("vector", (env.obs_dim,), "discrete", env.n_actions,
                           eps_list, metadata)
    if eps_list:
        mean, std = state_stats(ds)
        metadata["state.mean"] = _fmt_vec(mean)
        metadata["state.std"] = _fmt_vec(std)
    save_dataset(ds, path)
    return ds


def generate_synthetic(env_spec: str, eps: float, episodes: int, seed: int,
                       path: str) -> TrajectoryDataset:
    """Roll a scripted eps-optimal policy and store the episodes.

    Metadata records the env spec, generator settings, exact DP baselines for
    normalization, and dataset state statistics. episodes=0 still writes a
    well-formed file; loading such a file is rejected with "no episodes".
    """
    env = envs_mod.make_env(env_spec)
    rng = np.random.default_rng(seed)
    eps_list = _roll_episodes(env, eps, episodes, rng)
    return _finish_dataset(env, eps_list, {
        "gen.eps": _fmt(eps),
        "gen.episodes": str(episodes),
        "gen.seed": str(seed),
    }, path)


def generate_mixture(env_spec: str, eps_levels: list[float], episodes_per: int,
                     seed: int, path: str) -> TrajectoryDataset:
    """A dataset drawn from several eps-greedy generators in equal parts.

    Mixing expert with noisy behavior gives the return-conditioned learner
    something to actually condition on: identical contexts continued at
    different quality levels.
    """
    env = envs_mod.make_env(env_spec)
    rng = np.random.default_rng(seed)
    eps_list = []
    for eps in eps_levels:
        eps_list.extend(_roll_episodes(env, eps, episodes_per, rng))
    return _finish_dataset(env, eps_list, {
        "gen.eps": ",".join(_fmt(e) for e in eps_levels),
        "gen.episodes": str(len(eps_list)),
        "gen.seed": str(seed),
    }, path)


def dataset_summary(ds: TrajectoryDataset) -> dict[str, float | int | str]:
    returns = [ep.ret for ep in ds.episodes]
    lengths = [len(ep) for ep in ds.episodes]
    return {
        "episodes": len(ds.episodes),
        "steps": ds.total_steps,
        "state_kind": ds.state_kind,
        "state_shape": "x".join(str(d) for d in ds.state_shape),
        "action_kind": ds.action_kind,
        "action_dim": ds.action_dim,
        "return_mean": float(np.mean(returns)),
        "return_min": float(np.min(returns)),
        "return_max": float(np.max(returns)),
        "length_mean": float(np.mean(lengths)),
        "length_max": int(np.max(lengths)),
    }
