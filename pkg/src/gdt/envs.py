"""Small fully-enumerable MDPs for desk-scale experiments.

Each env exposes both a rollout API (reset/step) and an exact model
(states(), transitions()) so optimal and random-policy returns can be
computed by dynamic programming instead of sampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Outcome:
    prob: float
    state: int
    reward: float
    done: bool


class ToyEnv:
    """Finite-horizon MDP over integer internal states with vector observations."""

    spec: str
    n_actions: int
    obs_dim: int
    horizon: int

    def n_states(self) -> int:
        raise NotImplementedError

    def start_state(self) -> int:
        raise NotImplementedError

    def transitions(self, state: int, action: int) -> list[Outcome]:
        raise NotImplementedError

    def observe(self, state: int) -> np.ndarray:
        raise NotImplementedError

    @property
    def state_id(self) -> int:
        """Internal state of the live episode (for scripted data generation)."""
        return self._state

    # ------------------------------------------------------------- rollout
    def reset(self, seed: int | None = None) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._state = self.start_state()
        self._t = 0
        self._done = False
        return self.observe(self._state)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self._done:
            raise RuntimeError("step() after episode end")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range for {self.spec}")
        outs = self.transitions(self._state, action)
        if len(outs) == 1:
            pick = outs[0]
        else:
            r = self._rng.random()
            acc = 0.0
            pick = outs[-1]
            for o in outs:
                acc += o.prob
                if r < acc:
                    pick = o
                    break
        self._state = pick.state
        self._t += 1
        done = pick.done or self._t >= self.horizon
        self._done = done
        return self.observe(self._state), pick.reward, done


class ChainMDP(ToyEnv):
    """Line of `length` cells; action 1 attempts a step right and earns 1.

    With probability `noise` the env executes the opposite action. The reward
    follows the executed action, so the optimal return is length-1 when
    noise is 0 (all rights over the horizon of length-1 steps).
    """

    def __init__(self, length: int = 8, noise: float = 0.0):
        if length < 2:
            raise ValueError("chain needs length >= 2")
        self.length = length
        self.noise = float(noise)
        self.spec = f"chain:length={length},noise={self.noise:g}"
        self.n_actions = 2
        self.obs_dim = length
        self.horizon = length - 1

    def n_states(self) -> int:
        return self.length

    def start_state(self) -> int:
        return 0

    def transitions(self, state, action):
        outs = []
        for executed, p in ((action, 1.0 - self.noise), (1 - action, self.noise)):
            if p <= 0.0:
                continue
            nxt = min(state + 1, self.length - 1) if executed == 1 else max(state - 1, 0)
            outs.append(Outcome(p, nxt, 1.0 if executed == 1 else 0.0,
                                nxt == self.length - 1))
        return outs

    def observe(self, state):
        obs = np.zeros(self.length, dtype=np.float32)
        obs[state] = 1.0
        return obs


class GridWorld(ToyEnv):
    """size x size grid from (0,0) to the far corner; goal pays 1, steps -0.02."""

    def __init__(self, size: int = 3, goal: tuple[int, int] | None = None):
        if size < 2:
            raise ValueError("grid needs size >= 2")
        self.size = size
        self.goal = goal if goal is not None else (size - 1, size - 1)
        self.spec = f"grid:size={size}"
        self.n_actions = 4   # up, down, left, right
        self.obs_dim = size * size
        self.horizon = 4 * size

    def n_states(self) -> int:
        return self.size * self.size

    def start_state(self) -> int:
        return 0

    def transitions(self, state, action):
        x, y = state % self.size, state // self.size
        dx, dy = [(0, -1), (0, 1), (-1, 0), (1, 0)][action]
        nx = min(max(x + dx, 0), self.size - 1)
        ny = min(max(y + dy, 0), self.size - 1)
        nxt = ny * self.size + nx
        at_goal = (nx, ny) == self.goal
        return [Outcome(1.0, nxt, 1.0 if at_goal else -0.02, at_goal)]

    def observe(self, state):
        obs = np.zeros(self.size * self.size, dtype=np.float32)
        obs[state] = 1.0
        return obs


class KeyDoor(ToyEnv):
    """Corridor with a key at cell 0 and a door at the far end.

    Start in the middle; touching the key pays 0.5, reaching the door with the
    key pays 1.0 and ends the episode. Tests whether a policy can chain two
    subgoals. State encodes position plus a has-key flag.
    """

    def __init__(self, size: int = 5):
        if size < 3:
            raise ValueError("keydoor needs size >= 3")
        self.size = size
        self.spec = f"keydoor:size={size}"
        self.n_actions = 2   # left, right
        self.obs_dim = size + 1
        self.horizon = 2 * size

    def n_states(self) -> int:
        return self.size * 2

    def start_state(self) -> int:
        return self.size // 2  # has_key = 0

    def transitions(self, state, action):
        pos, has_key = state % self.size, state // self.size
        nxt_pos = min(pos + 1, self.size - 1) if action == 1 else max(pos - 1, 0)
        reward = 0.0
        key = has_key
        done = False
        if nxt_pos == 0 and not has_key:
            key = 1
            reward = 0.5
        if nxt_pos == self.size - 1 and key:
            reward = 1.0
            done = True
        return [Outcome(1.0, key * self.size + nxt_pos, reward, done)]

    def observe(self, state):
        pos, has_key = state % self.size, state // self.size
        obs = np.zeros(self.size + 1, dtype=np.float32)
        obs[pos] = 1.0
        obs[self.size] = float(has_key)
        return obs


def make_env(spec: str) -> ToyEnv:
    """Build an env from a spec string like "chain:length=8,noise=0.1"."""
    name, _, rest = spec.partition(":")
    kwargs = {}
    if rest:
        for pair in rest.split(","):
            k, _, v = pair.partition("=")
            kwargs[k.strip()] = float(v) if "." in v or "e" in v.lower() else int(v)
    makers = {"chain": ChainMDP, "grid": GridWorld, "keydoor": KeyDoor}
    if name not in makers:
        raise ValueError(f"unknown env {name!r}; known: {sorted(makers)}")
    if name == "chain" and "noise" in kwargs:
        kwargs["noise"] = float(kwargs["noise"])
    return makers[name](**kwargs)


# -------------------------------------------------------- exact evaluation

def q_values(env: ToyEnv) -> np.ndarray:
    """Q[t, s, a] for the finite-horizon MDP, computed by backward induction."""
    ns, na, h = env.n_states(), env.n_actions, env.horizon
    q = np.zeros((h, ns, na), dtype=np.float64)
    v_next = np.zeros(ns, dtype=np.float64)
    for t in range(h - 1, -1, -1):
        for s in range(ns):
            for a in range(na):
                total = 0.0
                for o in env.transitions(s, a):
                    total += o.prob * (o.reward + (0.0 if o.done else v_next[o.state]))
                q[t, s, a] = total
        v_next = q[t].max(axis=1)
    return q


def optimal_return(env: ToyEnv) -> float:
    """Best achievable expected return from the start state."""
    return float(q_values(env)[0, env.start_state()].max())


def random_policy_return(env: ToyEnv) -> float:
    """Exact expected return of the uniform-random policy."""
    ns, na, h = env.n_states(), env.n_actions, env.horizon
    v_next = np.zeros(ns, dtype=np.float64)
    for t in range(h - 1, -1, -1):
        v = np.zeros(ns, dtype=np.float64)
        for s in range(ns):
            for a in range(na):
                for o in env.transitions(s, a):
                    v[s] += (o.prob / na) * (o.reward + (0.0 if o.done else v_next[o.state]))
        v_next = v
    return float(v_next[env.start_state()])


class ScriptedPolicy:
    """epsilon-greedy against the exact Q table: optimal with prob 1-eps,
    uniform random otherwise. Ties break toward the lowest action id."""

    def __init__(self, env: ToyEnv, eps: float, rng: np.random.Generator):
        self.env = env
        self.eps = float(eps)
        self.rng = rng
        self.q = q_values(env)

    def act(self, state: int, t: int) -> int:
        if self.eps > 0.0 and self.rng.random() < self.eps:
            return int(self.rng.integers(self.env.n_actions))
        return int(np.argmax(self.q[min(t, self.env.horizon - 1), state]))
