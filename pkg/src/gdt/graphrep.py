"""Causal token graphs over (return, state, action) sequences.

A window of K steps becomes 3K tokens (2K when rewards are dropped). The
adjacency is stored as a relation-category matrix: entry [i, j] describes
what token j is to token i: itself, an incoming edge source, or unrelated.
Attention layers read this matrix; edges always point forward in token order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NO_EDGE, SELF, EDGE_FWD = 0, 1, 2

TOKENS_PER_STEP = {"rtg": 3, "step": 3, "none": 2}
CONNECTION_MODES = ("causal", "full", "random", "none")
REWARD_SETTINGS = ("rtg", "step", "none")


class GraphError(ValueError):
    pass


@dataclass
class TokenGraph:
    K: int
    reward_setting: str
    mode: str
    node_kinds: list[str]      # per token: "rtg" | "reward" | "state" | "action"
    adjacency: np.ndarray      # (n, n) int8 over {NO_EDGE, SELF, EDGE_FWD}

    @property
    def n_tokens(self) -> int:
        return len(self.node_kinds)

    def edges(self) -> list[tuple[int, int]]:
        """Directed (source, target) pairs, target-major order."""
        out = []
        n = self.n_tokens
        for v in range(n):
            for u in range(n):
                if self.adjacency[v, u] == EDGE_FWD:
                    out.append((u, v))
        return out


def _check_setting(reward_setting: str) -> None:
    if reward_setting not in REWARD_SETTINGS:
        raise GraphError(f"unknown reward setting {reward_setting!r}; "
                         f"known: {REWARD_SETTINGS}")


def token_kinds(K: int, reward_setting: str) -> list[str]:
    _check_setting(reward_setting)
    if reward_setting == "none":
        per = ["state", "action"]
    else:
        per = ["rtg" if reward_setting == "rtg" else "reward", "state", "action"]
    return per * K


def token_labels(K: int, reward_setting: str) -> list[str]:
    """Display names, step-subscripted. For step rewards the reward token at
    step t carries the reward observed entering t (zero at t=0)."""
    short = {"rtg": "rtg", "reward": "rew", "state": "st", "action": "act"}
    kinds = token_kinds(K, reward_setting)
    per = TOKENS_PER_STEP[reward_setting]
    return [f"{short[k]}_{i // per}" for i, k in enumerate(kinds)]


def causal_edges(K: int, reward_setting: str) -> list[tuple[int, int]]:
    """The hand-derivable causal edge set, as (source, target) token indices."""
    _check_setting(reward_setting)
    if K < 1:
        raise GraphError("K must be >= 1")
    e: list[tuple[int, int]] = []
    if reward_setting == "rtg":
        for t in range(K):
            b = 3 * t
            e.append((b, b + 2))          # return target informs the action
            e.append((b + 1, b + 2))      # current state informs the action
            if t > 0:
                p = 3 * (t - 1)
                e.append((p + 1, b + 1))  # state dynamics
                e.append((p + 2, b + 1))
                e.append((p, b))          # return bookkeeping
                e.append((p + 1, b))
                e.append((p + 2, b))
    elif reward_setting == "step":
        for t in range(K):
            b = 3 * t
            e.append((b + 1, b + 2))
            if t > 0:
                p = 3 * (t - 1)
                e.append((p + 1, b + 1))
                e.append((p + 2, b + 1))
                e.append((p + 1, b))      # previous step produced this reward
                e.append((p + 2, b))
                e.append((b, b + 2))      # observed reward informs the action
    else:
        for t in range(K):
            b = 2 * t
            e.append((b, b + 1))
            if t > 0:
                p = 2 * (t - 1)
                e.append((p, b))
                e.append((p + 1, b))
    return e


def causal_edge_count(K: int, reward_setting: str) -> int:
    _check_setting(reward_setting)
    if reward_setting == "rtg":
        return 2 + 7 * (K - 1)
    if reward_setting == "step":
        return K + 5 * (K - 1)
    return 3 * K - 2


def _adjacency_from_edges(n: int, edges: list[tuple[int, int]]) -> np.ndarray:
    adj = np.full((n, n), NO_EDGE, dtype=np.int8)
    np.fill_diagonal(adj, SELF)
    for u, v in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"edge ({u}, {v}) outside token range {n}")
        if u >= v:
            raise GraphError(f"edge ({u}, {v}) does not point forward in time")
        adj[v, u] = EDGE_FWD
    return adj


def build_causal_adjacency(K: int, reward_setting: str) -> np.ndarray:
    n = TOKENS_PER_STEP[reward_setting] * K
    return _adjacency_from_edges(n, causal_edges(K, reward_setting))


def causal_density(K: int, reward_setting: str) -> float:
    n = TOKENS_PER_STEP[reward_setting] * K
    pairs = n * (n - 1) // 2
    return causal_edge_count(K, reward_setting) / pairs if pairs else 0.0


def build_adjacency(K: int, reward_setting: str, mode: str,
                    p: float | None = None, seed: int = 0) -> TokenGraph:
    """Adjacency for any connection mode.

    random draws each forward pair independently; its default density matches
    the causal graph for the same K so comparisons are edge-budget-fair.
    """
    _check_setting(reward_setting)
    if mode not in CONNECTION_MODES:
        raise GraphError(f"unknown connection mode {mode!r}; known: {CONNECTION_MODES}")
    if K < 1:
        raise GraphError("K must be >= 1")
    n = TOKENS_PER_STEP[reward_setting] * K
    if mode == "causal":
        edges = causal_edges(K, reward_setting)
    elif mode == "full":
        edges = [(u, v) for v in range(n) for u in range(v)]
    elif mode == "none":
        edges = []
    else:
        density = causal_density(K, reward_setting) if p is None else float(p)
        if not 0.0 <= density <= 1.0:
            raise GraphError(f"random edge probability {density} outside [0, 1]")
        rng = np.random.default_rng(seed)
        edges = [(u, v) for v in range(n) for u in range(v)
                 if rng.random() < density]
    return TokenGraph(K, reward_setting, mode, token_kinds(K, reward_setting),
                      _adjacency_from_edges(n, edges))


def relation_index(adjacency: np.ndarray, i: int, j: int) -> int:
    """Category of token j as seen from token i."""
    n = adjacency.shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise GraphError(f"token pair ({i}, {j}) outside graph with {n} tokens")
    return int(adjacency[i, j])


def apply_padding(adjacency: np.ndarray, token_mask: np.ndarray) -> np.ndarray:
    """Padded tokens relate to nothing, themselves included."""
    out = adjacency.copy()
    dead = ~np.asarray(token_mask, dtype=bool)
    out[dead, :] = NO_EDGE
    out[:, dead] = NO_EDGE
    return out


def dump_graph(graph: TokenGraph) -> str:
    """Stable text rendering used by the CLI and golden-file tests."""
    labels = token_labels(graph.K, graph.reward_setting)
    lines = [f"graph: K={graph.K} reward={graph.reward_setting} mode={graph.mode} "
             f"tokens={graph.n_tokens}"]
    edges = graph.edges()
    lines.append(f"edges ({len(edges)}):")
    for u, v in sorted(edges, key=lambda e: (e[1], e[0])):
        lines.append(f"  {labels[u]} -> {labels[v]}")
    width = max(len(x) for x in labels)
    sym = {NO_EDGE: ".", SELF: "S", EDGE_FWD: "E"}
    lines.append("adjacency (row i: what each column j is to token i):")
    header = " " * (width + 1) + " ".join(x.rjust(width) for x in labels)
    lines.append(header)
    for i, row in enumerate(graph.adjacency):
        cells = " ".join(sym[int(c)].rjust(width) for c in row)
        lines.append(f"{labels[i].rjust(width)} {cells}")
    return "\n".join(lines) + "\n"
