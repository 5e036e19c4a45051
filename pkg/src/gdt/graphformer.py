"""Relation-aware causal attention over token graphs.

Attention scores follow score(i, j) = (W_q(x_i + r_fwd)) . (W_k(x_j + r_bwd))
where the relation vectors are looked up by the category of the (i, j) pair
(itself / incoming edge / unrelated) from a small learned table shared by all
layers and heads. The batched path expands that product into four terms
(content-content, content-relation twice, relation-relation) so the per-pair
work stays O(categories) instead of materializing per-pair query vectors; the
test suite pins it to a straight-line float64 evaluation of the formula.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import graphrep
from . import ndcore as nd
from . import seqformer as sf
from .ndcore import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    state_kind: str = "vector"          # "vector" | "image"
    state_shape: tuple[int, ...] = (4,)
    action_kind: str = "discrete"       # "discrete" | "continuous"
    action_dim: int = 2                 # cardinality / action width
    d: int = 128
    heads: int = 8
    layers: int = 6
    K: int = 30
    max_timestep: int = 1000
    reward_setting: str = "rtg"         # "rtg" | "step" | "none"
    connection: str = "causal"          # "causal" | "full" | "random" | "none"
    random_p: float | None = None
    graph_seed: int = 0
    dropout: float = 0.1
    activation: str = "gelu"            # mlp nonlinearity; encoder convs use relu
    conv_channels: tuple[int, ...] = (32, 64, 64)
    seq_enabled: bool = False
    seq_method: str = "stack"
    seq_patch: int = 14
    seq_d: int = 64
    seq_layers: int = 2
    seq_heads: int = 4
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None
    seed: int = 0
    dtype: str = "float32"

    def to_flat(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if v is None:
                out[f"model.{k}"] = ""
            elif isinstance(v, tuple):
                out[f"model.{k}"] = ",".join(str(x) for x in v)
            else:
                out[f"model.{k}"] = str(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        kw = {}
        defaults = cls()
        for f_ in cls.__dataclass_fields__.values():
            key = f"model.{f_.name}"
            if key not in flat:
                continue
            raw = flat[key]
            cur = getattr(defaults, f_.name)
            if raw == "":
                kw[f_.name] = None
            elif f_.name == "random_p":
                kw[f_.name] = float(raw)
            elif isinstance(cur, bool):
                kw[f_.name] = raw in ("True", "true", "1")
            elif isinstance(cur, int):
                kw[f_.name] = int(raw)
            elif isinstance(cur, float):
                kw[f_.name] = float(raw)
            elif isinstance(cur, tuple) or f_.name in ("state_shape", "conv_channels",
                                                       "action_low", "action_high"):
                parts = [x for x in raw.split(",") if x]
                conv = float if f_.name in ("action_low", "action_high") else int
                kw[f_.name] = tuple(conv(x) for x in parts)
            else:
                kw[f_.name] = raw
        return cls(**kw)


# --------------------------------------------------- scalar score functions

def vanilla_score(x_i: np.ndarray, x_j: np.ndarray,
                  w_q: np.ndarray, w_k: np.ndarray) -> float:
    """Plain content-content attention logit, scaled by 1/sqrt(d_head)."""
    q = x_i @ w_q
    k = x_j @ w_k
    return float(q @ k / np.sqrt(w_q.shape[1]))


def relation_score(x_i: np.ndarray, x_j: np.ndarray,
                   rel_fwd: np.ndarray, rel_bwd: np.ndarray,
                   w_q: np.ndarray, w_k: np.ndarray) -> float:
    """Logit with the pair's relation folded into both sides before projecting."""
    q = (x_i + rel_fwd) @ w_q
    k = (x_j + rel_bwd) @ w_k
    return float(q @ k / np.sqrt(w_q.shape[1]))


# ------------------------------------------------------------ g extraction

def extract_step_features(tokens: Tensor, tokens_per_step: int,
                          w: Tensor, b: Tensor) -> Tensor:
    """Per-step feature g_t from a (B, n, d) token block.

    Concatenates each step's state token with its return/reward token (zeros
    when the graph carries no reward tokens) and applies a learned map.
    """
    bsz, n, d = tokens.shape
    k = n // tokens_per_step
    grouped = nd.reshape(tokens, (bsz, k, tokens_per_step, d))
    if tokens_per_step == 3:
        state_tok = nd.reshape(nd.slice_axis(grouped, 2, 1, 2), (bsz, k, d))
        reward_tok = nd.reshape(nd.slice_axis(grouped, 2, 0, 1), (bsz, k, d))
    else:
        state_tok = nd.reshape(nd.slice_axis(grouped, 2, 0, 1), (bsz, k, d))
        reward_tok = Tensor(np.zeros((bsz, k, d), dtype=tokens.dtype))
    return nd.linear(nd.concat([state_tok, reward_tok], axis=-1), w, b)


def extract_g(tokens: Tensor, t: int, tokens_per_step: int,
              w: Tensor, b: Tensor) -> Tensor:
    """Single-step variant with bounds checking (mostly for direct probing)."""
    n = tokens.shape[-2]
    k = n // tokens_per_step
    if not 0 <= t < k:
        raise ConfigError(f"step {t} outside window of {k} steps")
    full = extract_step_features(tokens, tokens_per_step, w, b)
    return nd.reshape(nd.slice_axis(full, 1, t, t + 1), (tokens.shape[0], w.shape[1]))


@dataclass
class ForwardOutput:
    gs: list[Tensor]          # per-level step features, level 0 = embeddings
    pred: Tensor              # (B, K, action_dim) logits or bounded actions
    tokens: Tensor            # final-layer token block after the last norm
    seq_h: Tensor | None = None


class GDTModel:
    """Graph transformer over (return, state, action) tokens, with an optional
    patch-sequence refiner on top."""

    def __init__(self, cfg: ModelConfig):
        if cfg.d % cfg.heads:
            raise ConfigError(f"width {cfg.d} not divisible by {cfg.heads} heads")
        if cfg.reward_setting not in graphrep.REWARD_SETTINGS:
            raise ConfigError(f"unknown reward setting {cfg.reward_setting!r}")
        if cfg.action_kind not in ("discrete", "continuous"):
            raise ConfigError(f"unknown action kind {cfg.action_kind!r}")
        self.cfg = cfg
        self.dtype = np.float32 if cfg.dtype == "float32" else np.float64
        self.per = graphrep.TOKENS_PER_STEP[cfg.reward_setting]
        self.graph = graphrep.build_adjacency(cfg.K, cfg.reward_setting,
                                              cfg.connection, cfg.random_p,
                                              cfg.graph_seed)
        n = self.graph.n_tokens
        adj = self.graph.adjacency
        self._cat_masks = [np.asarray(adj == c, dtype=self.dtype)
                           for c in (graphrep.NO_EDGE, graphrep.SELF, graphrep.EDGE_FWD)]
        causal = np.tril(np.ones((n, n), dtype=bool))
        self._causal_add = np.where(causal, 0.0, -1e9).astype(self.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)
        self.params: dict[str, Tensor] = {}
        self.decay: set[str] = set()
        self._build(rng)
        self.seq = sf.SequenceRefiner(cfg, rng, self.dtype) if cfg.seq_enabled else None
        if self.seq is not None:
            self.params.update(self.seq.params)
            self.decay.update(self.seq.decay)

    # ------------------------------------------------------------ building
    def _par(self, rng, name, shape, scale=0.02, zeros=False, ones=False,
             decay=False):
        if zeros:
            data = np.zeros(shape, dtype=self.dtype)
        elif ones:
            data = np.ones(shape, dtype=self.dtype)
        else:
            data = (rng.standard_normal(shape) * scale).astype(self.dtype)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        if decay:
            self.decay.add(name)
        return t

    def _conv_specs(self) -> list[tuple[int, int]]:
        side = min(self.cfg.state_shape[0], self.cfg.state_shape[1])
        if side >= 36:
            return [(8, 4), (4, 2), (3, 1)]
        if side >= 10:
            return [(4, 2), (3, 1)]
        return [(3, 1)]

    def _build(self, rng):
        cfg = self.cfg
        d = cfg.d
        if cfg.reward_setting in ("rtg", "step"):
            self._par(rng, "embed.scalar.w", (1, d), decay=True)
            self._par(rng, "embed.scalar.b", (d,), zeros=True)
        if cfg.state_kind == "vector":
            self._par(rng, "embed.state.w", (int(np.prod(cfg.state_shape)), d),
                      decay=True)
            self._par(rng, "embed.state.b", (d,), zeros=True)
        else:
            cin = cfg.state_shape[-1]
            side_h, side_w = cfg.state_shape[0], cfg.state_shape[1]
            for i, (ksz, stride) in enumerate(self._conv_specs()):
                cout = cfg.conv_channels[min(i, len(cfg.conv_channels) - 1)]
                self._par(rng, f"enc.conv{i}.w", (ksz, ksz, cin, cout), decay=True)
                self._par(rng, f"enc.conv{i}.b", (cout,), zeros=True)
                side_h = (side_h - ksz) // stride + 1
                side_w = (side_w - ksz) // stride + 1
                cin = cout
            self._par(rng, "enc.fc.w", (side_h * side_w * cin, d), decay=True)
            self._par(rng, "enc.fc.b", (d,), zeros=True)
        if cfg.action_kind == "discrete":
            self._par(rng, "embed.action.table", (cfg.action_dim, d))
        else:
            self._par(rng, "embed.action.w", (cfg.action_dim, d), decay=True)
            self._par(rng, "embed.action.b", (d,), zeros=True)
        self._par(rng, "embed.time.table", (cfg.max_timestep + 1, d))
        self._par(rng, "relations.table", (3, 2, d))
        for i in range(cfg.layers):
            p = f"layer{i}"
            self._par(rng, f"{p}.ln1.g", (d,), ones=True)
            self._par(rng, f"{p}.ln1.b", (d,), zeros=True)
            for w in ("wq", "wk", "wv"):
                self._par(rng, f"{p}.attn.{w}", (d, d), decay=True)
            self._par(rng, f"{p}.attn.wo", (d, d), decay=True)
            self._par(rng, f"{p}.attn.bo", (d,), zeros=True)
            self._par(rng, f"{p}.ln2.g", (d,), ones=True)
            self._par(rng, f"{p}.ln2.b", (d,), zeros=True)
            self._par(rng, f"{p}.mlp.w1", (d, 4 * d), decay=True)
            self._par(rng, f"{p}.mlp.b1", (4 * d,), zeros=True)
            self._par(rng, f"{p}.mlp.w2", (4 * d, d), decay=True)
            self._par(rng, f"{p}.mlp.b2", (d,), zeros=True)
        self._par(rng, "lnf.g", (d,), ones=True)
        self._par(rng, "lnf.b", (d,), zeros=True)
        self._par(rng, "gfc.w", (2 * d, d), decay=True)
        self._par(rng, "gfc.b", (d,), zeros=True)
        if not cfg.seq_enabled:
            self._par(rng, "head.w", (d, cfg.action_dim), decay=True)
            self._par(rng, "head.b", (cfg.action_dim,), zeros=True)

    # ----------------------------------------------------------- embedding
    def _encode_states(self, states: np.ndarray) -> Tensor:
        cfg = self.cfg
        b, k = states.shape[0], states.shape[1]
        if cfg.state_kind == "vector":
            x = Tensor(states.reshape(b, k, -1).astype(self.dtype))
            return nd.linear(x, self.params["embed.state.w"], self.params["embed.state.b"])
        x = Tensor(states.reshape((b * k,) + tuple(cfg.state_shape)).astype(self.dtype)
                   / np.asarray(255.0, dtype=self.dtype))
        for i, (_, stride) in enumerate(self._conv_specs()):
            x = nd.relu(nd.conv2d_valid(x, self.params[f"enc.conv{i}.w"],
                                        self.params[f"enc.conv{i}.b"], stride))
        x = nd.reshape(x, (b * k, int(np.prod(x.shape[1:]))))
        x = nd.linear(x, self.params["enc.fc.w"], self.params["enc.fc.b"])
        return nd.reshape(x, (b, k, cfg.d))

    def _embed(self, batch: dict, train: bool) -> Tensor:
        cfg = self.cfg
        b, k = batch["timesteps"].shape
        d = cfg.d
        state_tok = self._encode_states(batch["states"])
        if cfg.action_kind == "discrete":
            act_tok = nd.gather_rows(self.params["embed.action.table"],
                                     np.asarray(batch["actions"], dtype=np.int64))
        else:
            act_tok = nd.linear(Tensor(batch["actions"].astype(self.dtype)),
                                self.params["embed.action.w"],
                                self.params["embed.action.b"])
        time_tok = nd.gather_rows(self.params["embed.time.table"],
                                  np.asarray(batch["timesteps"], dtype=np.int64))
        parts = []
        if cfg.reward_setting != "none":
            scalar = batch["rtg"] if cfg.reward_setting == "rtg" else batch["prev_rewards"]
            scal = Tensor(np.asarray(scalar, dtype=self.dtype)[..., None])
            parts.append(nd.linear(scal, self.params["embed.scalar.w"],
                                   self.params["embed.scalar.b"]))
        parts.append(state_tok)
        parts.append(act_tok)
        stacked = nd.concat([nd.reshape(nd.add(p, time_tok), (b, k, 1, d))
                             for p in parts], axis=2)
        tokens = nd.reshape(stacked, (b, k * self.per, d))
        return nd.dropout(tokens, cfg.dropout, self.dropout_rng, train)

    # ----------------------------------------------------------- attention
    def _attn_scores(self, q: Tensor, k: Tensor, wq: Tensor, wk: Tensor,
                     use_relations: bool) -> Tensor:
        """(B, H, n, n) pre-mask logits; relation terms enter as category sums."""
        cfg = self.cfg
        H = cfg.heads
        dh = cfg.d // H
        scores = nd.matmul(q, nd.transpose(k, (0, 1, 3, 2)))
        if use_relations:
            rel = self.params["relations.table"]
            rel_q = nd.reshape(nd.slice_axis(rel, 1, 0, 1), (3, cfg.d))
            rel_k = nd.reshape(nd.slice_axis(rel, 1, 1, 2), (3, cfg.d))
            # (3, d) @ (d, d) -> per-head (H, 3, dh)
            pq = nd.transpose(nd.reshape(nd.matmul(rel_q, wq), (3, H, dh)), (1, 0, 2))
            pk = nd.transpose(nd.reshape(nd.matmul(rel_k, wk), (3, H, dh)), (1, 0, 2))
            a2 = nd.matmul(q, nd.transpose(pk, (0, 2, 1)))        # (B, H, n, 3)
            a3 = nd.matmul(k, nd.transpose(pq, (0, 2, 1)))        # (B, H, n, 3)
            s4 = nd.sum_(nd.mul(pq, pk), axis=2)                  # (H, 3)
            for c in range(3):
                m = Tensor(self._cat_masks[c])
                t2 = nd.mul(nd.slice_axis(a2, 3, c, c + 1), m)
                t3 = nd.mul(nd.transpose(nd.slice_axis(a3, 3, c, c + 1),
                                         (0, 1, 3, 2)), m)
                t4 = nd.mul(nd.reshape(nd.slice_axis(s4, 1, c, c + 1), (1, H, 1, 1)), m)
                scores = nd.add(nd.add(nd.add(scores, t2), t3), t4)
        return nd.mul(scores, Tensor(np.asarray(1.0 / np.sqrt(dh), dtype=self.dtype)))

    def _block(self, x: Tensor, i: int, pad_add: np.ndarray, train: bool,
               use_relations: bool) -> Tensor:
        cfg = self.cfg
        p = self.params
        H = cfg.heads
        dh = cfg.d // H
        b, n, _ = x.shape
        h = nd.layernorm(x, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])

        def split(t):
            return nd.transpose(nd.reshape(t, (b, n, H, dh)), (0, 2, 1, 3))

        wq = p[f"layer{i}.attn.wq"]
        wk = p[f"layer{i}.attn.wk"]
        q = split(nd.matmul(h, wq))
        k = split(nd.matmul(h, wk))
        v = split(nd.matmul(h, p[f"layer{i}.attn.wv"]))
        scores = self._attn_scores(q, k, wq, wk, use_relations)
        scores = nd.add(scores, Tensor(self._causal_add))
        scores = nd.add(scores, Tensor(pad_add))
        w = nd.softmax_lastdim(scores)
        w = nd.dropout(w, cfg.dropout, self.dropout_rng, train)
        o = nd.matmul(w, v)
        o = nd.reshape(nd.transpose(o, (0, 2, 1, 3)), (b, n, cfg.d))
        o = nd.linear(o, p[f"layer{i}.attn.wo"], p[f"layer{i}.attn.bo"])
        x = nd.add(x, nd.dropout(o, cfg.dropout, self.dropout_rng, train))
        h2 = nd.layernorm(x, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
        act = nd.gelu if cfg.activation == "gelu" else nd.relu
        m = nd.linear(act(nd.linear(h2, p[f"layer{i}.mlp.w1"], p[f"layer{i}.mlp.b1"])),
                      p[f"layer{i}.mlp.w2"], p[f"layer{i}.mlp.b2"])
        return nd.add(x, nd.dropout(m, cfg.dropout, self.dropout_rng, train))

    # ------------------------------------------------------------- forward
    def forward(self, batch: dict, train: bool = False,
                use_relations: bool = True) -> ForwardOutput:
        """batch arrays: states (B,K,...), actions, rtg, prev_rewards,
        timesteps, mask (B,K). Vector states should arrive standardized."""
        cfg = self.cfg
        mask = np.asarray(batch["mask"], dtype=bool)
        b, k = mask.shape
        if k != cfg.K:
            raise ConfigError(f"batch has {k} steps, model expects {cfg.K}")
        tok_pad = np.repeat(mask, self.per, axis=1)
        pad_add = np.where(tok_pad, 0.0, -1e9).astype(self.dtype)[:, None, None, :]
        x = self._embed(batch, train)
        gw, gb = self.params["gfc.w"], self.params["gfc.b"]
        gs = [extract_step_features(x, self.per, gw, gb)]
        for i in range(cfg.layers):
            x = self._block(x, i, pad_add, train, use_relations)
            if i < cfg.layers - 1:
                gs.append(extract_step_features(x, self.per, gw, gb))
        x = nd.layernorm(x, self.params["lnf.g"], self.params["lnf.b"])
        gs.append(extract_step_features(x, self.per, gw, gb))
        seq_h = None
        if self.seq is not None:
            seq_h, pred = self.seq.forward(batch["states"], gs, batch["timesteps"],
                                           mask, train, self.dropout_rng)
        else:
            pred = nd.linear(gs[-1], self.params["head.w"], self.params["head.b"])
            if cfg.action_kind == "continuous":
                pred = sf._bound_continuous(pred, cfg, self.dtype)
        return ForwardOutput(gs=gs, pred=pred, tokens=x, seq_h=seq_h)

    # ------------------------------------------------------------- plumbing
    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            p = self.params[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ConfigError(f"shape mismatch for {name}: "
                                  f"{arr.shape} vs {p.data.shape}")
            p.data = arr.astype(self.dtype)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()
