"""Patch-level sequence refiner stacked on top of the graph network.

Each step contributes a group of n patch tokens plus one slot carrying that
step's graph feature; groups are concatenated in time order, so the slot for
step t sits at index n + t*(n+1). Attention is causal at group granularity
and bidirectional inside a group. Three ways of injecting graph features into
deeper layers: fusion adds g to the slot, replace overwrites the slot, stack
injects only the final-layer g at assembly and leaves deeper layers alone.
"""
from __future__ import annotations

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor

CONNECTION_METHODS = ("replace", "fusion", "stack")


class SeqConfigError(ValueError):
    pass


def patch_grid(state_kind: str, state_shape: tuple[int, ...], patch: int) -> int:
    """Patch token count per step; raises at build time if patches don't tile."""
    if state_kind == "image":
        h, w = state_shape[0], state_shape[1]
        if h % patch or w % patch:
            raise SeqConfigError(f"frame {h}x{w} not divisible by patch {patch}")
        return (h // patch) * (w // patch)
    return int(np.prod(state_shape))


def patchify_frames(states: np.ndarray, patch: int) -> np.ndarray:
    """(B, K, H, W, C) -> (B, K, n, patch*patch*C), row-major over the grid."""
    b, k, h, w, c = states.shape
    gh, gw = h // patch, w // patch
    x = states.reshape(b, k, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, k, gh * gw, patch * patch * c).astype(states.dtype)


def slot_index(n_patches: int, t: int) -> int:
    return n_patches + t * (n_patches + 1)


class SequenceRefiner:
    """Owns the patch tokenizer, its transformer stack, and the action head."""

    def __init__(self, cfg, rng: np.random.Generator, dtype):
        self.cfg = cfg
        self.dtype = dtype
        self.n_patches = patch_grid(cfg.state_kind, cfg.state_shape, cfg.seq_patch)
        if cfg.seq_d % cfg.seq_heads:
            raise SeqConfigError(f"width {cfg.seq_d} not divisible by "
                                 f"{cfg.seq_heads} heads")
        if cfg.seq_method not in CONNECTION_METHODS:
            raise SeqConfigError(f"unknown connection method {cfg.seq_method!r}")
        if cfg.seq_method in ("replace", "fusion") and cfg.seq_layers > cfg.layers + 1:
            raise SeqConfigError(
                f"{cfg.seq_method} needs a graph feature per layer: "
                f"{cfg.seq_layers} sequence layers > {cfg.layers + 1} available")
        ds = cfg.seq_d
        self.params: dict[str, Tensor] = {}
        self.decay: set[str] = set()

        def par(name, shape, scale=0.02, zeros=False, ones=False, decay=False):
            if zeros:
                data = np.zeros(shape, dtype=dtype)
            elif ones:
                data = np.ones(shape, dtype=dtype)
            else:
                data = (rng.standard_normal(shape) * scale).astype(dtype)
            t = Tensor(data, requires_grad=True, name=name)
            self.params[name] = t
            if decay:
                self.decay.add(name)
            return t

        patch_in = (cfg.seq_patch * cfg.seq_patch * cfg.state_shape[-1]
                    if cfg.state_kind == "image" else 1)
        par("seq.patch.w", (patch_in, ds), decay=True)
        par("seq.patch.b", (ds,), zeros=True)
        if self.n_patches:
            par("seq.patch.pos", (self.n_patches, ds))
        par("seq.time.table", (cfg.max_timestep + 1, ds))
        if cfg.d != ds:
            par("seq.adapter.w", (cfg.d, ds), decay=True)
            par("seq.adapter.b", (ds,), zeros=True)
        for i in range(cfg.seq_layers):
            p = f"seq.layer{i}"
            par(f"{p}.ln1.g", (ds,), ones=True)
            par(f"{p}.ln1.b", (ds,), zeros=True)
            for w in ("wq", "wk", "wv"):
                par(f"{p}.attn.{w}", (ds, ds), decay=True)
            par(f"{p}.attn.wo", (ds, ds), decay=True)
            par(f"{p}.attn.bo", (ds,), zeros=True)
            par(f"{p}.ln2.g", (ds,), ones=True)
            par(f"{p}.ln2.b", (ds,), zeros=True)
            par(f"{p}.mlp.w1", (ds, 4 * ds), decay=True)
            par(f"{p}.mlp.b1", (4 * ds,), zeros=True)
            par(f"{p}.mlp.w2", (4 * ds, ds), decay=True)
            par(f"{p}.mlp.b2", (ds,), zeros=True)
        par("seq.lnf.g", (ds,), ones=True)
        par("seq.lnf.b", (ds,), zeros=True)
        out_dim = cfg.action_dim
        par("seq.head.w", (ds, out_dim), decay=True)
        par("seq.head.b", (out_dim,), zeros=True)

    # ------------------------------------------------------------ assembly
    def _adapt(self, g: Tensor) -> Tensor:
        if "seq.adapter.w" in self.params:
            return nd.linear(g, self.params["seq.adapter.w"], self.params["seq.adapter.b"])
        return g

    def _mask(self, step_mask: np.ndarray, K: int) -> np.ndarray:
        n1 = self.n_patches + 1
        L = K * n1
        group = np.arange(L) // n1
        allowed = group[None, :] <= group[:, None]
        add = np.where(allowed, 0.0, -1e9).astype(self.dtype)
        tok_pad = np.repeat(step_mask, n1, axis=1)           # (B, L)
        pad = np.where(tok_pad, 0.0, -1e9).astype(self.dtype)
        return add[None, None] + pad[:, None, None, :]

    def assemble_layer_input(self, y_prev: Tensor | None, g: Tensor | None,
                             patches: Tensor | None, timesteps: np.ndarray,
                             method: str) -> Tensor:
        """Layer 0 (y_prev None) builds [patch tokens..., slot] groups; deeper
        layers rewrite only the slot according to the connection method."""
        cfg = self.cfg
        n = self.n_patches
        if y_prev is None:
            b, k = timesteps.shape
            slot = nd.reshape(self._adapt(g), (b, k, 1, cfg.seq_d))
            if n:
                ptok = nd.linear(patches, self.params["seq.patch.w"],
                                 self.params["seq.patch.b"])
                ptok = nd.add(ptok, self.params["seq.patch.pos"])
                groups = nd.concat([ptok, slot], axis=2)
            else:
                groups = slot
            ttok = nd.gather_rows(self.params["seq.time.table"], timesteps)
            groups = nd.add(groups, nd.reshape(ttok, (b, k, 1, cfg.seq_d)))
            return nd.reshape(groups, (b, k * (n + 1), cfg.seq_d))
        if method == "stack":
            return y_prev
        b, k = timesteps.shape
        slot = nd.reshape(self._adapt(g), (b, k, 1, cfg.seq_d))
        zeros = Tensor(np.zeros((b, k, n, cfg.seq_d), dtype=self.dtype))
        injected = nd.reshape(nd.concat([zeros, slot], axis=2),
                              (b, k * (n + 1), cfg.seq_d))
        if method == "fusion":
            return nd.add(y_prev, injected)
        # replace: zero the slot lane of y_prev, then add the new slot content
        keep = np.ones((n + 1, 1), dtype=self.dtype)
        keep[n] = 0.0
        keep = np.tile(keep, (k, 1))
        return nd.add(nd.mul(y_prev, Tensor(keep)), injected)

    # ------------------------------------------------------------- forward
    def _block(self, x: Tensor, i: int, mask: np.ndarray, train: bool,
               drop_rng) -> Tensor:
        cfg = self.cfg
        p = self.params
        ds, H = cfg.seq_d, cfg.seq_heads
        dh = ds // H
        b, L, _ = x.shape
        h = nd.layernorm(x, p[f"seq.layer{i}.ln1.g"], p[f"seq.layer{i}.ln1.b"])

        def split(t):
            return nd.transpose(nd.reshape(t, (b, L, H, dh)), (0, 2, 1, 3))

        q = split(nd.matmul(h, p[f"seq.layer{i}.attn.wq"]))
        k = split(nd.matmul(h, p[f"seq.layer{i}.attn.wk"]))
        v = split(nd.matmul(h, p[f"seq.layer{i}.attn.wv"]))
        scores = nd.matmul(q, nd.transpose(k, (0, 1, 3, 2)))
        scores = nd.mul(scores, Tensor(np.asarray(1.0 / np.sqrt(dh), dtype=self.dtype)))
        scores = nd.add(scores, Tensor(mask))
        w = nd.softmax_lastdim(scores)
        w = nd.dropout(w, cfg.dropout, drop_rng, train)
        o = nd.matmul(w, v)
        o = nd.reshape(nd.transpose(o, (0, 2, 1, 3)), (b, L, ds))
        o = nd.linear(o, p[f"seq.layer{i}.attn.wo"], p[f"seq.layer{i}.attn.bo"])
        x = nd.add(x, nd.dropout(o, cfg.dropout, drop_rng, train))
        h2 = nd.layernorm(x, p[f"seq.layer{i}.ln2.g"], p[f"seq.layer{i}.ln2.b"])
        act = nd.gelu if cfg.activation == "gelu" else nd.relu
        m = nd.linear(act(nd.linear(h2, p[f"seq.layer{i}.mlp.w1"],
                                    p[f"seq.layer{i}.mlp.b1"])),
                      p[f"seq.layer{i}.mlp.w2"], p[f"seq.layer{i}.mlp.b2"])
        return nd.add(x, nd.dropout(m, cfg.dropout, drop_rng, train))

    def forward(self, states: np.ndarray, gs: list[Tensor], timesteps: np.ndarray,
                step_mask: np.ndarray, train: bool, drop_rng) -> tuple[Tensor, Tensor]:
        """Returns (h, prediction): per-step slot features and head output."""
        cfg = self.cfg
        n = self.n_patches
        b, k = timesteps.shape
        if cfg.state_kind == "image":
            raw = patchify_frames(states.astype(self.dtype) / np.asarray(255.0, self.dtype),
                                  cfg.seq_patch)
        else:
            raw = states.reshape(b, k, -1)[..., None].astype(self.dtype)
        patches = Tensor(raw) if n else None
        mask = self._mask(step_mask, k)
        g0 = gs[-1] if cfg.seq_method == "stack" else gs[0]
        y = self.assemble_layer_input(None, g0, patches, timesteps, cfg.seq_method)
        y = nd.dropout(y, cfg.dropout, drop_rng, train)
        for i in range(cfg.seq_layers):
            if i > 0 and cfg.seq_method in ("replace", "fusion"):
                y = self.assemble_layer_input(y, gs[i], None, timesteps, cfg.seq_method)
            y = self._block(y, i, mask, train, drop_rng)
        y = nd.layernorm(y, self.params["seq.lnf.g"], self.params["seq.lnf.b"])
        grouped = nd.reshape(y, (b, k, n + 1, cfg.seq_d))
        h = nd.reshape(nd.slice_axis(grouped, 2, n, n + 1), (b, k, cfg.seq_d))
        pred = nd.linear(h, self.params["seq.head.w"], self.params["seq.head.b"])
        if cfg.action_kind == "continuous":
            pred = _bound_continuous(pred, cfg, self.dtype)
        return h, pred


def _bound_continuous(pred: Tensor, cfg, dtype) -> Tensor:
    out = nd.tanh(pred)
    if cfg.action_low is not None and cfg.action_high is not None:
        lo = np.asarray(cfg.action_low, dtype=dtype)
        hi = np.asarray(cfg.action_high, dtype=dtype)
        half = Tensor((hi - lo) / 2.0)
        mid = Tensor((hi + lo) / 2.0)
        out = nd.add(nd.mul(out, half), mid)
    return out
