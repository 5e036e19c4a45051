"""Standalone writer for the gdt trajectory file format.

Layout, all little-endian:

    magic     8 bytes, b"GDTRAJ01"
    header    <BB>   state kind (0 vector, 1 image), state ndim
              <I>*n  state shape
              <BI>   action kind (0 discrete, 1 continuous), action dim
              <I>    episode count
              <I>    metadata count
    metadata  per entry: <I> key length, key utf-8, <I> value length,
              value utf-8
    episodes  per episode: <I> length T, then states (T*prod(shape)
              float32 for vectors, uint8 for images), actions
              (T uint32 discrete, T*dim float32 continuous), rewards
              (T float32)

Metadata entries are written sorted by key so identical inputs always
produce identical bytes. The whole dataset is packed in memory and
written in one call, so a failed export never leaves a partial file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"GDTRAJ01"

STATE_VECTOR = 0
STATE_IMAGE = 1
ACTION_DISCRETE = 0
ACTION_CONTINUOUS = 1


@dataclass
class Episode:
    """One trajectory: per-step states, actions, and rewards."""

    states: np.ndarray   # (T, *state_shape)
    actions: np.ndarray  # (T,) discrete or (T, action_dim) continuous
    rewards: np.ndarray  # (T,)

    def __len__(self) -> int:
        return len(self.rewards)


def pack_dataset(episodes: list[Episode],
                 state_kind: int,
                 state_shape: tuple[int, ...],
                 action_kind: int,
                 action_dim: int,
                 metadata: dict[str, str]) -> bytes:
    """Serialize episodes plus metadata into one trajectory-file blob."""
    if not episodes:
        raise ValueError("refusing to pack a dataset with no episodes")

    parts = [MAGIC]
    parts.append(struct.pack("<BB", state_kind, len(state_shape)))
    parts.append(struct.pack(f"<{len(state_shape)}I", *state_shape))
    parts.append(struct.pack("<BI", action_kind, action_dim))
    parts.append(struct.pack("<I", len(episodes)))

    parts.append(struct.pack("<I", len(metadata)))
    for key in sorted(metadata):
        kb = key.encode("utf-8")
        vb = metadata[key].encode("utf-8")
        parts.append(struct.pack("<I", len(kb)) + kb)
        parts.append(struct.pack("<I", len(vb)) + vb)

    state_dtype = np.uint8 if state_kind == STATE_IMAGE else np.float32
    for ep in episodes:
        t = len(ep)
        if t == 0:
            raise ValueError("refusing to pack a zero-length episode")
        states = np.ascontiguousarray(ep.states, dtype=state_dtype)
        if states.shape != (t, *state_shape):
            raise ValueError(
                f"episode states have shape {states.shape}, "
                f"expected {(t, *state_shape)}")
        if action_kind == ACTION_DISCRETE:
            actions = np.ascontiguousarray(ep.actions, dtype=np.uint32)
            if actions.shape != (t,):
                raise ValueError(
                    f"discrete actions have shape {actions.shape}, "
                    f"expected {(t,)}")
            if actions.size and actions.max() >= action_dim:
                raise ValueError(
                    f"action id {int(actions.max())} out of range for "
                    f"{action_dim} actions")
        else:
            actions = np.ascontiguousarray(ep.actions, dtype=np.float32)
            if actions.shape != (t, action_dim):
                raise ValueError(
                    f"continuous actions have shape {actions.shape}, "
                    f"expected {(t, action_dim)}")
        rewards = np.ascontiguousarray(ep.rewards, dtype=np.float32)
        if rewards.shape != (t,):
            raise ValueError(
                f"rewards have shape {rewards.shape}, expected {(t,)}")
        parts.append(struct.pack("<I", t))
        parts.append(states.tobytes())
        parts.append(actions.tobytes())
        parts.append(rewards.tobytes())

    return b"".join(parts)
