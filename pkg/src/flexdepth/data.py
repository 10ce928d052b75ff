"""Synthetic sequence-to-sequence tasks and batching.

Two tasks are enough to exercise the trainer: copy (target equals source)
and reverse (target is the source reversed). Sequences are drawn over the
vocabulary's payload range, i.e. everything above the reserved pad, bos,
and eos ids. Batches are right-padded so the decoder only needs a causal
mask and the encoder only a padding mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flexdepth.model import BOS_ID, EOS_ID, PAD_ID, Batch

TASKS = ("copy", "reverse")


@dataclass(frozen=True)
class DataConfig:
    task: str = "copy"
    vocab_size: int = 16
    min_len: int = 3
    max_len: int = 8

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.vocab_size <= EOS_ID + 1:
            raise ValueError("vocab leaves no payload tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("bad length range")


def target_for(task: str, src: tuple[int, ...]) -> tuple[int, ...]:
    if task == "copy":
        return tuple(src)
    if task == "reverse":
        return tuple(reversed(src))
    raise ValueError(f"unknown task {task!r}")


def sample_pairs(config: DataConfig, n: int, rng) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Draw n (source, target) pairs."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    lo, hi = EOS_ID + 1, config.vocab_size
    pairs = []
    for _ in range(n):
        length = int(rng.integers(config.min_len, config.max_len + 1))
        src = tuple(int(t) for t in rng.integers(lo, hi, size=length))
        pairs.append((src, target_for(config.task, src)))
    return pairs


def pad_sources(sources):
    """Right-pad source sequences; returns (src, src_mask)."""
    if not sources:
        raise ValueError("no sources")
    B = len(sources)
    S = max(len(s) for s in sources)
    src = np.full((B, S), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    for r, s in enumerate(sources):
        src[r, : len(s)] = s
        mask[r, : len(s)] = True
    return src, mask


def make_batch(pairs, batch_id: int = 0) -> Batch:
    """Pad pairs into one batch; targets gain BOS on input and EOS on output."""
    if not pairs:
        raise ValueError("empty batch")
    B = len(pairs)
    S = max(len(s) for s, _ in pairs)
    T = max(len(t) for _, t in pairs) + 1
    src = np.full((B, S), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((B, S), dtype=bool)
    tgt_in = np.full((B, T), PAD_ID, dtype=np.int64)
    tgt_out = np.full((B, T), PAD_ID, dtype=np.int64)
    tgt_mask = np.zeros((B, T), dtype=bool)
    for r, (s, t) in enumerate(pairs):
        src[r, : len(s)] = s
        src_mask[r, : len(s)] = True
        tgt_in[r, 0] = BOS_ID
        tgt_in[r, 1 : len(t) + 1] = t
        tgt_out[r, : len(t)] = t
        tgt_out[r, len(t)] = EOS_ID
        tgt_mask[r, : len(t) + 1] = True
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask, batch_id=batch_id)


def batches_from_pairs(pairs, batch_size: int, first_id: int = 0) -> list[Batch]:
    """Chunk a pair list into fixed-size batches, preserving order."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    out = []
    for k, start in enumerate(range(0, len(pairs), batch_size)):
        out.append(make_batch(pairs[start : start + batch_size], batch_id=first_id + k))
    return out


def evaluation_set(config: DataConfig, n: int, seed: int):
    """Fixed held-out pairs for accuracy measurements."""
    return sample_pairs(config, n, np.random.default_rng(seed))
