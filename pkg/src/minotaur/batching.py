"""Turn examples into padded id tensors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch
from torch import Tensor

from .data import Example, Vocab, source_tokens
from .model import PAD


@dataclass
class Batch:
    src: Tensor  # (B, T) source ids, PAD-padded
    gold: Tensor  # (B, L) target ids without BOS/EOS, PAD-padded
    examples: List[Example]

    @property
    def src_mask(self) -> Tensor:
        return self.src != PAD

    def __len__(self) -> int:
        return len(self.examples)


def pad_ids(rows: Sequence[Sequence[int]]) -> Tensor:
    width = max((len(r) for r in rows), default=0)
    out = torch.full((len(rows), max(width, 1)), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.as_tensor(list(r), dtype=torch.long)
    return out


def collate(examples: Sequence[Example], src_vocab: Vocab, tgt_vocab: Vocab, task: str) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    src = pad_ids([src_vocab.encode(source_tokens(ex, task)) for ex in examples])
    gold = pad_ids([tgt_vocab.encode(ex.lf.split()) for ex in examples])
    return Batch(src, gold, list(examples))


def chunks(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i: i + size]
