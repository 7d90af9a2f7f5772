"""Word-level hashing tokenizer used by both text encoders.

Token ids are stable across processes (CRC32, not Python's salted ``hash``),
so checkpoints stay valid without shipping a vocabulary file.
"""

from __future__ import annotations

import re
import zlib
from typing import Iterable, Sequence

import torch

from .errors import InvalidInputError

PAD_ID = 0
_WORD = re.compile(r"[a-z0-9']+")


def normalize_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def token_id(word: str, vocab_size: int) -> int:
    return 1 + zlib.crc32(word.encode("utf-8")) % (vocab_size - 1)


def tokenize(text: str | Sequence[str], max_len: int, vocab_size: int) -> tuple[list[int], list[bool]]:
    """Return ``(ids, mask)`` padded or truncated to ``max_len``.

    ``text`` may be a raw string or an already-split token sequence.
    """
    words = normalize_words(text) if isinstance(text, str) else [w.lower() for w in text if w]
    if not words:
        raise InvalidInputError("text is empty")
    words = words[:max_len]
    ids = [token_id(w, vocab_size) for w in words]
    mask = [True] * len(ids)
    pad = max_len - len(ids)
    return ids + [PAD_ID] * pad, mask + [False] * pad


def batch_tokenize(texts: Iterable[str | Sequence[str]], max_len: int, vocab_size: int):
    ids, masks = zip(*(tokenize(t, max_len, vocab_size) for t in texts))
    return torch.tensor(ids, dtype=torch.long), torch.tensor(masks, dtype=torch.bool)
