"""Byte-level tokenizer and corpus ingestion.

Every byte is its own token (ids 0-255); BOS=256 separates documents,
PAD=257 exists for fixed-width batch formats.  Round trips are lossless
for arbitrary byte strings.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

BOS_ID = 256
PAD_ID = 257
VOCAB_SIZE = 258


def tokenize(data: Union[bytes, str]) -> np.ndarray:
    """Bytes (or UTF-8 text) -> int32 ids, one per byte."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int32)


def detokenize(ids: Sequence[int]) -> bytes:
    """Ids -> bytes; BOS/PAD are dropped."""
    arr = np.asarray(ids, dtype=np.int64)
    return arr[arr < 256].astype(np.uint8).tobytes()


def load_corpus(paths: Iterable[Union[str, Path]]) -> np.ndarray:
    """Concatenate raw files into one id stream with BOS separators."""
    pieces = []
    for path in paths:
        pieces.append(np.array([BOS_ID], dtype=np.int32))
        pieces.append(tokenize(Path(path).read_bytes()))
    if not pieces:
        raise ValueError("load_corpus: no input files")
    return np.concatenate(pieces)


def corpus_from_text(text: Union[bytes, str]) -> np.ndarray:
    """One in-memory document with a leading BOS."""
    return np.concatenate([np.array([BOS_ID], dtype=np.int32), tokenize(text)])


def unigram_entropy(ids: np.ndarray) -> float:
    """Entropy (nats/token) of the ids' empirical unigram distribution."""
    _, counts = np.unique(np.asarray(ids), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())
