"""Deterministic English-like sample corpus.

The packaged training demo and the learning acceptance run need a
megabyte of text with natural-language statistics, without shipping or
downloading a book.  This generator composes grammatical sentences from
embedded word banks with a seeded generator; byte statistics (unigram
entropy around 4.2 bits/byte, strong conditional structure) are close to
ordinary English prose.  Any real text file can be used instead via the
CLI's --corpus flag.
"""

from __future__ import annotations

import numpy as np

NOUNS = (
    "river", "mountain", "library", "engine", "garden", "harbor", "letter",
    "winter", "market", "teacher", "bridge", "forest", "lantern", "compass",
    "village", "captain", "stranger", "morning", "shadow", "window",
    "journey", "machine", "island", "painter", "doctor", "farmer", "street",
    "evening", "weather", "story", "question", "answer", "silence", "voice",
    "city", "child", "horse", "ocean", "valley", "tower", "clock", "road",
    "house", "field", "stone", "candle", "paper", "song", "dream", "wall",
)
VERBS = (
    "follows", "watches", "carries", "remembers", "builds", "crosses",
    "describes", "discovers", "guards", "meets", "opens", "repairs",
    "studies", "visits", "answers", "paints", "reads", "writes", "holds",
    "finds", "leaves", "observes", "gathers", "measures", "returns",
    "borrows", "counts", "draws", "hears", "keeps",
)
ADJECTIVES = (
    "quiet", "ancient", "bright", "careful", "distant", "early", "gentle",
    "golden", "heavy", "hollow", "narrow", "patient", "silver", "simple",
    "steady", "sudden", "warm", "weary", "wide", "young", "cold", "dark",
    "empty", "foreign", "modest", "pale", "rough", "slow", "small", "tall",
)
ADVERBS = (
    "slowly", "quietly", "often", "rarely", "almost", "finally", "gladly",
    "barely", "calmly", "early", "late", "soon", "today", "together",
)
CONNECTORS = (
    "and", "but", "because", "while", "although", "so", "before", "after",
    "until", "when",
)

_TEMPLATES = (
    "The {adj} {noun} {verb} the {noun}",
    "A {adj} {noun} {verb} a {adj} {noun}",
    "The {noun} {adv} {verb} the {adj} {noun}",
    "Every {noun} {verb} the {noun} {conn} the {noun} {verb} the {adj} {noun}",
    "The {noun} near the {noun} {adv} {verb} a {noun}",
    "In the {adj} {noun}, the {noun} {verb} the {noun}",
    "No {noun} {verb} the {adj} {noun} {conn} the {adj} {noun} waits",
    "Some {noun} {verb} the {noun} of the {adj} {noun}",
)


def _sentence(rng: np.random.Generator) -> str:
    template = _TEMPLATES[rng.integers(len(_TEMPLATES))]
    out = []
    for piece in template.split(" "):
        if piece.startswith("{"):
            tail = ""
            key = piece.strip("{}")
            if not piece.endswith("}"):
                key, tail = piece[1:].split("}", 1)
            bank = {"noun": NOUNS, "verb": VERBS, "adj": ADJECTIVES,
                    "adv": ADVERBS, "conn": CONNECTORS}[key]
            out.append(bank[rng.integers(len(bank))] + tail)
        else:
            out.append(piece)
    text = " ".join(out)
    end = "." if rng.random() < 0.9 else ("?" if rng.random() < 0.5 else "!")
    return text + end


def generate_text(n_bytes: int, seed: int = 0) -> str:
    """At least ``n_bytes`` of seeded prose, paragraph-structured."""
    rng = np.random.default_rng(seed)
    chunks = []
    size = 0
    while size < n_bytes:
        n_sentences = int(rng.integers(3, 8))
        paragraph = " ".join(_sentence(rng) for _ in range(n_sentences))
        chunks.append(paragraph)
        size += len(paragraph) + 2
    return "\n\n".join(chunks) + "\n"
