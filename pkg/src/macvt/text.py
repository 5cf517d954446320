"""Text side of the dual-masking pipeline.

A deliberately small tokenizer (lowercase, split on non-alphanumerics,
suffix chunks for out-of-vocabulary words) feeding whole-word masking:
when a word is picked, every one of its pieces becomes [MASK] - never a
random replacement, never left unchanged. Unlike video patches, masked
text tokens are replaced in place, so sequence length is preserved.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .video import round_half_up

PAD, CLS, MASK, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")
_WORD_RE = re.compile(r"[a-z0-9]+")
_MAX_PIECE_LEN = 4


class TextMaskError(ValueError):
    """A mask plan does not belong to the sequence it is applied to."""


@dataclass
class Vocabulary:
    """token -> id map with four fixed specials at ids 0..3."""

    id_to_token: list[str]
    token_to_id: dict[str, int]

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        """Frequency-ordered vocabulary, ties broken lexicographically."""
        counts: dict[str, int] = {}
        for text in texts:
            for word in _WORD_RE.findall(text.lower()):
                counts[word] = counts.get(word, 0) + 1
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        id_to_token = list(SPECIAL_TOKENS) + ordered
        return cls(id_to_token, {t: i for i, t in enumerate(id_to_token)})

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path):
        """One token per line; the line number is the id."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            id_to_token = [line.rstrip("\n") for line in fh]
        if tuple(id_to_token[:4]) != SPECIAL_TOKENS:
            raise TextMaskError(f"vocabulary file {path} lacks the reserved specials")
        return cls(id_to_token, {t: i for i, t in enumerate(id_to_token)})


@dataclass
class TextSequence:
    """Padded token ids with [CLS] at position 0 and whole-word spans."""

    ids: np.ndarray                     # (L_max,) int64
    word_groups: list[tuple[int, int]]  # [start, stop) spans over ids
    length: int                         # tokens incl. [CLS], excl. padding

    def copy(self) -> "TextSequence":
        return TextSequence(self.ids.copy(), list(self.word_groups), self.length)


@dataclass
class TextMaskPlan:
    masked_groups: list[int]
    masked_positions: list[int]
    ratio: float
    seed: int


def _word_pieces(word: str) -> list[str]:
    """Suffix chunks of up to four characters, longest suffix first.

    "abcdefghij" -> ["ab", "cdef", "ghij"]; pieces are emitted left to
    right so the sequence still reads in order.
    """
    pieces = []
    while word:
        pieces.append(word[-_MAX_PIECE_LEN:])
        word = word[:-_MAX_PIECE_LEN]
    pieces.reverse()
    return pieces


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TextSequence:
    """Deterministic toy tokenization with whole-word group tracking.

    Words missing from the vocabulary split into suffix chunks that form a
    single group. Trailing words that do not fit whole are dropped, so a
    group is never truncated mid-word.
    """
    if max_len < 2:
        raise TextMaskError(f"max_len must be at least 2, got {max_len}")
    words = _WORD_RE.findall(text.lower())
    tokens: list[int] = [CLS]
    groups: list[tuple[int, int]] = []
    if not words:
        tokens.append(UNK)
        groups.append((1, 2))
    for word in words:
        if word in vocab.token_to_id:
            piece_ids = [vocab.token_to_id[word]]
        else:
            piece_ids = [vocab.lookup(p) for p in _word_pieces(word)]
        if len(tokens) + len(piece_ids) > max_len:
            break
        groups.append((len(tokens), len(tokens) + len(piece_ids)))
        tokens.extend(piece_ids)
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[: len(tokens)] = tokens
    return TextSequence(ids=ids, word_groups=groups, length=len(tokens))


def sample_text_mask(seq: TextSequence, ratio: float, seed: int) -> TextMaskPlan:
    """Pick round(ratio * #words) whole words, uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise TextMaskError(f"text mask ratio must be in [0, 1), got {ratio}")
    n_groups = len(seq.word_groups)
    n_masked = min(round_half_up(ratio * n_groups), n_groups)
    if n_masked == 0:
        return TextMaskPlan([], [], ratio, seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    chosen = sorted(int(i) for i in rng.choice(n_groups, size=n_masked, replace=False))
    positions = [p for g in chosen for p in range(*seq.word_groups[g])]
    return TextMaskPlan(chosen, positions, ratio, seed)


def apply_text_mask(seq: TextSequence, plan: TextMaskPlan) -> TextSequence:
    """Replace every token of each chosen word with [MASK], in place of it.

    Length and padding are untouched; [CLS] and [PAD] are never masked
    because plans only ever cover word spans.
    """
    expected = [p for g in plan.masked_groups
                if 0 <= g < len(seq.word_groups)
                for p in range(*seq.word_groups[g])]
    if (any(g < 0 or g >= len(seq.word_groups) for g in plan.masked_groups)
            or expected != list(plan.masked_positions)):
        raise TextMaskError("mask plan was not derived from this sequence")
    out = seq.copy()
    for p in plan.masked_positions:
        if p <= 0 or p >= seq.length:
            raise TextMaskError(f"masked position {p} outside token span")
        out.ids[p] = MASK
    return out
