"""Braid words on m strands.

A word is a sequence of signed Artin generators ``d_i^+`` / ``d_i^-`` with
1-based positions ``1 <= i <= m - 1``. Sign convention used throughout the
package: for ``d_i^+`` the strand at position ``i + 1`` passes *over* the strand
at position ``i``; ``d_i^-`` is the mirror crossing.

Only free reduction is implemented (adjacent ``d_i^+ d_i^-`` pairs cancel).
The braid relations are never used for rewriting.

Text format (0-based indices)::

    m=3;w=s0+,s1-
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

PLUS = 1
MINUS = -1


class BraidError(ValueError):
    pass


@dataclass(frozen=True)
class Generator:
    index: int
    sign: int

    def inverse(self) -> Generator:
        return Generator(self.index, -self.sign)

    def __str__(self) -> str:
        return f"d{self.index}{'+' if self.sign > 0 else '-'}"


@dataclass(frozen=True)
class StrandPermutation:
    """``mapping[s - 1]`` is the final position of the strand starting at ``s``."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(1, len(self.mapping) + 1)):
            raise BraidError(f"not a permutation of 1..{len(self.mapping)}: {self.mapping}")

    @classmethod
    def identity(cls, strands: int) -> StrandPermutation:
        return cls(tuple(range(1, strands + 1)))

    def __call__(self, start: int) -> int:
        return self.mapping[start - 1]

    def __len__(self) -> int:
        return len(self.mapping)

    def then(self, other: StrandPermutation) -> StrandPermutation:
        """Apply ``self`` first, then ``other``."""
        return StrandPermutation(tuple(other(p) for p in self.mapping))

    def inverse(self) -> StrandPermutation:
        inv = [0] * len(self.mapping)
        for start, end in enumerate(self.mapping, 1):
            inv[end - 1] = start
        return StrandPermutation(tuple(inv))


@dataclass(frozen=True)
class BraidWord:
    strands: int
    letters: tuple[Generator, ...] = ()

    def __post_init__(self):
        if self.strands < 2:
            raise BraidError(f"a braid needs at least 2 strands, got {self.strands}")
        for g in self.letters:
            if not 1 <= g.index <= self.strands - 1:
                raise BraidError(
                    f"generator index {g.index} outside 1..{self.strands - 1}"
                )
            if g.sign not in (PLUS, MINUS):
                raise BraidError(f"generator sign must be +1 or -1, got {g.sign}")

    def __len__(self) -> int:
        return len(self.letters)

    def __iter__(self) -> Iterator[Generator]:
        return iter(self.letters)

    def __mul__(self, other: BraidWord) -> BraidWord:
        return compose(self, other)

    def __str__(self) -> str:
        return format_word(self)

    def is_identity_word(self) -> bool:
        return not self.letters

    def prefix(self, n: int) -> BraidWord:
        return BraidWord(self.strands, self.letters[:n])


def _sign(s) -> int:
    if s in (PLUS, "+", "plus"):
        return PLUS
    if s in (MINUS, "-", "minus"):
        return MINUS
    raise BraidError(f"unrecognised sign {s!r}")


def make_word(strands: int, letters: Iterable[tuple[int, object]] = ()) -> BraidWord:
    """Build a validated word from ``(index, sign)`` pairs.

    Signs may be given as ``+1``/``-1``, ``'+'``/``'-'`` or ``'plus'``/``'minus'``.
    """
    return BraidWord(strands, tuple(Generator(int(i), _sign(s)) for i, s in letters))


def identity(strands: int) -> BraidWord:
    return BraidWord(strands)


def compose(w1: BraidWord, w2: BraidWord) -> BraidWord:
    if w1.strands != w2.strands:
        raise BraidError(f"cannot compose words on {w1.strands} and {w2.strands} strands")
    return BraidWord(w1.strands, w1.letters + w2.letters)


def inverse(w: BraidWord) -> BraidWord:
    return BraidWord(w.strands, tuple(g.inverse() for g in reversed(w.letters)))


def free_reduce(w: BraidWord) -> BraidWord:
    # Single left-to-right stack pass yields the unique free reduction.
    out: list[Generator] = []
    for g in w.letters:
        if out and out[-1].index == g.index and out[-1].sign == -g.sign:
            out.pop()
        else:
            out.append(g)
    return BraidWord(w.strands, tuple(out))


def permutation(w: BraidWord) -> StrandPermutation:
    at = list(range(1, w.strands + 1))  # at[p - 1] = strand currently at position p
    for g in w.letters:
        i = g.index
        at[i - 1], at[i] = at[i], at[i - 1]
    mapping = [0] * w.strands
    for pos, strand in enumerate(at, 1):
        mapping[strand - 1] = pos
    return StrandPermutation(tuple(mapping))


def signed_generators(strands: int) -> list[Generator]:
    """All ``2 (m - 1)`` letters, ordered d1+, d1-, d2+, d2-, ..."""
    return [Generator(i, s) for i in range(1, strands) for s in (PLUS, MINUS)]


def random_word(strands: int, length: int, seed: int) -> BraidWord:
    if length < 0:
        raise BraidError(f"word length must be non-negative, got {length}")
    alphabet = signed_generators(strands) if strands >= 2 else []
    if not alphabet:
        raise BraidError(f"a braid needs at least 2 strands, got {strands}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(alphabet), size=length)
    return BraidWord(strands, tuple(alphabet[k] for k in picks))


def count_words(strands: int, length: int) -> int:
    """Number of distinct words of exactly ``length`` letters.

    The count is an exact Python integer, so it can never silently wrap.
    """
    if strands < 2:
        raise BraidError(f"a braid needs at least 2 strands, got {strands}")
    if length < 0:
        raise BraidError(f"word length must be non-negative, got {length}")
    return (2 * (strands - 1)) ** length


def iter_words(strands: int, length: int) -> Iterator[BraidWord]:
    alphabet = signed_generators(strands)
    for letters in itertools.product(alphabet, repeat=length):
        yield BraidWord(strands, letters)


_TEXT_RE = re.compile(r"m=(\d+);w=(.*)")
_LETTER_RE = re.compile(r"s(\d+)([+-])")


def format_word(w: BraidWord) -> str:
    body = ",".join(f"s{g.index - 1}{'+' if g.sign > 0 else '-'}" for g in w.letters)
    return f"m={w.strands};w={body}"


def parse_word(text: str) -> BraidWord:
    m = _TEXT_RE.fullmatch(text.strip())
    if m is None:
        raise BraidError(f"malformed braid word text: {text!r}")
    strands, body = int(m.group(1)), m.group(2)
    letters = []
    if body:
        for tok in body.split(","):
            lm = _LETTER_RE.fullmatch(tok)
            if lm is None:
                raise BraidError(f"malformed letter {tok!r} in {text!r}")
            letters.append((int(lm.group(1)) + 1, lm.group(2)))
    return make_word(strands, letters)
