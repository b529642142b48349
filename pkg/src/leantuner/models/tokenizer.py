"""Tokenizers: raw byte fallback and GPT-2 byte-pair encoding.

The byte tokenizer maps text to its UTF-8 bytes (vocab size 256) and back;
round-trips are exact for valid UTF-8. The BPE tokenizer consumes the
published GPT-2 asset pair (vocab.json, merges.txt) and applies merges
highest-priority first within the standard pre-tokenization split.
"""

from __future__ import annotations

import json
from pathlib import Path

import regex

from ..errors import BadRecord

# The published GPT-2 pre-tokenization pattern.
_PRETOKEN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


def _bytes_to_unicode() -> dict:
    """Invertible byte -> printable unicode map (GPT-2 construction)."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


class ByteTokenizer:
    vocab_size = 256

    def encode(self, text: str) -> list:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


class BPETokenizer:
    def __init__(self, vocab: dict, merges: list):
        self.vocab = dict(vocab)
        self.inverse = {v: k for k, v in self.vocab.items()}
        self.ranks = {tuple(pair): i for i, pair in enumerate(merges)}
        self.byte_map = _bytes_to_unicode()
        self.byte_unmap = {v: k for k, v in self.byte_map.items()}
        self._cache: dict = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def from_files(cls, vocab_path, merges_path) -> "BPETokenizer":
        with open(vocab_path, encoding="utf-8") as f:
            vocab = json.load(f)
        merges = []
        with open(merges_path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split(" ")
                if len(parts) != 2:
                    raise BadRecord(f"{merges_path}:{lineno}: expected 'left right'")
                merges.append((parts[0], parts[1]))
        return cls(vocab, merges)

    def _merge_word(self, word: tuple) -> tuple:
        """Repeatedly apply the highest-priority (lowest-rank) merge."""
        while len(word) > 1:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            merged = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and (word[i], word[i + 1]) == best:
                    merged.append(word[i] + word[i + 1])
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)
        return word

    def encode(self, text: str) -> list:
        ids = []
        for chunk in _PRETOKEN.findall(text):
            mapped = "".join(self.byte_map[b] for b in chunk.encode("utf-8"))
            key = mapped
            tokens = self._cache.get(key)
            if tokens is None:
                tokens = self._merge_word(tuple(mapped))
                self._cache[key] = tokens
            for tok in tokens:
                try:
                    ids.append(self.vocab[tok])
                except KeyError:
                    raise BadRecord(f"token {tok!r} missing from vocab") from None
        return ids

    def decode(self, ids) -> str:
        chars = "".join(self.inverse.get(int(i), "") for i in ids)
        raw = bytes(self.byte_unmap[c] for c in chars)
        return raw.decode("utf-8", errors="replace")


def load_tokenizer(spec: str):
    """\"byte\" for the byte fallback, or a directory with vocab/merges."""
    if spec == "byte":
        return ByteTokenizer()
    root = Path(spec)
    vocab = root / "vocab.json"
    merges = root / "merges.txt"
    if not vocab.exists() or not merges.exists():
        raise BadRecord(f"{spec}: need vocab.json and merges.txt for BPE mode")
    return BPETokenizer.from_files(vocab, merges)
