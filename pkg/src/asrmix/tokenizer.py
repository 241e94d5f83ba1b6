"""Character-level BPE with offset tracking and mask-to-token projection.

Merges are learned inside whitespace-delimited words only. Every learned
subword also exists in a word-initial form carrying the ``▁`` prefix, so
token ids remember word boundaries and ``decode`` can restore spaces.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidInputError

WORD_MARK = "▁"
UNK_CHAR = "�"
SPECIAL_TOKENS = {"pad": "<pad>", "unk": "<unk>", "bos": "<s>", "eos": "</s>"}


def normalize(text: str) -> str:
    return " ".join(text.split())


def _words_with_offsets(text: str):
    pos = 0
    for word in text.split():
        start = text.index(word, pos)
        pos = start + len(word)
        yield word, start


def _merge_pair(symbols: list[str], a: str, b: str) -> list[str]:
    out = []
    k = 0
    while k < len(symbols):
        if k + 1 < len(symbols) and symbols[k] == a and symbols[k + 1] == b:
            out.append(a + b)
            k += 2
        else:
            out.append(symbols[k])
            k += 1
    return out


@dataclass
class BpeModel:
    vocab: list[str]
    merges: list[tuple[str, str]]
    special_ids: dict[str, int]
    _index: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, list[str]] = field(init=False, repr=False)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        self._index = {s: i for i, s in enumerate(self.vocab)}
        if len(self._index) != len(self.vocab):
            raise InvalidInputError("duplicate entries in vocabulary")
        self._ranks = {m: r for r, m in enumerate(self.merges)}
        self._cache = {}
        for name in SPECIAL_TOKENS:
            if name not in self.special_ids:
                raise InvalidInputError(f"missing special token id {name!r}")

    @property
    def pad_id(self) -> int:
        return self.special_ids["pad"]

    @property
    def unk_id(self) -> int:
        return self.special_ids["unk"]

    @property
    def alphabet(self) -> set[str]:
        return {s for s in self.vocab if len(s) == 1 and s not in (WORD_MARK, UNK_CHAR)}

    def token_id(self, symbol: str) -> int | None:
        return self._index.get(symbol)

    def _segment(self, piece: str) -> list[str]:
        cached = self._cache.get(piece)
        if cached is not None:
            return cached
        symbols = list(piece)
        while len(symbols) > 1:
            ranked = [(self._ranks.get(p, len(self._ranks)), p)
                      for p in zip(symbols, symbols[1:])]
            rank, pair = min(ranked)
            if rank == len(self._ranks):
                break
            symbols = _merge_pair(symbols, *pair)
        self._cache[piece] = symbols
        return symbols

    def encode(self, text: str) -> tuple[list[int], list[tuple[int, int]]]:
        """Token ids and per-token ``[start, end)`` character offsets."""
        ids: list[int] = []
        offsets: list[tuple[int, int]] = []
        known = self.alphabet
        for word, start in _words_with_offsets(text):
            # unknown characters split a word into independently merged runs
            runs, cur, cur_start = [], "", 0
            for k, c in enumerate(word):
                if c in known:
                    if not cur:
                        cur_start = k
                    cur += c
                else:
                    if cur:
                        runs.append((cur, cur_start))
                        cur = ""
                    runs.append((None, k))
            if cur:
                runs.append((cur, cur_start))
            for piece, k in runs:
                symbols = [UNK_CHAR] if piece is None else self._segment(piece)
                for sym in symbols:
                    first = k == 0
                    if piece is None:
                        tid = self._index[WORD_MARK + UNK_CHAR] if first else self.unk_id
                    else:
                        tid = self._index[WORD_MARK + sym if first else sym]
                    ids.append(tid)
                    offsets.append((start + k, start + k + len(sym)))
                    k += len(sym)
        return ids, offsets

    def decode(self, token_ids: Sequence[int]) -> str:
        parts = []
        for tid in token_ids:
            tid = int(tid)
            if not 0 <= tid < len(self.vocab):
                raise InvalidInputError(f"token id {tid} outside vocabulary of size {len(self.vocab)}")
            if tid == self.unk_id:
                parts.append(UNK_CHAR)
            elif tid in self.special_ids.values():
                continue
            else:
                parts.append(self.vocab[tid])
        return "".join(parts).replace(WORD_MARK, " ").lstrip(" ")

    def to_dict(self) -> dict:
        return {
            "vocab": list(self.vocab),
            "merges": [list(m) for m in self.merges],
            "special": dict(self.special_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BpeModel":
        return cls(vocab=list(d["vocab"]), merges=[tuple(m) for m in d["merges"]],
                   special_ids={k: int(v) for k, v in d["special"].items()})

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "BpeModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def train_bpe(corpus: Iterable[str], vocab_size: int) -> BpeModel:
    """Learn merges greedily by pair frequency.

    ``vocab_size`` bounds the number of learned symbols (characters plus
    merges, before word-initial variants and specials are added). Merging
    stops early once no pair occurs more than once. Equal-frequency pairs
    are taken in lexicographic order.
    """
    word_freq: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        # reserved symbols are never learned; encode maps them to unk
        word_freq.update(text.replace(WORD_MARK, " ").replace(UNK_CHAR, " ").split())
    if not n_texts or not word_freq:
        raise InvalidInputError("cannot train a tokenizer on an empty corpus")
    chars = sorted({c for w in word_freq for c in w})
    if vocab_size < len(chars):
        raise InvalidInputError(
            f"vocab_size {vocab_size} smaller than the {len(chars)} distinct characters")

    words = {w: list(w) for w in word_freq}
    symbols = list(chars)
    merges: list[tuple[str, str]] = []
    while len(symbols) < vocab_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, syms in words.items():
            f = word_freq[w]
            for p in zip(syms, syms[1:]):
                pairs[p] += f
        if not pairs:
            break
        pair, freq = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if freq < 2:
            break
        merges.append(pair)
        symbols.append(pair[0] + pair[1])
        for w, syms in words.items():
            if len(syms) > 1:
                words[w] = _merge_pair(syms, *pair)

    specials = list(SPECIAL_TOKENS.values())
    learned = [s for s in dict.fromkeys(symbols)]
    vocab = specials + learned + [WORD_MARK + s for s in learned] + [WORD_MARK + UNK_CHAR]
    special_ids = {name: specials.index(tok) for name, tok in SPECIAL_TOKENS.items()}
    return BpeModel(vocab=vocab, merges=merges, special_ids=special_ids)


def project_labels(offsets: Sequence[Sequence[int]], char_mask: Sequence[bool]) -> list[int]:
    """OR-reduce a character mask over each token's offsets."""
    labels = []
    n = len(char_mask)
    for s, e in offsets:
        if not 0 <= s <= e <= n:
            raise InvalidInputError(f"offset [{s}, {e}) outside mask of length {n}")
        labels.append(int(any(char_mask[s:e])))
    return labels


@dataclass
class TokenizedExample:
    utterance_id: str
    token_ids: list[int]
    offsets: list[tuple[int, int]]
    error_labels: list[int]
    disfluency_flags: list[int]

    def __len__(self):
        return len(self.token_ids)

    @property
    def pad_mask(self) -> list[bool]:
        # unpadded on disk; padding happens at batching time
        return [True] * len(self.token_ids)

    def to_dict(self) -> dict:
        return {
            "utterance_id": self.utterance_id,
            "token_ids": self.token_ids,
            "offsets": [list(o) for o in self.offsets],
            "error_labels": self.error_labels,
            "disfluency_flags": self.disfluency_flags,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizedExample":
        ex = cls(str(d["utterance_id"]), [int(t) for t in d["token_ids"]],
                 [(int(s), int(e)) for s, e in d["offsets"]],
                 [int(x) for x in d["error_labels"]], [int(x) for x in d["disfluency_flags"]])
        if not (len(ex.token_ids) == len(ex.offsets) == len(ex.error_labels)
                == len(ex.disfluency_flags)):
            raise InvalidInputError(f"{ex.utterance_id}: sequence lengths differ")
        return ex


def tokenize_utterance(model: BpeModel, utt, max_len: int | None = None) -> TokenizedExample:
    ids, offsets = model.encode(utt.hypothesis)
    if max_len is not None:
        ids, offsets = ids[:max_len], offsets[:max_len]
    return TokenizedExample(
        utterance_id=utt.utterance_id,
        token_ids=ids,
        offsets=offsets,
        error_labels=project_labels(offsets, utt.error_mask),
        disfluency_flags=project_labels(offsets, utt.disfluency_mask),
    )


def write_tokenized(examples: Iterable[TokenizedExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def read_tokenized(path: str | Path) -> list[TokenizedExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TokenizedExample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InvalidInputError(f"line {lineno}: malformed tokenized record ({exc})") from None
    return out
