"""Synthetic disfluent speech transcripts with a character-level ASR channel.

Fluent sentences come from a small slot-filling grammar. Disfluencies
(fillers, repetitions, false starts) are inserted as whole words and their
character spans recorded. The hypothesis is the reference passed through a
noisy channel that substitutes, deletes and inserts non-space characters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InvalidConfigError

FILLERS = ("um", "uh", "like")

SLOTS = {
    "subj": ("i", "we", "you", "they", "she", "he", "my brother", "our team", "the doctor",
             "your friend", "the teacher", "my mother", "the manager", "everyone"),
    "verb": ("want", "need", "bought", "found", "saw", "took", "made", "sold", "fixed",
             "cleaned", "ordered", "brought", "moved", "painted", "checked", "opened"),
    "verb_inf": ("buy", "find", "see", "take", "make", "sell", "fix", "clean", "order",
                 "bring", "move", "paint", "check", "open", "visit", "call"),
    "obj": ("tea", "the car", "a new phone", "some bread", "the house", "the report",
            "a ticket", "the window", "my keys", "the garden", "the fridge", "a letter",
            "the kitchen", "coffee", "the bike", "the door", "the laptop", "dinner"),
    "time": ("today", "yesterday", "tomorrow", "last week", "this morning", "tonight",
             "on monday", "after work", "next year", "every day"),
    "place": ("at home", "in town", "at the office", "downtown", "near the station",
              "at the market", "in the park", "at school"),
    "adj": ("good", "great", "cheap", "broken", "expensive", "small", "old", "clean",
            "nice", "strange"),
    "aux": ("will", "can", "should", "might", "could", "must"),
    "think": ("think", "guess", "believe", "know", "hope"),
}

TEMPLATES = (
    "{subj} {verb} {obj}",
    "{subj} {verb} {obj} {time}",
    "{subj} {verb} {obj} {place}",
    "{subj} {verb} {obj} {place} {time}",
    "{subj} {aux} {verb_inf} {obj}",
    "{subj} {aux} {verb_inf} {obj} {time}",
    "{subj} {aux} {verb_inf} {obj} {place}",
    "{subj} {think} {subj} {verb} {obj}",
    "{subj} {think} {subj} {aux} {verb_inf} {obj}",
    "{subj} {think} {obj} is {adj}",
    "{obj} is {adj}",
    "{obj} was {adj} {time}",
    "{obj} looks {adj}",
    "{subj} said {obj} is {adj}",
    "{subj} want to {verb_inf} {obj}",
    "{subj} need to {verb_inf} {obj} {time}",
    "{subj} tried to {verb_inf} {obj}",
    "{subj} forgot to {verb_inf} {obj}",
    "{subj} have to {verb_inf} {obj} {place}",
    "can you {verb_inf} {obj}",
    "can you {verb_inf} {obj} {time}",
    "could we {verb_inf} {obj} {place}",
    "please {verb_inf} {obj}",
    "please {verb_inf} {obj} {time}",
    "let us {verb_inf} {obj}",
    "did {subj} {verb_inf} {obj}",
    "did {subj} {verb_inf} {obj} {time}",
    "where did {subj} {verb_inf} {obj}",
    "why did {subj} {verb_inf} {obj}",
    "when can {subj} {verb_inf} {obj}",
    "{time} {subj} {verb} {obj}",
    "{time} {subj} {aux} {verb_inf} {obj}",
    "{place} {subj} {verb} {obj}",
    "{subj} {verb} {obj} and {obj}",
    "{subj} {verb} {obj} but {obj} is {adj}",
    "{subj} {verb} {obj} because it was {adj}",
    "{subj} {aux} {verb_inf} {obj} if it is {adj}",
    "i am sure {subj} {verb} {obj}",
    "maybe {subj} {aux} {verb_inf} {obj}",
    "so {subj} {verb} {obj} {time}",
    "and then {subj} {verb} {obj}",
    "{subj} never {verb} {obj}",
    "{subj} already {verb} {obj}",
    "{subj} really {verb} {obj}",
    "{subj} {verb} {obj} again",
    "{subj} {verb} {obj} {time} and {verb} {obj} {time}",
    "the {adj} one is {place}",
    "it was {adj} {place}",
    "we should {verb_inf} {obj} before {subj} {verb_inf} {obj}",
    "{subj} {aux} not {verb_inf} {obj} {time}",
)

VOWELS = "aeiou"
_CONSONANT_PAIRS = ("bp", "dt", "gk", "fv", "sz", "mn", "lr", "cs", "wv", "jg", "hn", "xk",
                    "qk", "yi")
CONFUSABLE: dict[str, str] = {}
for _a, _b in _CONSONANT_PAIRS:
    CONFUSABLE.setdefault(_a, "")
    CONFUSABLE.setdefault(_b, "")
    CONFUSABLE[_a] += _b
    CONFUSABLE[_b] += _a
for _v in VOWELS:
    CONFUSABLE[_v] = CONFUSABLE.get(_v, "") + VOWELS.replace(_v, "")
LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class GenConfig:
    n_utterances: int = 2000
    disfluency_rate: float = 0.8
    filler_prob: float = 0.5
    repetition_prob: float = 0.3
    false_start_prob: float = 0.2
    sub_rate: float = 0.04
    del_rate: float = 0.02
    ins_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_utterances < 0:
            raise InvalidConfigError("n_utterances must be >= 0")
        if self.disfluency_rate < 0:
            raise InvalidConfigError("disfluency_rate must be >= 0")
        probs = (self.filler_prob, self.repetition_prob, self.false_start_prob,
                 self.sub_rate, self.del_rate, self.ins_rate)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise InvalidConfigError("probabilities must lie in [0, 1]")
        if abs(self.filler_prob + self.repetition_prob + self.false_start_prob - 1.0) > 1e-9:
            raise InvalidConfigError("disfluency category mix must sum to 1")
        if self.sub_rate + self.del_rate + self.ins_rate > 1.0:
            raise InvalidConfigError("ASR noise rates must sum to at most 1")


@dataclass(frozen=True)
class SyntheticUtterance:
    utterance_id: str
    reference: str
    disfluency_spans: list[tuple[int, int]]
    hypothesis: str

    def to_dict(self) -> dict:
        return {"utterance_id": self.utterance_id, "reference": self.reference,
                "hypothesis": self.hypothesis,
                "disfluency_spans": [list(s) for s in self.disfluency_spans]}


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def generate_fluent(rng: np.random.Generator, templates=TEMPLATES, slots=SLOTS) -> str:
    template = _pick(rng, templates)
    out = []
    for chunk in template.split("{"):
        if "}" in chunk:
            name, rest = chunk.split("}", 1)
            out.append(_pick(rng, slots[name]) + rest)
        else:
            out.append(chunk)
    return " ".join("".join(out).split())


def apply_disfluencies(words: list[str], edits) -> tuple[str, list[tuple[int, int]]]:
    """Insert disfluent words and return the reference with its spans.

    ``edits`` is a list of ``(kind, position, payload)`` with ``kind`` one of
    ``filler`` (payload is the filler word, inserted before ``words[position]``),
    ``repetition`` (``words[position]`` is said twice) or ``false_start``
    (payload is a prefix length: ``i th- i think`` for ``i think``). Positions
    refer to the fluent word list.
    """
    before: dict[int, list[list[str]]] = {}
    for kind, pos, payload in edits:
        if not 0 <= pos <= len(words):
            raise IndexError(f"position {pos} outside sentence of {len(words)} words")
        if kind == "filler":
            inserted = [payload]
        elif kind == "repetition":
            inserted = [words[pos]]
        elif kind == "false_start":
            target = words[pos]
            frag = target[:max(1, min(int(payload), len(target) - 1))] + "-"
            inserted = [frag] + ([words[pos - 1]] if pos > 0 else [])
        else:
            raise ValueError(f"unknown disfluency kind {kind!r}")
        before.setdefault(pos, []).append(inserted)

    tokens: list[tuple[str, bool]] = []
    for k in range(len(words) + 1):
        for group in before.get(k, ()):
            tokens.extend((w, True) for w in group)
        if k < len(words):
            tokens.append((words[k], False))

    text, spans = [], []
    cursor = 0
    open_start = None
    for n, (word, disfluent) in enumerate(tokens):
        if n:
            cursor += 1
        if disfluent and open_start is None:
            open_start = cursor
        if not disfluent and open_start is not None:
            spans.append((open_start, cursor - 1))
            open_start = None
        text.append(word)
        cursor += len(word)
    if open_start is not None:
        spans.append((open_start, cursor))
    return " ".join(text), spans


def inject_disfluencies(sentence: str, cfg: GenConfig, rng: np.random.Generator):
    words = sentence.split()
    n = int(rng.poisson(cfg.disfluency_rate)) if cfg.disfluency_rate > 0 else 0
    if n == 0 or not words:
        return sentence, []
    mix = np.array([cfg.filler_prob, cfg.repetition_prob, cfg.false_start_prob])
    edits = []
    for _ in range(n):
        kind = ("filler", "repetition", "false_start")[int(rng.choice(3, p=mix))]
        if kind == "filler":
            edits.append((kind, int(rng.integers(len(words) + 1)), _pick(rng, FILLERS)))
        elif kind == "repetition":
            edits.append((kind, int(rng.integers(len(words))), None))
        else:
            pos = int(rng.integers(len(words)))
            if len(words[pos]) < 2:
                edits.append(("repetition", pos, None))
            else:
                edits.append((kind, pos, int(rng.integers(1, len(words[pos])))))
    return apply_disfluencies(words, edits)


def simulate_asr(reference: str, cfg: GenConfig, rng: np.random.Generator) -> str:
    """Per non-space character: substitute, delete, or keep and insert after."""
    out = []
    t_sub = cfg.sub_rate
    t_del = t_sub + cfg.del_rate
    t_ins = t_del + cfg.ins_rate
    for c in reference:
        if c.isspace():
            out.append(c)
            continue
        u = rng.random()
        if u < t_sub:
            out.append(_pick(rng, CONFUSABLE.get(c, LETTERS.replace(c, ""))))
        elif u < t_del:
            continue
        elif u < t_ins:
            out.append(c)
            out.append(_pick(rng, LETTERS))
        else:
            out.append(c)
    return "".join(out)


def generate_utterance(cfg: GenConfig, index: int) -> SyntheticUtterance:
    rng = np.random.default_rng([cfg.seed, index])
    reference, spans = inject_disfluencies(generate_fluent(rng), cfg, rng)
    return SyntheticUtterance(f"syn-{index:06d}", reference, spans,
                              simulate_asr(reference, cfg, rng))


def iter_corpus(cfg: GenConfig) -> Iterator[SyntheticUtterance]:
    for i in range(cfg.n_utterances):
        yield generate_utterance(cfg, i)


def generate_corpus(cfg: GenConfig, path: str | Path) -> Path:
    """Write the corpus as ingestion JSONL and return the path."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt in iter_corpus(cfg):
            fh.write(json.dumps(utt.to_dict(), ensure_ascii=False) + "\n")
    return path


def config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)
