"""Character-level alignment of ASR hypotheses against reference transcripts.

A hypothesis is aligned to its reference with a unit-cost Wagner-Fischer
matrix. Backtracing from the bottom-right cell yields an edit script of
delete / replace / insert instructions that turns the hypothesis into the
reference. Deleted and replaced hypothesis characters are ASR errors;
unedited characters inherit the disfluency annotation of the reference
character they align to.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import InvalidInputError

Span = tuple[int, int]


class OpKind(str, enum.Enum):
    DELETE = "delete"
    REPLACE = "replace"
    INSERT = "insert"


@dataclass(frozen=True)
class EditOp:
    """One edit instruction.

    ``hyp_index`` is the hypothesis character for delete/replace, and the
    insertion point (insert before that character) for insert.
    """

    kind: OpKind
    hyp_index: int
    ref_index: int | None = None
    char: str | None = None


@dataclass(frozen=True)
class EditScript:
    ops: tuple[EditOp, ...]
    distance: int

    def __post_init__(self):
        if self.distance != len(self.ops):
            raise InvalidInputError(
                f"distance {self.distance} != number of ops {len(self.ops)}")


@dataclass
class LabeledUtterance:
    utterance_id: str
    hypothesis: str
    reference: str
    error_mask: list[bool]
    disfluency_mask: list[bool]
    ref_disfluency_spans: list[Span] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "utterance_id": self.utterance_id,
            "hypothesis": self.hypothesis,
            "reference": self.reference,
            "error_mask": [int(f) for f in self.error_mask],
            "disfluency_mask": [int(f) for f in self.disfluency_mask],
            "ref_disfluency_spans": [list(s) for s in self.ref_disfluency_spans],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledUtterance":
        utt = cls(
            utterance_id=str(d["utterance_id"]),
            hypothesis=d["hypothesis"],
            reference=d["reference"],
            error_mask=[bool(x) for x in d["error_mask"]],
            disfluency_mask=[bool(x) for x in d["disfluency_mask"]],
            ref_disfluency_spans=[(int(s), int(e)) for s, e in d.get("ref_disfluency_spans", [])],
        )
        if not (len(utt.error_mask) == len(utt.disfluency_mask) == len(utt.hypothesis)):
            raise InvalidInputError(f"{utt.utterance_id}: mask lengths do not match hypothesis")
        return utt


def edit_matrix(hypothesis: str, reference: str) -> np.ndarray:
    """Unit-cost Levenshtein DP matrix of shape (len(hyp)+1, len(ref)+1).

    Cell (i, j) holds the distance from ``hypothesis[:i]`` to ``reference[:j]``.
    """
    n, m = len(hypothesis), len(reference)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    ref = np.array([ord(c) for c in reference], dtype=np.int64)
    cols = np.arange(1, m + 1)
    for i in range(1, n + 1):
        sub = d[i - 1, :-1] + (ref != ord(hypothesis[i - 1]))
        best = np.minimum(sub, d[i - 1, 1:] + 1)
        # the left-neighbour dependency is a running min of (best[k] - k) + j
        row = np.minimum.accumulate(np.concatenate(([i], best - cols)))
        d[i, 1:] = row[1:] + cols
    return d


def traverse(matrix: np.ndarray, hypothesis: str, reference: str) -> EditScript:
    """Backtrace an optimal edit script from the bottom-right cell.

    Ties prefer the diagonal (match/replace), then up (delete), then left
    (insert). Returned ops are ordered by hypothesis position.
    """
    n, m = len(hypothesis), len(reference)
    if matrix.shape != (n + 1, m + 1):
        raise InvalidInputError(
            f"matrix shape {matrix.shape} does not fit strings of length {n} and {m}")
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        cur = matrix[i, j]
        if i > 0 and j > 0:
            same = hypothesis[i - 1] == reference[j - 1]
            if matrix[i - 1, j - 1] + (0 if same else 1) == cur:
                if not same:
                    ops.append(EditOp(OpKind.REPLACE, i - 1, j - 1, reference[j - 1]))
                i, j = i - 1, j - 1
                continue
        if i > 0 and matrix[i - 1, j] + 1 == cur:
            ops.append(EditOp(OpKind.DELETE, i - 1))
            i -= 1
        elif j > 0 and matrix[i, j - 1] + 1 == cur:
            ops.append(EditOp(OpKind.INSERT, i, j - 1, reference[j - 1]))
            j -= 1
        else:
            raise InvalidInputError("matrix is not an edit matrix for these strings")
    ops.reverse()
    return EditScript(tuple(ops), len(ops))


def align(hypothesis: str, reference: str) -> EditScript:
    return traverse(edit_matrix(hypothesis, reference), hypothesis, reference)


def _walk(hypothesis: str, script: EditScript):
    """Yield (kind, hyp_index, char) in output order.

    kind is "match", "replace", "insert" or "delete"; this single walker backs
    both apply_script and the match alignment so the two can never disagree.
    """
    n = len(hypothesis)
    edits: dict[int, EditOp] = {}
    inserts: dict[int, list[EditOp]] = {}
    for op in script.ops:
        if op.kind is OpKind.INSERT:
            if not 0 <= op.hyp_index <= n:
                raise InvalidInputError(f"insert point {op.hyp_index} outside [0, {n}]")
            if op.char is None:
                raise InvalidInputError("insert op without a character")
            inserts.setdefault(op.hyp_index, []).append(op)
        else:
            if not 0 <= op.hyp_index < n:
                raise InvalidInputError(f"op index {op.hyp_index} outside [0, {n})")
            if op.hyp_index in edits:
                raise InvalidInputError(f"hypothesis index {op.hyp_index} edited twice")
            if op.kind is OpKind.REPLACE and op.char is None:
                raise InvalidInputError("replace op without a character")
            edits[op.hyp_index] = op
    for k in range(n + 1):
        for op in inserts.get(k, ()):
            yield "insert", k, op.char
        if k == n:
            break
        op = edits.get(k)
        if op is None:
            yield "match", k, hypothesis[k]
        elif op.kind is OpKind.REPLACE:
            yield "replace", k, op.char
        else:
            yield "delete", k, None


def apply_script(hypothesis: str, script: EditScript) -> str:
    return "".join(c for kind, _, c in _walk(hypothesis, script) if kind != "delete")


def mark_errors(hypothesis: str, script: EditScript) -> list[bool]:
    flags = [False] * len(hypothesis)
    for op in script.ops:
        if op.kind is OpKind.INSERT:
            if not 0 <= op.hyp_index <= len(hypothesis):
                raise InvalidInputError(f"insert point {op.hyp_index} out of range")
            continue
        if not 0 <= op.hyp_index < len(hypothesis):
            raise InvalidInputError(f"op index {op.hyp_index} out of range")
        flags[op.hyp_index] = True
    return flags


def match_alignment(hypothesis: str, script: EditScript) -> dict[int, int]:
    """Map each unedited hypothesis index to its reference index."""
    pairs = {}
    j = 0
    for kind, k, _ in _walk(hypothesis, script):
        if kind == "match":
            pairs[k] = j
        if kind != "delete":
            j += 1
    return pairs


def validate_spans(spans: Iterable[Sequence[int]], length: int) -> list[Span]:
    out = []
    prev_end = 0
    for span in spans:
        if len(span) != 2:
            raise InvalidInputError(f"span {span!r} is not a [start, end) pair")
        s, e = int(span[0]), int(span[1])
        if not 0 <= s <= e <= length:
            raise InvalidInputError(f"span [{s}, {e}) outside reference of length {length}")
        if s < prev_end:
            raise InvalidInputError(f"span [{s}, {e}) overlaps or is out of order")
        out.append((s, e))
        prev_end = e
    return out


def transfer_disfluencies(hypothesis: str, reference: str, script: EditScript,
                          spans: Iterable[Sequence[int]]) -> list[bool]:
    spans = validate_spans(spans, len(reference))
    in_span = [False] * len(reference)
    for s, e in spans:
        in_span[s:e] = [True] * (e - s)
    flags = [False] * len(hypothesis)
    for i, j in match_alignment(hypothesis, script).items():
        flags[i] = in_span[j]
    return flags


_WS = re.compile(r"\s")


def normalize_with_map(text: str, lowercase: bool = True) -> tuple[str, list[tuple[int, int]]]:
    """Lowercase and collapse whitespace, tracking where each char went.

    Returns the normalized text and, per original character, the
    ``[start, end)`` range it occupies in the output (empty when dropped).
    """
    out: list[str] = []
    where = []
    pending_space = False
    for c in text:
        if _WS.match(c):
            pending_space = bool(out)
            pos = len(out)
            where.append((pos, pos))
            continue
        if pending_space:
            out.append(" ")
            pending_space = False
        piece = c.lower() if lowercase else c
        start = len(out)
        out.extend(piece)
        where.append((start, len(out)))
    return "".join(out), where


def remap_spans(spans: Sequence[Span], where: list[tuple[int, int]]) -> list[Span]:
    remapped = []
    for s, e in spans:
        kept = [where[k] for k in range(s, e) if where[k][1] > where[k][0]]
        if kept:
            remapped.append((kept[0][0], kept[-1][1]))
    return remapped


def label_utterance(utterance_id: str, hypothesis: str, reference: str,
                    spans: Iterable[Sequence[int]] = (), normalize: bool = True,
                    lowercase: bool = True) -> LabeledUtterance:
    """Align one record and produce its error and disfluency masks."""
    spans = validate_spans(spans, len(reference))
    if normalize:
        hypothesis, _ = normalize_with_map(hypothesis, lowercase)
        reference, where = normalize_with_map(reference, lowercase)
        spans = remap_spans(spans, where)
    script = align(hypothesis, reference)
    return LabeledUtterance(
        utterance_id=utterance_id,
        hypothesis=hypothesis,
        reference=reference,
        error_mask=mark_errors(hypothesis, script),
        disfluency_mask=transfer_disfluencies(hypothesis, reference, script, spans),
        ref_disfluency_spans=spans,
    )


def parse_record(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise InvalidInputError(f"line {lineno}: expected a JSON object")
    for key in ("utterance_id", "reference", "hypothesis"):
        if key not in rec:
            raise InvalidInputError(f"line {lineno}: missing field {key!r}")
    if not isinstance(rec["reference"], str) or not isinstance(rec["hypothesis"], str):
        raise InvalidInputError(f"line {lineno}: reference and hypothesis must be strings")
    rec.setdefault("disfluency_spans", [])
    return rec


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield lineno, line


def label_corpus(path: str | Path, normalize: bool = True,
                 lowercase: bool = True) -> list[LabeledUtterance]:
    """Label every record of an ingestion JSONL file.

    All malformed lines are collected and reported together in one error.
    """
    labeled, problems = [], []
    for lineno, line in iter_jsonl(path):
        try:
            rec = parse_record(line, lineno)
            labeled.append(label_utterance(
                str(rec["utterance_id"]), rec["hypothesis"], rec["reference"],
                rec["disfluency_spans"], normalize=normalize, lowercase=lowercase))
        except InvalidInputError as exc:
            msg = str(exc)
            problems.append(msg if msg.startswith("line ") else f"line {lineno}: {msg}")
    if problems:
        raise InvalidInputError("; ".join(problems))
    return labeled


def write_labeled(labeled: Iterable[LabeledUtterance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt in labeled:
            fh.write(json.dumps(utt.to_dict(), ensure_ascii=False) + "\n")


def read_labeled(path: str | Path) -> list[LabeledUtterance]:
    out = []
    for lineno, line in iter_jsonl(path):
        try:
            out.append(LabeledUtterance.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InvalidInputError(f"line {lineno}: malformed labeled record ({exc})") from None
    return out
