"""Input parsing and validation for pair and SFT corpus files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


class DataError(Exception):
    """Malformed or missing training input."""


@dataclass(frozen=True)
class PairExample:
    pair_id: str
    prompt: str
    chosen: str
    rejected: str
    chosen_spans: tuple[tuple[int, int], ...]
    rejected_spans: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class SftExample:
    prompt: str
    target: str
    spans: tuple[tuple[int, int], ...]


def _read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file {path} does not exist")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
        if not isinstance(row, dict):
            raise DataError(f"{path}:{lineno}: row is not an object")
        rows.append(row)
    if not rows:
        raise DataError(f"input file {path} has no rows")
    return rows


def _spans(raw, text: str, where: str) -> tuple[tuple[int, int], ...]:
    if not isinstance(raw, list):
        raise DataError(f"{where}: mask spans must be a list")
    out = []
    for span in raw:
        if (not isinstance(span, (list, tuple)) or len(span) != 2
                or not all(isinstance(v, int) for v in span)):
            raise DataError(f"{where}: span {span!r} is not an [start, end] pair")
        start, end = span
        if not 0 <= start <= end <= len(text):
            raise DataError(f"{where}: span {span!r} outside text of length {len(text)}")
        out.append((start, end))
    return tuple(out)


def _text_field(row: dict, key: str, where: str) -> str:
    value = row.get(key)
    if not isinstance(value, str) or not value:
        raise DataError(f"{where}: field {key!r} must be a non-empty string")
    return value


def load_pairs(path) -> list[PairExample]:
    """Parse a preference-pair JSONL file, rejecting malformed rows."""
    out = []
    for i, row in enumerate(_read_rows(path)):
        where = f"{path} pair row {i}"
        chosen = _text_field(row, "chosen", where)
        rejected = _text_field(row, "rejected", where)
        masks = row.get("mask_spans")
        if not isinstance(masks, dict):
            raise DataError(f"{where}: field 'mask_spans' must be an object")
        prompt = row.get("prompt", "")
        if not isinstance(prompt, str):
            raise DataError(f"{where}: field 'prompt' must be a string")
        out.append(PairExample(
            pair_id=str(row.get("pair_id", f"row-{i}")),
            prompt=prompt, chosen=chosen, rejected=rejected,
            chosen_spans=_spans(masks.get("chosen", []), chosen, where),
            rejected_spans=_spans(masks.get("rejected", []), rejected, where)))
    return out


def load_sft_corpus(path) -> list[SftExample]:
    """Parse a (prompt, target) JSONL corpus with optional mask spans."""
    out = []
    for i, row in enumerate(_read_rows(path)):
        where = f"{path} corpus row {i}"
        target = _text_field(row, "target", where)
        prompt = row.get("prompt", "")
        if not isinstance(prompt, str):
            raise DataError(f"{where}: field 'prompt' must be a string")
        out.append(SftExample(prompt=prompt, target=target,
                              spans=_spans(row.get("mask_spans", []), target, where)))
    return out
