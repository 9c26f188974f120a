"""Parsing of tagged model outputs: think block, answer list, triple mentions."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable

from .kg import KnowledgeGraph, Triple, contains, normalize

__all__ = [
    "Trace",
    "parse_trace",
    "count_tokens",
    "extract_mentioned_triples",
    "extract_tuple_mentions",
    "load_traces",
]

_TAG = re.compile(r"</?(think|answer)>")
_TUPLE = re.compile(r"\(([^(),]+),([^(),]+),([^(),]+)\)")


@dataclass(frozen=True)
class Trace:
    raw: str
    think: str | None
    answers: frozenset[str] | None
    format_valid: bool
    token_count: int

    @property
    def predicted(self) -> frozenset[str]:
        """Answer set as seen by reward consumers (empty when malformed)."""
        if not self.format_valid or self.answers is None:
            return frozenset()
        return self.answers


def count_tokens(raw: str) -> int:
    return len(raw.split())


def _parse_answer_block(content: str) -> frozenset[str]:
    try:
        value = json.loads(content)
    except (json.JSONDecodeError, ValueError):
        value = None
    if isinstance(value, list):
        items = (v if isinstance(v, str) else json.dumps(v) for v in value)
        return frozenset(a for a in map(normalize, items) if a)
    if isinstance(value, str):
        content = value
    fallback = normalize(content)
    return frozenset([fallback]) if fallback else frozenset()


def parse_trace(raw: str) -> Trace:
    """Split ``raw`` into think text and answer set.

    Valid format is exactly one ``<think>...</think>`` followed by exactly one
    ``<answer>...</answer>``; any other tag layout gives ``format_valid=False``.
    Answer content is read as a JSON list of strings; other content becomes a
    single answer.
    """
    raw = raw if isinstance(raw, str) else str(raw)
    tags = [(m.group(0), m.start(), m.end()) for m in _TAG.finditer(raw)]
    ntok = count_tokens(raw)
    names = [t[0] for t in tags]
    if names != ["<think>", "</think>", "<answer>", "</answer>"]:
        return Trace(raw, None, None, False, ntok)
    (_, _, t0), (_, t1, _), (_, _, a0), (_, a1, _) = tags
    think = raw[t0:t1]
    answers = _parse_answer_block(raw[a0:a1].strip())
    return Trace(raw, think, answers, True, ntok)


def extract_mentioned_triples(think: str | None, candidates: Iterable[Triple]) -> set[Triple]:
    """Candidates whose subject, relation and object all occur in ``think``.

    Plain substring matching on the normalized text, no word boundaries.
    """
    if not think:
        return set()
    text = normalize(think)
    return {
        t for t in candidates
        if t.subject in text and t.relation in text and t.object in text
    }


def extract_tuple_mentions(think: str | None, g: KnowledgeGraph) -> set[Triple]:
    """Diagnostic: literal ``(a, b, c)`` spans that are triples of ``g``."""
    if not think:
        return set()
    found = set()
    for m in _TUPLE.finditer(think):
        cand = tuple(part.strip() for part in m.groups())
        if all(normalize(c) for c in cand) and contains(g, cand):
            found.add(Triple(*cand))
    return found


def load_traces(source) -> list[tuple[str, str]]:
    """Read a trace JSONL file into ``(id, text)`` pairs."""
    from .kg import GraphFormatError, _open_text

    fh, owned = _open_text(source)
    out = []
    try:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append((str(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GraphFormatError(f"bad trace record ({exc})", i) from None
    finally:
        if owned:
            fh.close()
    return out
