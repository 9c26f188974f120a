"""Knowledge-graph core: triples, graphs, reasoning paths and task instances."""
from __future__ import annotations

import io
import json
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator, Sequence

__all__ = [
    "normalize",
    "Triple",
    "KnowledgeGraph",
    "ReasoningPath",
    "TaskInstance",
    "GraphFormatError",
    "load_graph",
    "dump_graph",
    "neighbors",
    "contains",
    "load_tasks",
    "dump_tasks",
    "task_to_dict",
    "task_from_dict",
]

_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, trim and collapse internal whitespace runs to one space."""
    return _WS.sub(" ", str(text)).strip().lower()


class GraphFormatError(ValueError):
    """Raised when a triple or task file does not parse."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, order=True)
class Triple:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        for name in ("subject", "relation", "object"):
            value = normalize(getattr(self, name))
            if not value:
                raise ValueError(f"triple {name} is empty")
            object.__setattr__(self, name, value)

    def as_list(self) -> list[str]:
        return [self.subject, self.relation, self.object]

    def __str__(self) -> str:
        return f"({self.subject}, {self.relation}, {self.object})"


class KnowledgeGraph:
    """Immutable set of triples with out/in adjacency indices.

    Parallel edges (same entity pair, different relations) are kept.
    """

    __slots__ = ("_triples", "_out", "_in", "_entities", "_relations")

    def __init__(self, triples: Iterable[Triple | Sequence[str]]):
        ts: set[Triple] = set()
        for t in triples:
            ts.add(t if isinstance(t, Triple) else Triple(*t))
        out: dict[str, list[tuple[str, str]]] = defaultdict(list)
        inc: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for t in ts:
            out[t.subject].append((t.relation, t.object))
            inc[t.object].append((t.relation, t.subject))
        self._triples = frozenset(ts)
        self._out = {e: tuple(sorted(v)) for e, v in out.items()}
        self._in = {e: tuple(sorted(v)) for e, v in inc.items()}
        self._entities = frozenset(out) | frozenset(inc)
        self._relations = frozenset(t.relation for t in ts)

    @property
    def triples(self) -> frozenset[Triple]:
        return self._triples

    @property
    def entities(self) -> frozenset[str]:
        return self._entities

    @property
    def relations(self) -> frozenset[str]:
        return self._relations

    def out_edges(self, entity: str) -> tuple[tuple[str, str], ...]:
        return self._out.get(normalize(entity), ())

    def in_edges(self, entity: str) -> tuple[tuple[str, str], ...]:
        return self._in.get(normalize(entity), ())

    def neighbors(self, entity: str, direction: str = "out") -> list[tuple[str, str, str]]:
        return neighbors(self, entity, direction)

    def __contains__(self, item) -> bool:
        if isinstance(item, Triple):
            return item in self._triples
        return normalize(item) in self._entities

    def __len__(self) -> int:
        return len(self._triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(sorted(self._triples))

    def __eq__(self, other) -> bool:
        return isinstance(other, KnowledgeGraph) and self._triples == other._triples

    def __hash__(self) -> int:
        return hash(self._triples)

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph(n_triples={len(self._triples)}, "
            f"n_entities={len(self._entities)}, n_relations={len(self._relations)})"
        )

    def stats(self) -> dict[str, int]:
        return {
            "n_triples": len(self._triples),
            "n_entities": len(self._entities),
            "n_relations": len(self._relations),
        }


def neighbors(g: KnowledgeGraph, e: str, direction: str = "out") -> list[tuple[str, str, str]]:
    """Adjacency entries of ``e`` as ``(relation, neighbor, direction)``.

    Sorted by relation, then neighbor, then direction. Unknown entities give ``[]``.
    """
    if direction not in ("out", "in", "both"):
        raise ValueError(f"direction must be out, in or both, got {direction!r}")
    rows: list[tuple[str, str, str]] = []
    if direction in ("out", "both"):
        rows.extend((r, o, "out") for r, o in g.out_edges(e))
    if direction in ("in", "both"):
        rows.extend((r, s, "in") for r, s in g.in_edges(e))
    rows.sort()
    return rows


def contains(g: KnowledgeGraph, t: Triple | Sequence[str]) -> bool:
    try:
        t = t if isinstance(t, Triple) else Triple(*t)
    except (ValueError, TypeError):
        return False
    return t in g.triples


def _parse_triple_line(line: str, fmt: str, lineno: int) -> Triple:
    if fmt == "tsv":
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) != 3:
            raise GraphFormatError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
    else:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict) or not all(isinstance(obj.get(k), str) for k in "sro"):
            raise GraphFormatError('expected an object with string keys "s", "r", "o"', lineno)
        fields = [obj["s"], obj["r"], obj["o"]]
    try:
        return Triple(*fields)
    except ValueError as exc:
        raise GraphFormatError(str(exc), lineno) from None


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, encoding="utf-8"), True
    return source, False


def _guess_format(source) -> str:
    name = str(source) if isinstance(source, (str, os.PathLike)) else getattr(source, "name", "")
    return "tsv" if str(name).endswith((".tsv", ".txt")) else "jsonl"


def load_graph(source, format: str | None = None) -> KnowledgeGraph:
    """Read a TSV or JSONL triple file (path or text handle).

    Blank lines are skipped; duplicates collapse. ``format`` defaults to the
    file suffix (``.tsv``/``.txt`` -> tsv, anything else jsonl).
    """
    fmt = format or _guess_format(source)
    if fmt not in ("tsv", "jsonl"):
        raise ValueError(f"unknown graph format {fmt!r}")
    fh, owned = _open_text(source)
    try:
        triples = [
            _parse_triple_line(line, fmt, i)
            for i, line in enumerate(fh, start=1)
            if line.strip()
        ]
    finally:
        if owned:
            fh.close()
    if not triples:
        raise GraphFormatError("empty graph")
    return KnowledgeGraph(triples)


def dump_graph(g: KnowledgeGraph, dest, format: str = "jsonl") -> None:
    """Write triples in sorted order (byte-stable for equal graphs)."""
    owned = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8") if owned else dest
    try:
        for t in g:
            if format == "tsv":
                fh.write(f"{t.subject}\t{t.relation}\t{t.object}\n")
            else:
                fh.write(json.dumps({"s": t.subject, "r": t.relation, "o": t.object}) + "\n")
    finally:
        if owned:
            fh.close()


@dataclass(frozen=True)
class ReasoningPath:
    """Chain of triples from ``start`` to ``end``.

    ``inverse[i]`` marks a step walked object -> subject; the stored triple is
    always the graph's own (subject, relation, object).
    """

    steps: tuple[Triple, ...]
    start: str
    end: str
    inverse: tuple[bool, ...] = ()

    def __post_init__(self):
        steps = tuple(s if isinstance(s, Triple) else Triple(*s) for s in self.steps)
        inverse = tuple(bool(x) for x in self.inverse) or (False,) * len(steps)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "inverse", inverse)
        object.__setattr__(self, "start", normalize(self.start))
        object.__setattr__(self, "end", normalize(self.end))
        if len(inverse) != len(steps):
            raise ValueError("inverse flags must match steps")
        cur = self.start
        for i, (t, inv) in enumerate(zip(steps, inverse)):
            head, tail = (t.object, t.subject) if inv else (t.subject, t.object)
            if head != cur:
                raise ValueError(f"step {i} starts at {head!r}, expected {cur!r}")
            cur = tail
        if cur != self.end:
            raise ValueError(f"path ends at {cur!r}, expected {self.end!r}")

    @classmethod
    def from_triples(cls, triples: Sequence[Triple | Sequence[str]], start: str | None = None) -> "ReasoningPath":
        """Infer step orientations from chain connectivity.

        Without ``start`` the first step is taken forward unless only its
        inverse connects to the second step.
        """
        steps = [t if isinstance(t, Triple) else Triple(*t) for t in triples]
        if not steps:
            if start is None:
                raise ValueError("empty path needs an explicit start")
            return cls((), start, start)
        if start is None:
            first = steps[0]
            start = first.subject
            if len(steps) > 1 and first.object not in (steps[1].subject, steps[1].object) and first.subject in (
                steps[1].subject,
                steps[1].object,
            ):
                start = first.object
        cur = normalize(start)
        inverse = []
        for i, t in enumerate(steps):
            if t.subject == cur:
                inverse.append(False)
                cur = t.object
            elif t.object == cur:
                inverse.append(True)
                cur = t.subject
            else:
                raise ValueError(f"triple {i} {t} does not connect to {cur!r}")
        return cls(tuple(steps), start, cur, tuple(inverse))

    def __len__(self) -> int:
        return len(self.steps)

    def entities(self) -> list[str]:
        out = [self.start]
        for t, inv in zip(self.steps, self.inverse):
            out.append(t.subject if inv else t.object)
        return out

    def key(self) -> str:
        """Canonical serialization, used for caching and de-duplication."""
        parts = [self.start]
        for t, inv in zip(self.steps, self.inverse):
            parts.append(("<-" if inv else "->") + f"{t.relation}->{t.subject if inv else t.object}")
        return "|".join(parts)

    def __str__(self) -> str:
        if not self.steps:
            return self.start
        out = [self.start]
        for t, inv in zip(self.steps, self.inverse):
            nxt = t.subject if inv else t.object
            out.append(f" -[{t.relation}{'^-1' if inv else ''}]-> {nxt}")
        return "".join(out)


@dataclass(frozen=True)
class TaskInstance:
    id: str
    question: str
    topic_entities: tuple[str, ...]
    gold_answers: frozenset[str]
    gold_paths: tuple[ReasoningPath, ...] = ()
    subgraph: KnowledgeGraph | None = None
    labels: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        topics = tuple(normalize(e) for e in self.topic_entities)
        answers = frozenset(a for a in (normalize(x) for x in self.gold_answers) if a)
        if not any(topics):
            raise ValueError(f"task {self.id!r}: topic_entities must be non-empty")
        if not answers:
            raise ValueError(f"task {self.id!r}: gold answers must be non-empty")
        object.__setattr__(self, "topic_entities", topics)
        object.__setattr__(self, "gold_answers", answers)
        object.__setattr__(self, "gold_paths", tuple(self.gold_paths))
        for p in self.gold_paths:
            if p.start not in topics or p.end not in answers:
                raise ValueError(f"task {self.id!r}: gold path {p} must run from a topic entity to an answer")

    def gold_triples(self) -> frozenset[Triple]:
        return frozenset(t for p in self.gold_paths for t in p.steps)

    def with_paths(self, paths: Iterable[ReasoningPath]) -> "TaskInstance":
        return replace(self, gold_paths=tuple(paths))


def task_to_dict(task: TaskInstance) -> dict:
    d = {
        "id": task.id,
        "question": task.question,
        "topic_entities": list(task.topic_entities),
        "answers": sorted(task.gold_answers),
    }
    if task.gold_paths:
        d["gold_paths"] = [[t.as_list() for t in p.steps] for p in task.gold_paths]
    if task.subgraph is not None:
        d["subgraph"] = [t.as_list() for t in task.subgraph]
    if task.labels:
        d["labels"] = dict(task.labels)
    return d


def _path_from_json(raw, topics: Sequence[str], answers: frozenset[str]) -> ReasoningPath:
    triples = [Triple(*t[:3]) for t in raw]
    if not triples:
        common = [t for t in topics if t in answers]
        if not common:
            raise ValueError("empty gold path requires a topic entity that is also an answer")
        return ReasoningPath((), common[0], common[0])
    first = triples[0]
    errors = []
    for start in (first.subject, first.object):
        if start not in topics:
            continue
        try:
            p = ReasoningPath.from_triples(triples, start=start)
        except ValueError as exc:
            errors.append(str(exc))
            continue
        if p.end in answers:
            return p
    raise ValueError("gold path does not chain from a topic entity to an answer" + (f": {errors[0]}" if errors else ""))


def task_from_dict(d: dict) -> TaskInstance:
    for key in ("id", "question", "topic_entities", "answers"):
        if key not in d:
            raise ValueError(f"missing key {key!r}")
    topics = tuple(normalize(e) for e in d["topic_entities"])
    answers = frozenset(normalize(a) for a in d["answers"])
    paths = tuple(_path_from_json(p, topics, answers) for p in d.get("gold_paths") or ())
    sub = d.get("subgraph")
    return TaskInstance(
        id=str(d["id"]),
        question=d["question"],
        topic_entities=topics,
        gold_answers=answers,
        gold_paths=paths,
        subgraph=KnowledgeGraph(sub) if sub else None,
        labels=dict(d.get("labels") or {}),
    )


def load_tasks(source) -> list[TaskInstance]:
    fh, owned = _open_text(source)
    tasks = []
    try:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                tasks.append(task_from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise GraphFormatError(f"bad task: {exc}", i) from None
    finally:
        if owned:
            fh.close()
    return tasks


def dump_tasks(tasks: Iterable[TaskInstance], dest) -> None:
    owned = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8") if owned else dest
    try:
        for t in tasks:
            fh.write(json.dumps(task_to_dict(t)) + "\n")
    finally:
        if owned:
            fh.close()


def dumps_tasks(tasks: Iterable[TaskInstance]) -> str:
    buf = io.StringIO()
    dump_tasks(tasks, buf)
    return buf.getvalue()
