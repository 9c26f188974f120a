"""Search-and-Verify: BFS candidate retrieval plus semantic path verification."""
from __future__ import annotations

import logging
import re
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence, runtime_checkable

from .kg import KnowledgeGraph, ReasoningPath, TaskInstance, Triple, normalize

__all__ = [
    "SearchConfig",
    "Verifier",
    "AlwaysVerifier",
    "KeywordOverlapVerifier",
    "VerificationError",
    "MissingEntityError",
    "VerificationCache",
    "search_paths",
    "verify_paths",
    "build_gold_paths",
    "unmapped_answers",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    max_hops: int = 4
    traverse_inverse: bool = False
    max_paths: int = 256
    simple_paths_only: bool = True

    def __post_init__(self):
        if self.max_hops < 1:
            raise ValueError("max_hops must be >= 1")
        if self.max_paths < 1:
            raise ValueError("max_paths must be >= 1")
        if not self.simple_paths_only:
            raise ValueError("only simple paths are supported")


@runtime_checkable
class Verifier(Protocol):
    def verify(self, question: str, path: ReasoningPath) -> tuple[bool, str]:
        ...


class AlwaysVerifier:
    def verify(self, question, path):
        return True, "accepted unconditionally"


_STOPWORDS = frozenset(
    """a an and are as at be by did do does for from has have how in is it its of on or
    that the this to was were what when where which who whom whose why with""".split()
)


def _content_words(text: str) -> set[str]:
    return {w for w in re.findall(r"[a-z0-9]+", normalize(text).replace("_", " ")) if w not in _STOPWORDS}


class KeywordOverlapVerifier:
    """Accept a path when its relations share a content word with the question.

    Relation ids are split on any non-alphanumeric character, so
    ``people.person.employer`` contributes ``people``, ``person`` and ``employer``.
    """

    def __init__(self, min_overlap: int = 1):
        self.min_overlap = min_overlap

    def verify(self, question, path):
        qwords = _content_words(question)
        rwords = set().union(*(_content_words(t.relation) for t in path.steps)) if path.steps else set()
        shared = sorted(qwords & rwords)
        ok = len(shared) >= self.min_overlap
        why = f"shared words: {', '.join(shared)}" if shared else "no shared content words"
        return ok, why


class VerificationError(RuntimeError):
    def __init__(self, index: int, path: ReasoningPath, cause: BaseException):
        self.index = index
        self.path = path
        super().__init__(f"verifier failed on candidate {index} ({path}): {cause}")


class MissingEntityError(ValueError):
    def __init__(self, task_id: str, missing: Sequence[str]):
        self.task_id = task_id
        self.missing = list(missing)
        super().__init__(f"task {task_id!r}: no answer entity in graph; missing: {', '.join(self.missing)}")


class VerificationCache:
    """Thread-safe memo of verdicts keyed by (normalized question, path key)."""

    def __init__(self):
        self._data: dict[tuple[str, str], tuple[bool, str]] = {}
        self._lock = threading.Lock()

    def get(self, question: str, path: ReasoningPath):
        with self._lock:
            return self._data.get((normalize(question), path.key()))

    def put(self, question: str, path: ReasoningPath, verdict: tuple[bool, str]) -> None:
        with self._lock:
            self._data.setdefault((normalize(question), path.key()), verdict)

    def __len__(self) -> int:
        return len(self._data)


def _expansions(g: KnowledgeGraph, entity: str, inverse: bool):
    for rel, nxt in g.out_edges(entity):
        yield nxt, Triple(entity, rel, nxt), False
    if inverse:
        for rel, prev in g.in_edges(entity):
            yield prev, Triple(prev, rel, entity), True


def search_paths(
    g: KnowledgeGraph,
    topics: Iterable[str],
    answers: Iterable[str],
    cfg: SearchConfig | None = None,
) -> list[ReasoningPath]:
    """All simple topic->answer paths of at most ``cfg.max_hops`` steps.

    Results come shortest first; within a length, topics keep their input order
    and neighbors are expanded in sorted (relation, entity) order.
    """
    cfg = cfg or SearchConfig()
    topics = list(dict.fromkeys(normalize(t) for t in topics))
    answers = {normalize(a) for a in answers}
    if not topics or not answers:
        raise ValueError("topics and answers must be non-empty")

    found: list[ReasoningPath] = []
    # queue items: (entities on path, steps, inverse flags)
    queue = deque(((t,), (), ()) for t in topics)
    while queue:
        ents, steps, inv = queue.popleft()
        if ents[-1] in answers:
            found.append(ReasoningPath(steps, ents[0], ents[-1], inv))
            if len(found) >= cfg.max_paths:
                log.warning("path cap of %d reached; remaining candidates dropped", cfg.max_paths)
                break
        if len(steps) >= cfg.max_hops:
            continue
        exp = sorted(_expansions(g, ents[-1], cfg.traverse_inverse), key=lambda x: (x[1].relation, x[0], x[2]))
        for nxt, triple, is_inv in exp:
            if nxt in ents:
                continue
            queue.append((ents + (nxt,), steps + (triple,), inv + (is_inv,)))
    return found


def verify_paths(
    question: str,
    candidates: Sequence[ReasoningPath],
    v: Verifier,
    *,
    cache: VerificationCache | None = None,
    max_workers: int = 1,
) -> list[ReasoningPath]:
    """Keep candidates the verifier accepts, in input order.

    Any verifier exception aborts the whole call with :class:`VerificationError`.
    """
    cache = cache if cache is not None else VerificationCache()

    def judge(i: int, path: ReasoningPath) -> bool:
        hit = cache.get(question, path)
        if hit is None:
            try:
                ok, why = v.verify(question, path)
            except Exception as exc:
                raise VerificationError(i, path, exc) from exc
            hit = (bool(ok), str(why))
            cache.put(question, path, hit)
        return hit[0]

    if max_workers <= 1 or len(candidates) <= 1:
        verdicts = [judge(i, p) for i, p in enumerate(candidates)]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(judge, i, p) for i, p in enumerate(candidates)]
            verdicts = [f.result() for f in futures]
    return [p for p, ok in zip(candidates, verdicts) if ok]


def unmapped_answers(task: TaskInstance, g: KnowledgeGraph) -> list[str]:
    return sorted(a for a in task.gold_answers if a not in g.entities)


def build_gold_paths(
    task: TaskInstance,
    g: KnowledgeGraph,
    cfg: SearchConfig | None = None,
    v: Verifier | None = None,
    *,
    force: bool = False,
    cache: VerificationCache | None = None,
    max_workers: int = 1,
) -> TaskInstance:
    """Fill ``task.gold_paths`` by search then verification.

    Tasks that already carry gold paths are returned unchanged unless ``force``.
    """
    if task.gold_paths and not force:
        return task
    missing = unmapped_answers(task, g)
    present = sorted(task.gold_answers - set(missing))
    if not present:
        raise MissingEntityError(task.id, missing)
    if missing:
        log.warning("task %s: answers not in graph: %s", task.id, ", ".join(missing))
    cands = search_paths(g, task.topic_entities, present, cfg)
    kept = verify_paths(task.question, cands, v or AlwaysVerifier(), cache=cache, max_workers=max_workers)
    return task.with_paths(kept)
