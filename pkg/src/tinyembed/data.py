"""Data consolidation into the three canonical contrastive formats, hard-negative
mining, per-source capping, stage-dependent instruction formatting, and batching.

Ingestion accepts JSON-lines records in three schemas:
  retrieval: {"query", "pos", "negs": [...], "source", "task_type", "symmetric"?}
  classed:   {"text", "class", "source", "task_type"}   (paired within/across classes)
  binary:    {"text", "label", "labels": [l0, l1], "source", "task_type"}
"""

from __future__ import annotations

import json
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

RETRIEVAL = "Retrieval"
CLUSTERING = "Clustering"
PAIR_CLASSIFICATION = "PairClassification"
FORMATS = (RETRIEVAL, CLUSTERING, PAIR_CLASSIFICATION)

# Task kinds where query and document play interchangeable roles; these get
# document-side instruction dropout in stage 2 and never use in-batch negatives
# in clustering/classification formats.
SYMMETRIC_TASK_KINDS = {"clustering", "sts", "bitext", "paraphrase"}


class SchemaError(ValueError):
    """Raised for records that match no ingestion schema or miss required fields."""


@dataclass
class CanonicalSample:
    format: str
    query: str
    positive: str
    negatives: list[str]
    source: str
    task_type: str
    symmetric: bool
    instruction: str | None = None

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"unknown canonical format {self.format!r}")
        if self.format in (CLUSTERING, PAIR_CLASSIFICATION) and not self.negatives:
            raise ValueError(f"{self.format} samples need at least one explicit negative")

    @property
    def uses_in_batch_negatives(self) -> bool:
        return self.format == RETRIEVAL

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CanonicalSample":
        return cls(
            format=d["format"],
            query=d["query"],
            positive=d["positive"],
            negatives=list(d["negatives"]),
            source=d["source"],
            task_type=d["task_type"],
            symmetric=bool(d["symmetric"]),
            instruction=d.get("instruction"),
        )


@dataclass
class Batch:
    samples: list[CanonicalSample]
    stage: int = 1

    def __post_init__(self):
        if not self.samples:
            raise ValueError("empty batch")
        fmt = self.samples[0].format
        if any(s.format != fmt for s in self.samples):
            raise ValueError("batch mixes canonical formats")
        if fmt == RETRIEVAL and len({s.source for s in self.samples}) != 1:
            raise ValueError("retrieval batch mixes sources")
        if fmt != RETRIEVAL and any(not s.negatives for s in self.samples):
            raise ValueError(f"{fmt} batch sample lacks an explicit negative")

    @property
    def format(self) -> str:
        return self.samples[0].format

    @property
    def uses_in_batch_negatives(self) -> bool:
        return self.format == RETRIEVAL

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# Consolidation
# ---------------------------------------------------------------------------


def _require(record: dict, fields: tuple[str, ...], schema: str) -> None:
    missing = [f for f in fields if f not in record]
    if missing:
        raise SchemaError(f"{schema} record missing fields: {', '.join(missing)}")


def _is_symmetric(task_kind: str) -> bool:
    return task_kind.lower() in SYMMETRIC_TASK_KINDS


def consolidate(record: dict, task_kind: str, rng: random.Random) -> CanonicalSample:
    """Map one raw record into a canonical sample.

    Retrieval records map directly; grouped class-labeled records map by
    pairing the anchor with a same-class positive and a different-class
    negative; binary-labeled records use the label text as positive and the
    opposite label text as the negative.
    """
    if "query" in record:
        _require(record, ("query", "pos", "source", "task_type"), "retrieval")
        kind = record["task_type"] or task_kind
        return CanonicalSample(
            format=RETRIEVAL,
            query=record["query"],
            positive=record["pos"],
            negatives=list(record.get("negs", [])),
            source=record["source"],
            task_type=kind,
            symmetric=bool(record.get("symmetric", _is_symmetric(kind))),
        )
    if "label" in record:
        _require(record, ("text", "label", "labels", "source", "task_type"), "binary")
        labels = record["labels"]
        if len(labels) != 2 or record["label"] not in labels:
            raise SchemaError(f"binary record needs 2 labels containing {record['label']!r}")
        opposite = labels[1] if record["label"] == labels[0] else labels[0]
        kind = record["task_type"] or task_kind
        return CanonicalSample(
            format=PAIR_CLASSIFICATION,
            query=record["text"],
            positive=record["label"],
            negatives=[opposite],
            source=record["source"],
            task_type=kind,
            symmetric=_is_symmetric(kind),
        )
    if "classes" in record:
        _require(record, ("anchor", "classes", "source", "task_type"), "classed")
        classes: dict[str, list[str]] = record["classes"]
        anchor = record["anchor"]
        own = next((label for label, texts in classes.items() if anchor in texts), None)
        if own is None:
            raise SchemaError("classed record anchor not found in any class")
        positives = [t for t in classes[own] if t != anchor]
        other_texts = [t for label in sorted(classes) if label != own for t in classes[label]]
        if not positives or not other_texts:
            raise SchemaError("classed record needs a same-class positive and a different-class negative")
        kind = record["task_type"] or task_kind
        return CanonicalSample(
            format=CLUSTERING,
            query=anchor,
            positive=rng.choice(positives),
            negatives=[rng.choice(other_texts)],
            source=record["source"],
            task_type=kind,
            symmetric=_is_symmetric(kind),
        )
    raise SchemaError("unknown schema: record has none of the fields query / label / classes")


def consolidate_records(records: Iterable[dict], rng: random.Random) -> list[CanonicalSample]:
    """Consolidate a stream of raw records, grouping per-text classed records.

    Classed records ({"text", "class", ...}) are grouped by (source, task_type);
    each text becomes an anchor. Anchors whose class has no second member, or
    whose group has a single class, are skipped (no valid pair exists).
    """
    samples: list[CanonicalSample] = []
    classed: dict[tuple[str, str], dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
    for record in records:
        if "class" in record and "query" not in record and "label" not in record:
            _require(record, ("text", "class", "source", "task_type"), "classed")
            classed[(record["source"], record["task_type"])][record["class"]].append(record["text"])
        else:
            samples.append(consolidate(record, record.get("task_type", ""), rng))
    for (source, task_type), classes in classed.items():
        if len(classes) < 2:
            continue
        for label in sorted(classes):
            if len(classes[label]) < 2:
                continue
            for anchor in classes[label]:
                samples.append(
                    consolidate(
                        {"anchor": anchor, "classes": classes, "source": source, "task_type": task_type},
                        task_type,
                        rng,
                    )
                )
    return samples


# ---------------------------------------------------------------------------
# Hard-negative mining
# ---------------------------------------------------------------------------


def mine_hard_negatives(
    queries: list[str],
    corpus: list[str],
    embedder: Callable[[str], np.ndarray],
    k: int,
    skip_top: int = 1,
    positive_indices: list[int] | None = None,
) -> list[list[str]]:
    """Per query: rank the corpus by cosine similarity, drop the known positive
    and the first skip_top ranks, return the next k texts.

    The embedder must return unit vectors. positive_indices gives each query's
    known positive as an index into `corpus` (required so it can be excluded).
    """
    if k < 0 or skip_top < 0:
        raise ValueError("k and skip_top must be >= 0")
    if not corpus:
        raise ValueError("empty corpus")
    if positive_indices is None or len(positive_indices) != len(queries):
        raise ValueError("positive_indices must give one corpus index per query")
    doc_embs = np.stack([embedder(doc) for doc in corpus])
    out: list[list[str]] = []
    for query, pos_idx in zip(queries, positive_indices):
        if k == 0:
            out.append([])
            continue
        sims = doc_embs @ embedder(query)
        order = sorted(range(len(corpus)), key=lambda j: (-sims[j], j))
        excluded = set(order[:skip_top])
        excluded.add(pos_idx)
        out.append([corpus[j] for j in order if j not in excluded][:k])
    return out


# ---------------------------------------------------------------------------
# Capping, instructions, batching, stats
# ---------------------------------------------------------------------------


def cap_per_source(samples: list[CanonicalSample], cap: int, rng: random.Random) -> list[CanonicalSample]:
    """Keep at most `cap` samples per source (uniform random subset, original order)."""
    if cap < 0:
        raise ValueError("cap must be >= 0")
    by_source: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        by_source[s.source].append(i)
    keep: set[int] = set()
    for source in sorted(by_source):
        idxs = by_source[source]
        keep.update(idxs if len(idxs) <= cap else rng.sample(idxs, cap))
    return [s for i, s in enumerate(samples) if i in keep]


def attach_instructions(samples: list[CanonicalSample], templates: dict[str, str]) -> list[CanonicalSample]:
    """Set each sample's instruction template from a {task_type: template} map."""
    return [replace(s, instruction=templates.get(s.task_type, s.instruction)) for s in samples]


def apply_instructions(
    sample: CanonicalSample, stage: int, p_doc: float = 0.30, rng: random.Random | None = None
) -> CanonicalSample:
    """Stage 1: identity. Stage 2: prepend the instruction to the query, and for
    symmetric tasks independently to the positive and each negative with
    probability p_doc (one coin per text)."""
    if stage == 1:
        return sample
    if stage != 2:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if not sample.instruction:
        raise ValueError(f"stage-2 sample from {sample.source!r} has no instruction template")
    if rng is None:
        raise ValueError("stage-2 instruction application needs a seeded rng")
    prefix = lambda text: sample.instruction + "\n" + text
    coin = lambda text: prefix(text) if rng.random() < p_doc else text
    if sample.symmetric:
        positive = coin(sample.positive)
        negatives = [coin(n) for n in sample.negatives]
    else:
        positive = sample.positive
        negatives = list(sample.negatives)
    return replace(sample, query=prefix(sample.query), positive=positive, negatives=negatives)


def make_batches(
    samples: list[CanonicalSample], batch_size: int, rng: random.Random, stage: int = 1
) -> list[Batch]:
    """Group by (format, source), shuffle within groups, chunk, drop trailing
    singletons, and shuffle the global batch order."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    groups: dict[tuple[str, str], list[CanonicalSample]] = defaultdict(list)
    for s in samples:
        groups[(s.format, s.source)].append(s)
    batches: list[Batch] = []
    for key in sorted(groups):
        members = list(groups[key])
        rng.shuffle(members)
        for i in range(0, len(members), batch_size):
            chunk = members[i : i + batch_size]
            if len(chunk) >= 2:
                batches.append(Batch(chunk, stage=stage))
    rng.shuffle(batches)
    return batches


def epoch_batches(
    samples: list[CanonicalSample], batch_size: int, rng: random.Random, epochs: int, stage: int = 1
) -> list[Batch]:
    """Independent make_batches shuffles per epoch, concatenated; varies the
    in-batch negative pairings across epochs."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    out: list[Batch] = []
    for _ in range(epochs):
        out.extend(make_batches(samples, batch_size, rng, stage=stage))
    return out


def stats_report(samples: list[CanonicalSample]) -> dict:
    """Per-source, per-format, per-task-type counts."""
    return {
        "total": len(samples),
        "by_source": dict(sorted(Counter(s.source for s in samples).items())),
        "by_format": dict(sorted(Counter(s.format for s in samples).items())),
        "by_task_type": dict(sorted(Counter(s.task_type for s in samples).items())),
    }


# ---------------------------------------------------------------------------
# JSONL io
# ---------------------------------------------------------------------------


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
    return records


def read_samples(path: str | Path) -> list[CanonicalSample]:
    return [CanonicalSample.from_dict(d) for d in read_jsonl(path)]


def write_samples(path: str | Path, samples: Iterable[CanonicalSample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(s.to_json() + "\n")
