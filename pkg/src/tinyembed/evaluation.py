"""Evaluation harness: retrieval nDCG, STS Spearman, pair-classification accuracy,
matryoshka truncation sweeps, and the distillation ablation."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Batch
from .model import EmbeddingModel, raw_sequence_embedding
from .tokenizer import tokenize
from .training import StagePlan, train_stage, truncate_and_renorm_array

KINDS = ("Retrieval", "STS", "PairClassification")


@dataclass
class EvalTask:
    kind: str
    name: str
    # Retrieval
    queries: list[str] | None = None
    corpus: list[str] | None = None
    relevance: list[dict[int, float]] | None = None
    k: int = 10
    # STS
    pairs: list[tuple[str, str]] | None = None
    gold: list[float] | None = None
    # PairClassification
    labels: list[int] | None = None

    def __post_init__(self):
        if self.kind == "Retrieval":
            if not (self.queries and self.corpus and self.relevance):
                raise ValueError("retrieval task needs queries, corpus, relevance")
            if len(self.relevance) != len(self.queries) or any(not r for r in self.relevance):
                raise ValueError("retrieval task needs a non-empty relevance set per query")
        elif self.kind == "STS":
            if not self.pairs or self.gold is None or len(self.pairs) != len(self.gold):
                raise ValueError("sts task needs pairs and matching gold scores")
            if not all(math.isfinite(g) for g in self.gold):
                raise ValueError("sts gold scores must be finite")
        elif self.kind == "PairClassification":
            if not self.pairs or self.labels is None or len(self.pairs) != len(self.labels):
                raise ValueError("pair task needs pairs and matching labels")
            if any(l not in (0, 1) for l in self.labels):
                raise ValueError("pair labels must be 0 or 1")
        else:
            raise ValueError(f"unknown task kind {self.kind!r}; options: {KINDS}")

    def texts(self) -> list[str]:
        if self.kind == "Retrieval":
            return list(self.queries) + list(self.corpus)
        return [t for pair in self.pairs for t in pair]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        if self.kind == "Retrieval":
            d.update(
                queries=self.queries,
                corpus=self.corpus,
                relevance=[{str(i): g for i, g in r.items()} for r in self.relevance],
                k=self.k,
            )
        elif self.kind == "STS":
            d.update(pairs=[list(p) for p in self.pairs], gold=self.gold)
        else:
            d.update(pairs=[list(p) for p in self.pairs], labels=self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalTask":
        d = dict(d)
        if d.get("relevance") is not None:
            d["relevance"] = [{int(i): float(g) for i, g in r.items()} for r in d["relevance"]]
        if d.get("pairs") is not None:
            d["pairs"] = [tuple(p) for p in d["pairs"]]
        return cls(**d)


def load_tasks(path: str | Path) -> list[EvalTask]:
    with open(path) as f:
        payload = json.load(f)
    return [EvalTask.from_dict(d) for d in payload]


def save_tasks(path: str | Path, tasks: list[EvalTask]) -> None:
    with open(path, "w") as f:
        json.dump([t.to_dict() for t in tasks], f, indent=2, ensure_ascii=False)


# ---------------------------------------------------------------------------
# Metric kernels
# ---------------------------------------------------------------------------


def ndcg_at_k(ranking: list[int], relevant: dict[int, float], k: int) -> float:
    """Normalized discounted cumulative gain at cutoff k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("empty relevant set")
    dcg = 0.0
    for i, doc in enumerate(ranking[:k], start=1):
        if doc in relevant:
            dcg += relevant[doc] / math.log2(i + 1)
    ideal = 0.0
    for i, gain in enumerate(sorted(relevant.values(), reverse=True)[:k], start=1):
        ideal += gain / math.log2(i + 1)
    return dcg / ideal


def _fractional_ranks(values: list[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def spearman(pred: list[float], gold: list[float]) -> float:
    """Pearson correlation of fractional (average-tie) ranks."""
    if len(pred) != len(gold) or len(pred) < 2:
        raise ValueError("spearman needs two equal-length score lists of size >= 2")
    rp = np.asarray(_fractional_ranks(list(pred)))
    rg = np.asarray(_fractional_ranks(list(gold)))
    rp -= rp.mean()
    rg -= rg.mean()
    denom = math.sqrt(float(rp @ rp) * float(rg @ rg))
    if denom == 0.0:
        raise ValueError("spearman undefined: zero-variance ranks")
    return float(rp @ rg) / denom


def best_threshold_accuracy(sims: list[float], labels: list[int]) -> tuple[float, float]:
    """Scan all midpoints between sorted similarities (plus both extremes);
    predict label 1 when sim > threshold. Returns (best accuracy, threshold)."""
    if len(sims) != len(labels) or len(sims) < 2:
        raise ValueError("need >= 2 (similarity, label) pairs")
    if len(set(labels)) < 2:
        raise ValueError("both labels must be present")
    uniq = sorted(set(sims))
    thresholds = [uniq[0] - 1.0]
    thresholds += [(a + b) / 2 for a, b in zip(uniq, uniq[1:])]
    thresholds.append(uniq[-1] + 1.0)
    best_acc, best_thr = -1.0, thresholds[0]
    n = len(sims)
    for thr in thresholds:
        acc = sum((s > thr) == bool(l) for s, l in zip(sims, labels)) / n
        if acc > best_acc:
            best_acc, best_thr = acc, thr
    return best_acc, best_thr


def pair_accuracy(pair_embeddings: np.ndarray, labels: list[int]) -> tuple[float, float]:
    """Best-threshold accuracy over cosine similarities of (n, 2, d) embedding pairs."""
    pairs = np.asarray(pair_embeddings)
    if pairs.ndim != 3 or pairs.shape[1] != 2:
        raise ValueError(f"expected (n, 2, d) embedding pairs, got {pairs.shape}")
    a = pairs[:, 0]
    b = pairs[:, 1]
    sims = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return best_threshold_accuracy([float(s) for s in sims], labels)


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------


class _EmbedCache:
    """Raw EOS embeddings computed once per unique text; truncation applied per use."""

    def __init__(self, model: EmbeddingModel, threads: int = 1):
        self.model = model
        self.threads = max(1, threads)
        self.raw: dict[str, np.ndarray] = {}
        self.requests = 0
        self.hits = 0

    def _compute(self, text: str) -> np.ndarray:
        with ad.no_grad():
            toks = tokenize(text, self.model.config.max_seq_len)
            return raw_sequence_embedding(self.model, toks).values[0].copy()

    def warm(self, texts: list[str]) -> None:
        todo = []
        seen = set()
        for t in texts:
            self.requests += 1
            if t in self.raw or t in seen:
                self.hits += 1
            else:
                seen.add(t)
                todo.append(t)
        if self.threads > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                for text, emb in zip(todo, pool.map(self._compute, todo)):
                    self.raw[text] = emb
        else:
            for text in todo:
                self.raw[text] = self._compute(text)

    def unit(self, text: str, dim: int | None) -> np.ndarray:
        raw = self.raw.get(text)
        if raw is None:
            self.warm([text])
            raw = self.raw[text]
        d = raw.shape[0] if dim is None else dim
        return truncate_and_renorm_array(raw[None, :], d)[0]


@dataclass
class TaskScore:
    name: str
    kind: str
    score: float


@dataclass
class EvalReport:
    scores: list[TaskScore]
    mean: float | None
    unique_texts: int
    requests: int
    cache_hits: int

    def by_name(self) -> dict[str, float]:
        return {s.name: s.score for s in self.scores}


def _score_task(task: EvalTask, cache: _EmbedCache, dim: int | None) -> float:
    if task.kind == "Retrieval":
        doc_matrix = np.stack([cache.unit(doc, dim) for doc in task.corpus])
        per_query = []
        for query, relevant in zip(task.queries, task.relevance):
            sims = doc_matrix @ cache.unit(query, dim)
            ranking = sorted(range(len(task.corpus)), key=lambda j: (-sims[j], j))
            per_query.append(ndcg_at_k(ranking, relevant, task.k))
        return sum(per_query) / len(per_query)
    if task.kind == "STS":
        pred = [float(cache.unit(a, dim) @ cache.unit(b, dim)) for a, b in task.pairs]
        return spearman(pred, task.gold)
    sims = [float(cache.unit(a, dim) @ cache.unit(b, dim)) for a, b in task.pairs]
    return best_threshold_accuracy(sims, task.labels)[0]


def evaluate(
    model: EmbeddingModel, tasks: list[EvalTask], dim: int | None = None, threads: int = 1
) -> EvalReport:
    """Score every task at an optional truncation dimension; one embedding per unique text."""
    if dim is not None and not 1 <= dim <= model.config.hidden_size:
        raise ValueError(f"dim {dim} out of range [1, {model.config.hidden_size}]")
    cache = _EmbedCache(model, threads=threads)
    for task in tasks:
        cache.warm(task.texts())
    scores = [TaskScore(t.name, t.kind, _score_task(t, cache, dim)) for t in tasks]
    mean = sum(s.score for s in scores) / len(scores) if scores else None
    return EvalReport(scores, mean, len(cache.raw), cache.requests, cache.hits)


def mrl_sweep(
    model: EmbeddingModel, tasks: list[EvalTask], dims: list[int], threads: int = 1
) -> list[tuple[int, float]]:
    """Mean score at each truncation dimension; embeddings computed once."""
    if not tasks:
        raise ValueError("mrl_sweep needs at least one task")
    if list(dims) != sorted(set(dims)):
        raise ValueError("dims must be ascending and distinct")
    if dims[0] < 8 or dims[-1] > model.config.hidden_size:
        raise ValueError(f"dims must lie within [8, {model.config.hidden_size}]")
    cache = _EmbedCache(model, threads=threads)
    for task in tasks:
        cache.warm(task.texts())
    rows = []
    for d in dims:
        scores = [_score_task(t, cache, d) for t in tasks]
        rows.append((d, sum(scores) / len(scores)))
    return rows


def write_sweep_csv(path: str | Path, rows: list[tuple[int, float]]) -> None:
    with open(path, "w") as f:
        f.write("dim,mean_score\n")
        for d, score in rows:
            f.write(f"{d},{score!r}\n")


def write_scores_csv(path: str | Path, report: EvalReport) -> None:
    with open(path, "w") as f:
        f.write("task,kind,score\n")
        for s in report.scores:
            f.write(f"{s.name},{s.kind},{s.score!r}\n")


# ---------------------------------------------------------------------------
# Distillation ablation (Table-4-style paired arms)
# ---------------------------------------------------------------------------


def ablation_distill(
    pruned_init: EmbeddingModel,
    teacher: EmbeddingModel,
    data: list[Batch],
    plan: StagePlan,
    tasks: list[EvalTask],
    threads: int = 1,
) -> dict:
    """Train two arms from the same pruned initialization — with distillation
    (the plan's weight) and without (weight 0, no teacher) — under identical
    seeds and data, and evaluate both on the same tasks."""
    if plan.loss.distill_weight <= 0:
        raise ValueError("ablation needs a positive distill_weight for the distilled arm")
    from dataclasses import replace as dc_replace

    distilled = pruned_init.astype(np.float32)
    plain = pruned_init.astype(np.float32)
    plan_distilled = dc_replace(plan, teacher=plan.teacher or "teacher")
    plan_plain = dc_replace(plan, teacher=None, loss=dc_replace(plan.loss, distill_weight=0.0))
    train_stage(distilled, data, plan_distilled, teacher=teacher)
    train_stage(plain, data, plan_plain)
    with_score = evaluate(distilled, tasks, threads=threads).mean
    without_score = evaluate(plain, tasks, threads=threads).mean
    return {
        "with_distillation": with_score,
        "without_distillation": without_score,
        "delta": with_score - without_score,
    }
