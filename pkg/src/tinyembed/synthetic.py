"""Seeded toy-corpus generators with known cluster structure.

Each cluster owns a two-letter query signature; every word of a query starts
with that signature plus a variant letter. Document signatures either equal
the query signature (surface mode: relevance is visible character overlap) or,
in mapped mode, keep the first letter and permute the second with a seeded
per-family permutation — then relevance within a first-letter family is an
arbitrary pairing that must be learned, not read off the bytes. Family-scoped
hard negatives pose exactly that discrimination during training.
"""

from __future__ import annotations

import random
import string
from collections import defaultdict

from .data import RETRIEVAL, CanonicalSample
from .evaluation import EvalTask

LETTERS = string.ascii_lowercase


def make_signatures(n_clusters: int, rng: random.Random) -> list[str]:
    if n_clusters > len(LETTERS) ** 2:
        raise ValueError(f"at most {len(LETTERS) ** 2} clusters supported")
    ids = rng.sample(range(len(LETTERS) ** 2), n_clusters)
    return [LETTERS[i // 26] + LETTERS[i % 26] for i in ids]


def cluster_text(signature: str, rng: random.Random, n_words: int) -> str:
    return " ".join(signature + rng.choice(LETTERS) for _ in range(n_words))


class ClusterSpace:
    """Query/doc signatures per cluster plus the first-letter family index."""

    def __init__(self, n_clusters: int, seed: int, mapped: bool):
        rng = random.Random(seed)
        self.query_sigs = make_signatures(n_clusters, rng)
        if mapped:
            perm = {letter: rng.sample(LETTERS, len(LETTERS)) for letter in LETTERS}
            self.doc_sigs = [s[0] + perm[s[0]][LETTERS.index(s[1])] for s in self.query_sigs]
        else:
            self.doc_sigs = list(self.query_sigs)
        self.families: dict[str, list[int]] = defaultdict(list)
        for c, sig in enumerate(self.query_sigs):
            self.families[sig[0]].append(c)

    def negative_cluster(self, c: int, rng: random.Random, scope: str) -> int:
        if scope == "family":
            siblings = [x for x in self.families[self.query_sigs[c][0]] if x != c]
            if siblings:
                return rng.choice(siblings)
        other = rng.randrange(len(self.query_sigs) - 1)
        return other + (other >= c)


def retrieval_training_samples(
    n_samples: int,
    n_clusters: int,
    seed: int,
    source: str = "toy-retrieval",
    n_negatives: int = 0,
    query_words: int = 3,
    doc_words: int = 4,
    mapped_doc_signatures: bool = False,
    negative_scope: str = "any",
) -> list[CanonicalSample]:
    """Clustered (query, positive, negatives) tuples.

    negative_scope "family" draws explicit negatives from other clusters of the
    same first-letter family (hard negatives); "any" draws them uniformly.
    """
    if negative_scope not in ("any", "family"):
        raise ValueError("negative_scope must be 'any' or 'family'")
    space = ClusterSpace(n_clusters, seed, mapped_doc_signatures)
    rng = random.Random(seed + 1)
    samples = []
    for i in range(n_samples):
        c = i % n_clusters
        negatives = [
            cluster_text(space.doc_sigs[space.negative_cluster(c, rng, negative_scope)], rng, doc_words)
            for _ in range(n_negatives)
        ]
        samples.append(
            CanonicalSample(
                format=RETRIEVAL,
                query=cluster_text(space.query_sigs[c], rng, query_words),
                positive=cluster_text(space.doc_sigs[c], rng, doc_words),
                negatives=negatives,
                source=source,
                task_type="qa",
                symmetric=False,
            )
        )
    return samples


def retrieval_eval_task(
    name: str,
    n_queries: int,
    n_clusters: int,
    seed: int,
    docs_per_cluster: int = 3,
    k: int = 10,
    query_words: int = 3,
    doc_words: int = 4,
    mapped_doc_signatures: bool = False,
) -> EvalTask:
    """Fresh queries against a clustered corpus; all same-cluster docs are relevant.

    Reusing a training corpus's (n_clusters, seed, mapped_doc_signatures) yields
    the same cluster space with unseen texts, so the task measures generalization.
    """
    space = ClusterSpace(n_clusters, seed, mapped_doc_signatures)
    eval_rng = random.Random(seed + 104729)
    corpus, relevant_ids = [], {c: [] for c in range(n_clusters)}
    for c in range(n_clusters):
        for _ in range(docs_per_cluster):
            relevant_ids[c].append(len(corpus))
            corpus.append(cluster_text(space.doc_sigs[c], eval_rng, doc_words))
    queries, relevance = [], []
    for i in range(n_queries):
        c = i % n_clusters
        queries.append(cluster_text(space.query_sigs[c], eval_rng, query_words))
        relevance.append({doc: 1.0 for doc in relevant_ids[c]})
    return EvalTask(kind="Retrieval", name=name, queries=queries, corpus=corpus, relevance=relevance, k=k)


def overfit_retrieval_set(n_samples: int, seed: int) -> tuple[list[CanonicalSample], EvalTask]:
    """One cluster per sample; the eval task asks each training query to rank
    its own positive first among all positives."""
    samples = retrieval_training_samples(n_samples, n_clusters=n_samples, seed=seed, source="toy-overfit")
    task = EvalTask(
        kind="Retrieval",
        name="overfit-train-queries",
        queries=[s.query for s in samples],
        corpus=[s.positive for s in samples],
        relevance=[{i: 1.0} for i in range(n_samples)],
        k=10,
    )
    return samples, task


def sts_eval_task(name: str, n_pairs: int, seed: int, n_clusters: int = 12, words: int = 4) -> EvalTask:
    """Sentence pairs whose gold similarity is their controlled word-overlap fraction."""
    rng = random.Random(seed)
    sigs = make_signatures(n_clusters, rng)
    pairs, gold = [], []
    for i in range(n_pairs):
        shared = i % (words + 1)
        sig_a = sigs[rng.randrange(n_clusters)]
        a_words = [sig_a + rng.choice(LETTERS) for _ in range(words)]
        b_words = list(a_words[:shared])
        while len(b_words) < words:
            b_words.append(sigs[rng.randrange(n_clusters)] + rng.choice(LETTERS))
        rng.shuffle(b_words)
        pairs.append((" ".join(a_words), " ".join(b_words)))
        gold.append(shared / words)
    return EvalTask(kind="STS", name=name, pairs=pairs, gold=gold)


def pair_classification_eval_task(
    name: str, n_pairs: int, n_clusters: int, seed: int, words: int = 4
) -> EvalTask:
    """Balanced same-cluster (label 1) vs cross-cluster (label 0) text pairs."""
    rng = random.Random(seed)
    sigs = make_signatures(n_clusters, rng)
    pairs, labels = [], []
    for i in range(n_pairs):
        same = i % 2 == 0
        c = rng.randrange(n_clusters)
        if same:
            d = c
        else:
            d = rng.randrange(n_clusters - 1)
            d += d >= c
        pairs.append((cluster_text(sigs[c], rng, words), cluster_text(sigs[d], rng, words)))
        labels.append(int(same))
    return EvalTask(kind="PairClassification", name=name, pairs=pairs, labels=labels)
