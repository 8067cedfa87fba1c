"""Contrastive training: matryoshka InfoNCE with format-dependent negative policy,
teacher-embedding MSE distillation, AdamW, and the two-stage loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .data import RETRIEVAL, Batch
from .model import EmbeddingModel, raw_sequence_embedding, save_checkpoint
from .tokenizer import tokenize


def default_mrl_dims(hidden_size: int) -> tuple[int, ...]:
    """Powers of two from 8 up to the hidden size, always including the full size."""
    if hidden_size < 8:
        raise ValueError("matryoshka training needs hidden_size >= 8")
    dims = []
    d = 8
    while d < hidden_size:
        dims.append(d)
        d *= 2
    dims.append(hidden_size)
    return tuple(dims)


@dataclass(frozen=True)
class LossConfig:
    mrl_dims: tuple[int, ...]
    temperature: float = 0.05
    mrl_weights: tuple[float, ...] | None = None  # None = uniform
    distill_weight: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")
        dims = self.mrl_dims
        if not dims or any(b <= a for a, b in zip(dims, dims[1:])):
            raise ValueError("mrl_dims must be non-empty and strictly ascending")
        if dims[0] < 8:
            raise ValueError("minimum matryoshka dimension is 8")
        if self.mrl_weights is not None:
            if len(self.mrl_weights) != len(dims):
                raise ValueError("mrl_weights must match mrl_dims")
            if any(w <= 0 for w in self.mrl_weights):
                raise ValueError("mrl_weights must be positive")

    def weights(self) -> tuple[float, ...]:
        return self.mrl_weights if self.mrl_weights is not None else (1.0,) * len(self.mrl_dims)

    @classmethod
    def for_hidden(cls, hidden_size: int, **kwargs) -> "LossConfig":
        return cls(mrl_dims=default_mrl_dims(hidden_size), **kwargs)


@dataclass
class StagePlan:
    stage: int
    learning_rate: float
    epochs: int
    batch_size: int
    loss: LossConfig
    seed: int
    teacher: str | None = None  # checkpoint path, resolved by the caller

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def truncate_and_renorm(emb: Tensor, d: int) -> Tensor:
    """First d coordinates, re-normalized to unit rows."""
    full = emb.shape[1]
    if not 1 <= d <= full:
        raise ValueError(f"truncation dim {d} out of range [1, {full}]")
    sliced = emb if d == full else ad.slice_cols(emb, 0, d)
    return ad.l2_normalize_rows(sliced)


def truncate_and_renorm_array(emb: np.ndarray, d: int) -> np.ndarray:
    """Numpy twin of truncate_and_renorm for inference-side embeddings."""
    if not 1 <= d <= emb.shape[-1]:
        raise ValueError(f"truncation dim {d} out of range [1, {emb.shape[-1]}]")
    sliced = emb[..., :d]
    norms = np.linalg.norm(sliced, axis=-1, keepdims=True)
    if (norms < 1e-12).any():
        raise ValueError("cannot renormalize a zero prefix")
    return sliced / norms


def _check_unit_rows(name: str, t: Tensor) -> None:
    norms = np.linalg.norm(t.values, axis=1)
    if np.abs(norms - 1.0).max() > 1e-4:
        raise ValueError(f"info_nce: {name} embeddings are not unit-norm (worst |n-1| = {np.abs(norms - 1.0).max():.2e})")


def info_nce(
    query_embs: Tensor,
    pos_embs: Tensor,
    neg_embs: list[Tensor | None] | None,
    temperature: float,
    use_in_batch: bool,
) -> Tensor:
    """Temperature-scaled cross entropy over cosine similarities.

    Candidates for query i are its positive, its explicit negatives, and (for
    retrieval batches) the other queries' positives.
    """
    b = query_embs.shape[0]
    if pos_embs.shape != query_embs.shape:
        raise ShapeError(f"info_nce: queries {query_embs.shape} vs positives {pos_embs.shape}")
    if neg_embs is not None and len(neg_embs) != b:
        raise ValueError("info_nce: need one negative list per query")
    _check_unit_rows("query", query_embs)
    _check_unit_rows("positive", pos_embs)
    has_negs = neg_embs is not None and any(n is not None and n.shape[0] > 0 for n in neg_embs)
    if not has_negs and (not use_in_batch or b < 2):
        raise ValueError("info_nce: no candidates beyond each query's own positive")
    inv_t = 1.0 / temperature
    losses = None
    for i in range(b):
        parts = [ad.gather_rows(pos_embs, [i])]
        if neg_embs is not None and neg_embs[i] is not None and neg_embs[i].shape[0] > 0:
            _check_unit_rows("negative", neg_embs[i])
            parts.append(neg_embs[i])
        if use_in_batch and b > 1:
            parts.append(ad.gather_rows(pos_embs, [j for j in range(b) if j != i]))
        candidates = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        sims = ad.matmul(ad.gather_rows(query_embs, [i]), ad.transpose(candidates))
        loss_i = ad.cross_entropy(ad.scale(sims, inv_t), [0])
        losses = loss_i if losses is None else ad.add(losses, loss_i)
    return ad.scale(losses, 1.0 / b)


def matryoshka_info_nce(
    raw_query_embs: Tensor,
    raw_pos_embs: Tensor,
    raw_neg_embs: list[Tensor | None] | None,
    loss_cfg: LossConfig,
    use_in_batch: bool,
) -> Tensor:
    """Weighted mean of info_nce over truncated-and-renormed embedding prefixes."""
    full = raw_query_embs.shape[1]
    if loss_cfg.mrl_dims[-1] != full:
        raise ValueError(f"last mrl dim {loss_cfg.mrl_dims[-1]} must equal embedding size {full}")
    weights = loss_cfg.weights()
    total = None
    for d, w in zip(loss_cfg.mrl_dims, weights):
        q = truncate_and_renorm(raw_query_embs, d)
        p = truncate_and_renorm(raw_pos_embs, d)
        negs = None
        if raw_neg_embs is not None:
            negs = [None if n is None else truncate_and_renorm(n, d) for n in raw_neg_embs]
        term = ad.scale(info_nce(q, p, negs, loss_cfg.temperature, use_in_batch), w)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / sum(weights))


def distill_loss(student_embs: Tensor, teacher_embs: np.ndarray | Tensor) -> Tensor:
    """MSE between unit student embeddings and the teacher's embeddings
    truncated-and-renormed to the student dimension."""
    teacher = teacher_embs.values if isinstance(teacher_embs, Tensor) else np.asarray(teacher_embs)
    d_s = student_embs.shape[1]
    if teacher.ndim != 2 or teacher.shape[0] != student_embs.shape[0]:
        raise ShapeError(f"distill_loss: student {student_embs.shape} vs teacher {teacher.shape}")
    if teacher.shape[1] < d_s:
        raise ValueError(f"teacher dim {teacher.shape[1]} smaller than student dim {d_s}")
    target = truncate_and_renorm_array(teacher.astype(student_embs.values.dtype, copy=False), d_s)
    return ad.mse(student_embs, Tensor(target))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kwargs) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.values) for k, p in params.items()},
            v={k: np.zeros_like(p.values) for k, p in params.items()},
            **kwargs,
        )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
) -> None:
    """Decoupled weight decay Adam update, in place. Missing grads count as zero."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ShapeError(f"adamw_step: grad {g.shape} vs param {p.values.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.weight_decay * p.values
        p.values -= lr * update


# ---------------------------------------------------------------------------
# Stage loop
# ---------------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    total_loss: float
    contrastive_loss: float
    distill_loss: float


def write_metrics_csv(path: str | Path, metrics: list[StepMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "total_loss", "contrastive_loss", "distill_loss"])
        for m in metrics:
            w.writerow([m.step, repr(m.total_loss), repr(m.contrastive_loss), repr(m.distill_loss)])


def _batch_texts(batch: Batch) -> tuple[list[str], list[str], list[list[str]]]:
    queries = [s.query for s in batch.samples]
    positives = [s.positive for s in batch.samples]
    negatives = [list(s.negatives) for s in batch.samples]
    return queries, positives, negatives


def _embed_rows(model: EmbeddingModel, texts: list[str], cache: dict[str, list[int]]) -> Tensor:
    rows = []
    max_len = model.config.max_seq_len
    for text in texts:
        toks = cache.get(text)
        if toks is None:
            toks = tokenize(text, max_len)
            cache[text] = toks
        rows.append(raw_sequence_embedding(model, toks))
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)


def train_stage(
    model: EmbeddingModel,
    data: list[Batch],
    plan: StagePlan,
    teacher: EmbeddingModel | None = None,
    checkpoint_dir: str | Path | None = None,
    metrics_path: str | Path | None = None,
    start_step: int = 0,
) -> tuple[EmbeddingModel, list[StepMetrics]]:
    """Run one training stage over pre-built batches.

    Per batch: embed every text with the student (and the teacher, without
    gradients, when distilling), apply the matryoshka InfoNCE with in-batch
    negatives only for retrieval batches, add the weighted distillation MSE,
    backprop, and take one AdamW step. Deterministic given identical inputs.
    """
    if (teacher is None) != (plan.teacher is None):
        raise ValueError("teacher model must be given exactly when plan.teacher is set")
    if plan.stage == 1 and any(b.format != RETRIEVAL for b in data):
        raise ValueError("stage-1 plans use Retrieval-format data only")
    if teacher is not None and teacher.config.hidden_size < model.config.hidden_size:
        raise ValueError(
            f"teacher hidden size {teacher.config.hidden_size} smaller than student's {model.config.hidden_size}"
        )
    lam = plan.loss.distill_weight
    distilling = teacher is not None and lam > 0
    params = model.parameters()
    opt = OptimizerState.for_params(params)
    metrics: list[StepMetrics] = []
    token_cache: dict[str, list[int]] = {}
    teacher_cache: dict[str, np.ndarray] = {}
    step = start_step
    for _ in range(plan.epochs):
        for batch in data:
            step += 1
            try:
                queries, positives, negatives = _batch_texts(batch)
                raw_q = _embed_rows(model, queries, token_cache)
                raw_p = _embed_rows(model, positives, token_cache)
                raw_n = [
                    _embed_rows(model, negs, token_cache) if negs else None for negs in negatives
                ]
                contrastive = matryoshka_info_nce(
                    raw_q, raw_p, raw_n, plan.loss, use_in_batch=batch.uses_in_batch_negatives
                )
                if distilling:
                    all_texts = queries + positives + [n for negs in negatives for n in negs]
                    student_rows = [raw_q, raw_p] + [t for t in raw_n if t is not None]
                    student_unit = ad.l2_normalize_rows(ad.concat(student_rows, axis=0))
                    teacher_rows = []
                    with ad.no_grad():
                        for text in all_texts:
                            emb = teacher_cache.get(text)
                            if emb is None:
                                toks = tokenize(text, teacher.config.max_seq_len)
                                raw = raw_sequence_embedding(teacher, toks).values[0]
                                emb = raw / np.linalg.norm(raw)
                                teacher_cache[text] = emb
                            teacher_rows.append(emb)
                    dloss = distill_loss(student_unit, np.stack(teacher_rows))
                    total = ad.add(contrastive, ad.scale(dloss, lam))
                    dval = float(dloss.values)
                else:
                    total = contrastive
                    dval = 0.0
                ad.backward(total)
            except NonFiniteError as e:
                raise NonFiniteError(f"non-finite loss at step {step}: {e}") from e
            adamw_step(params, {k: p.grad for k, p in params.items()}, opt, plan.learning_rate)
            metrics.append(StepMetrics(step, float(total.values), float(contrastive.values), dval))
    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir)
    return model, metrics
