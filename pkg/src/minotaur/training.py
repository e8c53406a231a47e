"""Episodic few-shot training with periodic cross-lingual alignment steps."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.stats import binomtest
from torch import Tensor

from .divergence import AlignmentConfig, mmd_unbiased, pairwise_token_divergence, prior_regularizer
from .batching import chunks, collate
from .model import (LatentParser, ModelConfig, save_checkpoint, sequence_cross_entropy,
                    teacher_forcing_pair)

LOSS_FIELDS = ("cross_entropy_en", "cross_entropy_tgt", "prior_reg", "d_individual",
               "d_aggregate")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 10
    episodic_period: int = 20
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    parallel_alignment: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    early_stopping_patience: int = 2
    grad_clip: float = 1.0
    max_steps: Optional[int] = None
    reparameterization_scale: str = "std"
    model: Dict = field(default_factory=dict)  # ModelConfig overrides (vocab sizes excluded)

    def __post_init__(self):
        if isinstance(self.alignment, Mapping):
            self.alignment = AlignmentConfig(**self.alignment)
        self.betas = tuple(self.betas)
        if self.episodic_period < 1:
            raise ValueError("episodic_period must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (MMD needs two samples per set)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stopping_patience < 1:
            raise ValueError("early_stopping_patience must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.reparameterization_scale not in ("std", "variance"):
            raise ValueError("reparameterization_scale must be 'std' or 'variance'")
        bad = set(self.model) & {"source_vocab_size", "target_vocab_size"}
        if bad:
            raise ValueError(f"model overrides may not set {sorted(bad)}")

    @classmethod
    def from_json(cls, data: Mapping) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        return asdict(self)

    def model_config(self, source_vocab_size: int, target_vocab_size: int) -> ModelConfig:
        return ModelConfig(source_vocab_size, target_vocab_size, **self.model)


@dataclass
class StepLog:
    step: int
    cross_entropy_en: float
    cross_entropy_tgt: float
    prior_reg: float
    d_individual: float
    d_aggregate: float
    total: float
    is_alignment_step: bool
    epoch: int = 0
    # unweighted divergence values; the fields above are weighted contributions to total
    raw: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


class TrainResult(NamedTuple):
    model: LatentParser
    step_logs: List[StepLog]
    validation_curve: List[float]


def _f(x) -> float:
    return float(x.detach()) if isinstance(x, Tensor) else float(x)


def _zero(like: Tensor) -> Tensor:
    return torch.zeros((), dtype=like.dtype)


def _pooled_tokens(z: Tensor, mask: Tensor) -> Tensor:
    return z[mask]


def _forward_half(model: LatentParser, batch, cfg: TrainConfig, gen: torch.Generator):
    """Encode, sample, decode one batch; returns (per-example CE, pooled z tokens, posterior)."""
    post = model.encode_batch(batch.src, batch.src_mask)
    enc = model.sample(post, gen, stochastic=True, scale=cfg.reparameterization_scale)
    logits, _ = model.decode_teacher_forced(enc.z, batch.gold, post.mask)
    _, tgt_out = teacher_forcing_pair(batch.gold)
    per_example = sequence_cross_entropy(logits, tgt_out, reduce=False)
    return per_example, _pooled_tokens(enc.z, post.mask), post


def _prior_term(model: LatentParser, tokens: Tensor, cfg: TrainConfig, gen) -> Tuple[Tensor, Tensor]:
    a = cfg.alignment
    if model.cfg.deterministic_bottleneck or a.alpha_prior == 0 or tokens.shape[0] < 2:
        zero = _zero(tokens)
        return zero, zero
    raw = prior_regularizer(tokens, cfg=a.kernel, rng=gen)
    return a.alpha_prior * raw, raw


def task_loss(model: LatentParser, batch, cfg: TrainConfig, gen: Optional[torch.Generator] = None,
              en: str = "en") -> Tuple[Tensor, StepLog]:
    """Batch-mean teacher-forced cross-entropy on sampled z plus the weighted prior term.

    The logged cross-entropy is split into the shares contributed by English
    and non-English examples, so the two entries add up to the batch mean.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    per_example, tokens, _ = _forward_half(model, batch, cfg, gen)
    is_en = torch.tensor([ex.lang == en for ex in batch.examples])
    n = per_example.shape[0]
    ce_en = per_example[is_en].sum() / n
    ce_tgt = per_example[~is_en].sum() / n
    prior, prior_raw = _prior_term(model, tokens, cfg, gen)
    total = ce_en + ce_tgt + prior
    log = StepLog(0, _f(ce_en), _f(ce_tgt), _f(prior), 0.0, 0.0, _f(total), False,
                  raw={"prior_mmd": _f(prior_raw)})
    return total, log


def alignment_terms(model: LatentParser, post_en, post_tgt, tokens_en: Tensor, tokens_tgt: Tensor,
                    cfg: AlignmentConfig) -> Tuple[Tensor, Tensor]:
    """(aggregate, individual) divergences between the English and target halves."""
    zero = _zero(tokens_en)
    d_agg = zero
    if cfg.aggregate_metric == "mmd" and cfg.alpha_P > 0:
        d_agg = mmd_unbiased(tokens_en, tokens_tgt, cfg.kernel)
    d_ind = zero
    if cfg.individual_metric != "none" and cfg.beta_P > 0:
        metric = cfg.individual_metric
        if model.cfg.deterministic_bottleneck and metric in ("w2", "kl"):
            raise ValueError(f"{metric} needs the latent bottleneck; use l2 or stat_kl")
        if not model.cfg.deterministic_bottleneck and metric in ("l2", "stat_kl"):
            raise ValueError(f"{metric} is only defined for the deterministic bottleneck")
        d_ind = pairwise_token_divergence(
            post_tgt.means, post_tgt.variance, post_en.means, post_en.variance, metric,
            post_tgt.mask, post_en.mask, cfg.kl_printed_form,
        ).mean()
    return d_agg, d_ind


def minotaur_step(model: LatentParser, en_batch, tgt_batch, cfg: TrainConfig,
                  gen: Optional[torch.Generator] = None) -> Tuple[Tensor, StepLog]:
    """task_loss(EN half) + task_loss(target half) + weighted alignment divergence."""
    if len(en_batch) != len(tgt_batch):
        raise ValueError("quadruple batch halves differ in size")
    if cfg.parallel_alignment:
        for a, b in zip(en_batch.examples, tgt_batch.examples):
            if a.parallel_id != b.parallel_id:
                raise ValueError(f"unpaired examples {a.id} / {b.id} in a parallel alignment batch")
    ce_en_each, tok_en, post_en = _forward_half(model, en_batch, cfg, gen)
    ce_tgt_each, tok_tgt, post_tgt = _forward_half(model, tgt_batch, cfg, gen)
    ce_en, ce_tgt = ce_en_each.mean(), ce_tgt_each.mean()
    p_en, p_en_raw = _prior_term(model, tok_en, cfg, gen)
    p_tgt, p_tgt_raw = _prior_term(model, tok_tgt, cfg, gen)
    a = cfg.alignment
    d_agg, d_ind = alignment_terms(model, post_en, post_tgt, tok_en, tok_tgt, a)
    w_agg = a.alpha_P * d_agg if a.aggregate_metric != "none" else _zero(d_agg)
    w_ind = a.beta_P * d_ind if a.individual_metric != "none" else _zero(d_ind)
    total = ce_en + ce_tgt + p_en + p_tgt + w_agg + w_ind
    log = StepLog(0, _f(ce_en), _f(ce_tgt), _f(p_en + p_tgt), _f(w_ind), _f(w_agg),
                  _f(total), True,
                  raw={"prior_mmd_en": _f(p_en_raw), "prior_mmd_tgt": _f(p_tgt_raw),
                       "d_individual": _f(d_ind), "d_aggregate": _f(d_agg)})
    return total, log


# ---------------------------------------------------------------------------
# the loop


class _Pairs:
    """Draws quadruple batches: target-language examples with an English counterpart."""

    def __init__(self, examples, parallel: bool, rng: np.random.Generator, en: str = "en"):
        self.rng = rng
        self.parallel = parallel
        self.en = [ex for ex in examples if ex.lang == en]
        by_pid = {ex.parallel_id: ex for ex in self.en}
        self.langs: List[str] = []
        self.targets: Dict[str, list] = {}
        for ex in examples:
            if ex.lang == en:
                continue
            if parallel and ex.parallel_id not in by_pid:
                continue
            self.targets.setdefault(ex.lang, []).append(ex)
        self.langs = sorted(self.targets)
        self.by_pid = by_pid
        self.cursor = 0

    def __bool__(self) -> bool:
        return bool(self.langs)

    def draw(self, size: int):
        lang = self.langs[self.cursor % len(self.langs)]
        self.cursor += 1
        pool = self.targets[lang]
        idx = self.rng.choice(len(pool), size=min(size, len(pool)), replace=False)
        if len(idx) < 2:  # MMD needs two samples per side
            idx = self.rng.choice(len(pool), size=2, replace=True)
        tgt = [pool[i] for i in idx]
        if self.parallel:
            en = [self.by_pid[ex.parallel_id] for ex in tgt]
        else:
            en = []
            for ex in tgt:
                others = [e for e in self.en if e.parallel_id != ex.parallel_id]
                if not others:
                    raise ValueError("no non-parallel English example available")
                en.append(others[int(self.rng.integers(len(others)))])
        return en, tgt


@torch.no_grad()
def validation_loss(model: LatentParser, corpus, vocabs, batch_size: int = 128) -> float:
    """Teacher-forced cross-entropy with z = mu, averaged over examples."""
    was_training = model.training
    model.eval()
    total, n = 0.0, 0
    for chunk in chunks(corpus.examples, batch_size):
        b = collate(chunk, vocabs[0], vocabs[1], corpus.task)
        post = model.encode_batch(b.src, b.src_mask)
        logits, _ = model.decode_teacher_forced(post.means, b.gold, post.mask)
        _, tgt_out = teacher_forcing_pair(b.gold)
        total += float(sequence_cross_entropy(logits, tgt_out, reduce=False).double().sum())
        n += len(chunk)
    model.train(was_training)
    return total / n


def build_model(cfg: TrainConfig, vocabs) -> LatentParser:
    torch.manual_seed(cfg.seed)
    return LatentParser(cfg.model_config(len(vocabs[0]), len(vocabs[1])))


def train(model: LatentParser, train_corpus, validation_corpus, cfg: TrainConfig, vocabs,
          log_path=None, checkpoint_path=None, en: str = "en",
          checkpoint_extra: Optional[dict] = None) -> TrainResult:
    """Run the episodic loop; returns the best-validation model, step logs and validation curve.

    Every ``episodic_period``-th global step is an alignment step on a
    quadruple batch (one target language per step, cycling) and takes the slot
    of the ordinary batch scheduled there. Validation runs once per epoch.
    """
    if not train_corpus.examples:
        raise ValueError("empty training corpus")
    if validation_corpus is None or not validation_corpus.examples:
        raise ValueError("empty validation corpus")
    task = train_corpus.task
    align = cfg.alignment.enabled
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    pairs = _Pairs(train_corpus.examples, cfg.parallel_alignment, rng, en)
    if align and not pairs:
        if cfg.parallel_alignment:
            raise ValueError("alignment requested but the corpus has no parallel pairs")
        raise ValueError("alignment requested but the corpus has no target-language examples")

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    logs: List[StepLog] = []
    curve: List[float] = []
    best, best_state, bad = math.inf, copy.deepcopy(model.state_dict()), 0
    step = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    steps_per_epoch = math.ceil(len(train_corpus.examples) / cfg.batch_size)
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            order = rng.permutation(len(train_corpus.examples))
            for s in range(steps_per_epoch):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                step += 1
                if align and step % cfg.episodic_period == 0:
                    en_ex, tgt_ex = pairs.draw(cfg.batch_size)
                    loss, log = minotaur_step(model, collate(en_ex, *vocabs, task),
                                              collate(tgt_ex, *vocabs, task), cfg, gen)
                else:
                    idx = order[s * cfg.batch_size: (s + 1) * cfg.batch_size]
                    batch = collate([train_corpus.examples[i] for i in idx], *vocabs, task)
                    loss, log = task_loss(model, batch, cfg, gen, en)
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                log.step, log.epoch = step, epoch
                logs.append(log)
                if log_fh:
                    log_fh.write(json.dumps(log.to_json(), sort_keys=True) + "\n")
            v = validation_loss(model, validation_corpus, vocabs)
            curve.append(v)
            if v < best:
                best, bad = v, 0
                best_state = copy.deepcopy(model.state_dict())
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, model, vocabs[0].itos, vocabs[1].itos,
                                    dict(checkpoint_extra or {}, epoch=epoch, step=step,
                                         validation_loss=v))
            else:
                bad += 1
                if bad >= cfg.early_stopping_patience:
                    break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, logs, curve)


# ---------------------------------------------------------------------------
# significance


@dataclass
class SignTestResult:
    p_value: float
    wins_a: int
    wins_b: int
    tie: bool


def sign_test(a: Sequence[bool], b: Sequence[bool]) -> SignTestResult:
    """Exact two-sided sign test on the discordant pairs of two paired outcome lists."""
    if len(a) != len(b):
        raise ValueError("paired outcome lists differ in length")
    wins_a = sum(1 for x, y in zip(a, b) if x and not y)
    wins_b = sum(1 for x, y in zip(a, b) if y and not x)
    n = wins_a + wins_b
    if n == 0:
        return SignTestResult(1.0, 0, 0, True)
    p = binomtest(wins_a, n, 0.5, alternative="two-sided").pvalue
    return SignTestResult(min(1.0, float(p)), wins_a, wins_b, False)
