"""Named training configurations and the helper that trains and scores one of them."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import (Corpus, GeneratorConfig, Vocab, assemble_fewshot, build_vocab,
                   generate_synthetic, random_sample, split_corpus)
from .evaluation import EvalReport, evaluate
from .sqlexec import ToyDatabase
from .training import TrainConfig, TrainResult, build_model, sign_test, train


@dataclass(frozen=True)
class Variant:
    name: str
    individual_metric: str = "w2"
    aggregate_metric: str = "mmd"
    deterministic: bool = False
    parallel: bool = True
    off: bool = False

    def apply(self, base: TrainConfig) -> TrainConfig:
        a = base.alignment
        if self.off:
            align = dataclasses.replace(a, alpha_P=0.0, beta_P=0.0)
        else:
            align = dataclasses.replace(a, individual_metric=self.individual_metric,
                                        aggregate_metric=self.aggregate_metric)
        model = dict(base.model, deterministic_bottleneck=self.deterministic)
        return dataclasses.replace(base, alignment=align, model=model,
                                   parallel_alignment=self.parallel)


BASELINE = Variant("baseline", off=True)
MINOTAUR = Variant("W2+MMD")

SUITES: Dict[str, List[Variant]] = {
    "table3": [
        Variant("KL", "kl", "none"),
        Variant("W2", "w2", "none"),
        Variant("MMD", "none", "mmd"),
        Variant("KL+MMD", "kl", "mmd"),
        Variant("W2+MMD", "w2", "mmd"),
    ],
    "table4": [
        Variant("MMD", "none", "mmd", deterministic=True),
        Variant("KL", "stat_kl", "none", deterministic=True),
        Variant("L2", "l2", "none", deterministic=True),
    ],
    "nonparallel": [
        Variant("D_Z|X only", "w2", "none", parallel=False),
        Variant("D_Z only", "none", "mmd", parallel=False),
        Variant("D_Z|X + D_Z", "w2", "mmd", parallel=False),
        Variant("parallel reference", "w2", "mmd"),
    ],
}


@dataclass
class RunOutcome:
    variant: Variant
    seed: int
    report: EvalReport
    result: TrainResult = field(repr=False, default=None)


def run_variant(variant: Variant, base: TrainConfig, seed: int, train_corpus: Corpus,
                validation: Corpus, test: Corpus, vocabs: Sequence[Vocab],
                db: Optional[ToyDatabase] = None, beam_width: int = 5, keep_model: bool = False,
                log_path=None, checkpoint_path=None) -> RunOutcome:
    cfg = dataclasses.replace(variant.apply(base), seed=seed)
    model = build_model(cfg, vocabs)
    result = train(model, train_corpus, validation, cfg, vocabs, log_path, checkpoint_path)
    report, _, _ = evaluate(result.model, test, vocabs[0], vocabs[1], db, beam_width)
    if not keep_model:
        result = TrainResult(None, result.step_logs, result.validation_curve)
    return RunOutcome(variant, seed, report, result)


def comparison_table(outcomes: Sequence[RunOutcome], languages: Sequence[str]) -> dict:
    """Per-row accuracies averaged over seeds, plus pairwise sign-test p-values.

    Sign tests pool the per-example outcomes of all seeds and target languages.
    """
    rows: Dict[str, List[RunOutcome]] = {}
    for o in outcomes:
        rows.setdefault(o.variant.name, []).append(o)
    targets = [l for l in languages if l != "en"]
    table = []
    pooled = {}
    for name, runs in rows.items():
        runs = sorted(runs, key=lambda o: o.seed)
        acc = {l: sum(r.report.accuracy[l] for r in runs) / len(runs) for l in languages}
        tgt = sum(acc[l] for l in targets) / len(targets) if targets else float("nan")
        table.append({"row": name, "seeds": [r.seed for r in runs], "accuracy": acc,
                      "target_mean": tgt})
        pooled[name] = [c for r in runs for l in targets for c in r.report.correct[l]]
    names = list(rows)
    pvalues = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if len(pooled[a]) == len(pooled[b]):
                pvalues[f"{a} vs {b}"] = sign_test(pooled[a], pooled[b]).p_value
    return {"rows": table, "sign_test": pvalues}


# ---------------------------------------------------------------------------
# desk protocol: synthetic sql corpus, 5% random target sampling


DESK_TRAIN = dict(learning_rate=2e-3, batch_size=16, max_epochs=10)


@dataclass
class FewShotSetup:
    train: Corpus
    validation: Corpus
    test: Corpus
    vocabs: tuple
    db: Optional[ToyDatabase]


def prepare_fewshot(sample_seed: int, task: str = "sql", num_frames: int = 2500,
                    fraction: float = 0.05, corpus_seed: int = 0) -> FewShotSetup:
    """Generate and split a corpus, then keep full English plus a random target fraction.

    Vocabularies come from the few-shot training corpus only, so target words
    outside the sample map to <unk>.
    """
    cfg = GeneratorConfig(task=task, num_frames=num_frames, seed=corpus_seed)
    corpus, db = generate_synthetic(cfg)
    splits = split_corpus(corpus, cfg.split, corpus_seed)
    rng = np.random.default_rng(sample_seed)
    samples = {l: random_sample(splits["train"], l, fraction, rng)
               for l in corpus.languages if l != "en"}
    train_corpus = assemble_fewshot(splits["train"], samples)
    return FewShotSetup(train_corpus, splits["validation"], splits["test"],
                        build_vocab(train_corpus), db)
