"""Parsing metrics and latent-space analysis."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .batching import chunks, collate
from .data import Corpus, Example, Vocab
from .model import LatentParser
from .sqlexec import ExecutionFailure, ToyDatabase, execute_lf
from .training import sign_test

__all__ = [
    "ToyDatabase", "execute_lf", "ExecutionFailure", "GoldExecutionError", "sciem",
    "denotation_accuracy", "sentence_representation", "retrieval_stats", "RetrievalStats",
    "pca_project", "EvalReport", "predict", "representations", "evaluate",
]


class GoldExecutionError(ValueError):
    """A gold query failed to execute; the corpus is broken, not the model."""


def _normalize(s: str) -> str:
    return " ".join(s.lower().split())


def sciem(pred: str, gold: str) -> bool:
    return _normalize(pred) == _normalize(gold)


def denotation_matches(preds: Sequence[str], golds: Sequence[str], db: ToyDatabase) -> List[bool]:
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    out = []
    for i, (p, g) in enumerate(zip(preds, golds)):
        gold_rows = execute_lf(g, db)
        if isinstance(gold_rows, ExecutionFailure):
            raise GoldExecutionError(f"gold #{i} does not execute ({gold_rows.reason}): {g}")
        out.append(execute_lf(p, db) == gold_rows)
    return out


def denotation_accuracy(preds: Sequence[str], golds: Sequence[str], db: ToyDatabase) -> float:
    hits = denotation_matches(preds, golds, db)
    return sum(hits) / len(hits) if hits else 0.0


def sentence_representation(posterior, mask=None) -> np.ndarray:
    """Average of the per-token mean vectors, skipping masked positions.

    Accepts a GaussianSequence or a bare (T, d) array of means.
    """
    means = getattr(posterior, "means", posterior)
    m = torch.as_tensor(means).detach().double().cpu().numpy()
    if mask is not None:
        m = m[np.asarray(mask, dtype=bool)]
    if m.shape[0] == 0:
        raise ValueError("no unmasked positions")
    return m.mean(axis=0)


@dataclass
class RetrievalStats:
    mean_cosine: float
    top1: float
    top5: float
    top10: float
    mrr: float
    ranks: List[int] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("ranks")
        return d


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def retrieval_stats(reps: Mapping[Tuple[Hashable, str], Sequence[float]],
                    en: str = "en") -> RetrievalStats:
    """Rank each target representation's English partner among all other representations.

    The rank is one plus the number of other items with strictly higher
    cosine similarity to the query.
    """
    keys = list(reps)
    if not keys:
        raise ValueError("no representations")
    mat = _unit_rows(np.asarray([np.asarray(reps[k], dtype=np.float64) for k in keys]))
    index = {k: i for i, k in enumerate(keys)}
    queries = [k for k in keys if k[1] != en]
    if not queries:
        raise ValueError("no target-language representations")
    sims = mat @ mat.T
    ranks, cosines = [], []
    for q in queries:
        partner = (q[0], en)
        if partner not in index:
            raise ValueError(f"missing EN partner for parallel group {q[0]!r}")
        qi, pi = index[q], index[partner]
        row = sims[qi].copy()
        row[qi] = -np.inf
        cosines.append(row[pi])
        ranks.append(1 + int(np.sum(row > row[pi])))
    r = np.asarray(ranks)
    return RetrievalStats(
        mean_cosine=float(np.mean(cosines)),
        top1=float(np.mean(r <= 1)),
        top5=float(np.mean(r <= 5)),
        top10=float(np.mean(r <= 10)),
        mrr=float(np.mean(1.0 / r)),
        ranks=ranks,
    )


def pca_project(reps, k: int = 2) -> np.ndarray:
    x = np.asarray(reps, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_project needs at least two row vectors")
    centered = x - x.mean(axis=0)
    if not np.any(np.abs(centered) > 1e-12):
        return np.zeros((x.shape[0], k))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k]
    # fix the sign ambiguity: largest-magnitude loading of each axis is positive
    flip = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    comps = comps * flip[:, None]
    proj = centered @ comps.T
    if proj.shape[1] < k:
        proj = np.pad(proj, ((0, 0), (0, k - proj.shape[1])))
    return proj


# ---------------------------------------------------------------------------
# model-driven evaluation


@torch.no_grad()
def predict(model: LatentParser, examples: Sequence[Example], src_vocab: Vocab, tgt_vocab: Vocab,
            task: str, beam_width: int = 5, batch_size: int = 64) -> List[str]:
    """Beam-decode each example from z = mu and detokenize the logical form."""
    model.eval()
    out = []
    for chunk in chunks(list(examples), batch_size):
        b = collate(chunk, src_vocab, tgt_vocab, task)
        post = model.encode_batch(b.src, b.src_mask)
        ids = model.beam_decode(post.means, beam_width, z_mask=post.mask)
        out += [" ".join(tgt_vocab.decode(seq)) for seq in ids]
    return out


@torch.no_grad()
def representations(model: LatentParser, examples: Sequence[Example], src_vocab: Vocab,
                    tgt_vocab: Vocab, task: str, batch_size: int = 128) -> np.ndarray:
    model.eval()
    rows = []
    for chunk in chunks(list(examples), batch_size):
        b = collate(chunk, src_vocab, tgt_vocab, task)
        post = model.encode_batch(b.src, b.src_mask)
        m = post.mask.to(post.means.dtype)[..., None]
        rows.append(((post.means * m).sum(1) / m.sum(1)).double().numpy())
    return np.concatenate(rows) if rows else np.zeros((0, model.cfg.d))


@dataclass
class EvalReport:
    metric: str
    accuracy: Dict[str, float]
    mean_accuracy: float
    std_accuracy: float
    target_mean_accuracy: float
    retrieval: Optional[dict]
    correct: Dict[str, List[bool]]
    exact_match: Dict[str, float] = field(default_factory=dict)
    sign_test: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: Mapping) -> "EvalReport":
        return cls(**data)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _sample_std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def evaluate(model: LatentParser, corpus: Corpus, src_vocab: Vocab, tgt_vocab: Vocab,
             db: Optional[ToyDatabase] = None, beam_width: int = 5,
             baseline: Optional[EvalReport] = None, with_retrieval: bool = True,
             languages: Optional[Sequence[str]] = None):
    """Per-language accuracy plus retrieval statistics.

    Returns (report, example list, representation matrix). The sql task is
    scored by denotation, the tree task by SCIEM.
    """
    task = corpus.task
    if task == "sql" and db is None:
        raise ValueError("sql evaluation needs a database")
    langs = list(languages or corpus.languages)
    accuracy, correct, exact = {}, {}, {}
    for lang in langs:
        exs = corpus.by_lang(lang)
        preds = predict(model, exs, src_vocab, tgt_vocab, task, beam_width)
        golds = [ex.lf for ex in exs]
        if task == "sql":
            hits = denotation_matches(preds, golds, db)
        else:
            hits = [sciem(p, g) for p, g in zip(preds, golds)]
        correct[lang] = hits
        accuracy[lang] = sum(hits) / len(hits) if hits else 0.0
        exact[lang] = float(np.mean([sciem(p, g) for p, g in zip(preds, golds)])) if golds else 0.0

    examples = [ex for lang in langs for ex in corpus.by_lang(lang)]
    reps = representations(model, examples, src_vocab, tgt_vocab, task)
    retrieval = None
    if with_retrieval and "en" in langs and len(langs) > 1:
        en_ids = {ex.parallel_id for ex in examples if ex.lang == "en"}
        keyed = {(ex.parallel_id, ex.lang): r for ex, r in zip(examples, reps)
                 if ex.parallel_id in en_ids}
        retrieval = retrieval_stats(keyed).to_json()

    targets = [accuracy[l] for l in langs if l != "en"]
    report = EvalReport(
        metric="denotation" if task == "sql" else "sciem",
        accuracy=accuracy,
        mean_accuracy=float(np.mean(list(accuracy.values()))) if accuracy else 0.0,
        std_accuracy=_sample_std(list(accuracy.values())),
        target_mean_accuracy=float(np.mean(targets)) if targets else math.nan,
        retrieval=retrieval,
        correct=correct,
        exact_match=exact,
    )
    if baseline is not None:
        for lang in langs:
            if lang in baseline.correct and len(baseline.correct[lang]) == len(correct[lang]):
                report.sign_test[lang] = sign_test(correct[lang], baseline.correct[lang]).p_value
    return report, examples, reps


def write_representations(path, examples: Sequence[Example], reps: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "lang", "parallel_id"] + [f"d{i}" for i in range(reps.shape[1])])
        for ex, r in zip(examples, reps):
            w.writerow([ex.id, ex.lang, ex.parallel_id] + [f"{v:.6g}" for v in r])


def write_pca(path, examples: Sequence[Example], reps: np.ndarray) -> None:
    proj = pca_project(reps, 2) if len(reps) >= 2 else np.zeros((len(reps), 2))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "lang", "x", "y"])
        for ex, (x, y) in zip(examples, proj):
            w.writerow([ex.id, ex.lang, f"{x:.6g}", f"{y:.6g}"])
