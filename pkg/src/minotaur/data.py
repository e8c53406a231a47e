"""Corpora: synthetic generation, sentinel words, few-shot sampling, JSONL I/O, vocabularies."""
from __future__ import annotations

import json
import math
import random
import re
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import domains
from .sqlexec import ToyDatabase, execute_lf, ExecutionFailure

TASKS = ("tree", "sql")
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
_SENTINEL = re.compile(r"^word(\d+)$")
JSONL_FIELDS = ("id", "lang", "utterance", "lf", "parallel_id")


@dataclass
class Example:
    id: str
    lang: str
    tokens: List[str]
    lf: str
    parallel_id: str
    labels: frozenset = frozenset()
    extra: dict = field(default_factory=dict)

    @property
    def utterance(self) -> str:
        return " ".join(self.tokens)


@dataclass
class Corpus:
    examples: List[Example]
    languages: Tuple[str, ...] = ()
    task: str = "tree"

    def __post_init__(self):
        if not self.languages:
            seen = []
            for ex in self.examples:
                if ex.lang not in seen:
                    seen.append(ex.lang)
            if "en" in seen:
                seen.remove("en")
                seen.insert(0, "en")
            self.languages = tuple(seen)
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    def __len__(self) -> int:
        return len(self.examples)

    def by_lang(self, lang: str) -> List[Example]:
        return [ex for ex in self.examples if ex.lang == lang]

    def lookup(self) -> Dict[Tuple[str, str], Example]:
        """(parallel_id, lang) -> example."""
        return {(ex.parallel_id, ex.lang): ex for ex in self.examples}

    def check_parallel(self) -> None:
        groups: Dict[str, List[Example]] = {}
        for ex in self.examples:
            groups.setdefault(ex.parallel_id, []).append(ex)
        for pid, members in groups.items():
            if not any(m.lang == "en" for m in members):
                raise ValueError(f"parallel group {pid} has no EN member")
            if len({m.labels for m in members}) != 1:
                raise ValueError(f"parallel group {pid} has inconsistent labels")


# ---------------------------------------------------------------------------
# logical forms and sentinels


def extract_labels(lf: str, task: str) -> frozenset:
    toks = lf.split()
    if task == "tree":
        return frozenset(t.lstrip("[") for t in toks if t.lstrip("[").startswith(("IN:", "SL:")))
    labels = set()
    up = [t.upper() for t in toks]
    if "SELECT" in up and "FROM" in up:
        i, j = up.index("SELECT"), up.index("FROM")
        cols = [t for t in toks[i + 1:j] if t.upper() != "DISTINCT"]
        if cols and j + 1 < len(toks):
            labels.add(f"SELECT:{toks[j + 1]}.{cols[0]}")
    for k, t in enumerate(toks):
        if t == "=" and k > 0:
            labels.add(f"WHERE:{toks[k - 1]}")
    return frozenset(labels)


def infer_task(lf: str) -> str:
    return "sql" if lf.lstrip().upper().startswith("SELECT") else "tree"


def sentinelize(tokens: Sequence[str]) -> Tuple[List[str], Dict[int, str]]:
    """Prefix every token with a positional ``word{i}`` marker (1-based).

    Returns the augmented tokens and a map from token index to its sentinel.
    """
    out, index = [], {}
    for i, t in enumerate(tokens):
        s = f"word{i + 1}"
        out += [s, t]
        index[i] = s
    return out, index


def desentinelize(augmented: Sequence[str]) -> List[str]:
    if len(augmented) % 2:
        raise ValueError("sentinelized sequence must have even length")
    return list(augmented[1::2])


def is_sentinel(token: str) -> bool:
    return _SENTINEL.match(token) is not None


def source_tokens(example: Example, task: str) -> List[str]:
    return sentinelize(example.tokens)[0] if task == "tree" else list(example.tokens)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class LanguageSpec:
    code: str
    lexicon: Optional[Dict[str, str]] = None  # None: generated pseudo-words
    reorder: str = "none"
    expansions: Dict[str, List[str]] = field(default_factory=dict)
    auto_expansions: int = 0


REORDER_RULES = ("none", "reverse", "head_final", "swap_pairs")


@dataclass
class GeneratorConfig:
    task: str = "tree"
    num_frames: int = 2500
    seed: int = 0
    intents: Optional[List[str]] = None
    languages: List[LanguageSpec] = field(default_factory=lambda: [
        LanguageSpec("en"),
        LanguageSpec("xn"),
        LanguageSpec("xf", reorder="reverse",
                     expansions={"cheapest": ["le", "moins", "cher"],
                                 "earliest": ["a", "plus", "tot"]},
                     auto_expansions=12),
    ])
    split: Dict[str, float] = field(default_factory=lambda: {
        "train": 0.8, "validation": 0.1, "test": 0.1})

    def __post_init__(self):
        self.languages = [l if isinstance(l, LanguageSpec) else LanguageSpec(**l)
                          for l in self.languages]
        if self.task not in TASKS:
            raise ValueError(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.num_frames < 1:
            raise ValueError("num_frames: must be positive")
        codes = [l.code for l in self.languages]
        if "en" not in codes:
            raise ValueError("languages: an 'en' entry is required")
        if len(set(codes)) != len(codes):
            raise ValueError("languages: duplicate language code")
        for l in self.languages:
            if l.reorder not in REORDER_RULES:
                raise ValueError(f"languages[{l.code}].reorder: unknown rule {l.reorder!r}")
        if set(self.split) != {"train", "validation", "test"}:
            raise ValueError("split: needs train, validation and test fractions")
        if any(v < 0 for v in self.split.values()) or abs(sum(self.split.values()) - 1) > 1e-9:
            raise ValueError("split: fractions must be nonnegative and sum to 1")
        samplers = domains.TREE_SAMPLERS if self.task == "tree" else domains.SQL_SAMPLERS
        for name in self.intents or []:
            if name not in samplers:
                raise ValueError(f"intents: unknown {self.task} intent {name!r}")

    @classmethod
    def from_json(cls, data: Mapping) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown GeneratorConfig field(s): {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        return asdict(self)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(n: int, rng: random.Random, taken: set) -> List[str]:
    out = []
    while len(out) < n:
        syl = rng.randint(2, 3)
        w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _lang_rng(seed: int, code: str, salt: str) -> random.Random:
    return random.Random(seed * 1_000_003 + zlib.crc32(f"{code}/{salt}".encode()))


def resolve_language(spec: LanguageSpec, content_vocab: Sequence[str], seed: int,
                     taken: set) -> LanguageSpec:
    """Fill in generated lexicon/expansions and validate the transform spec."""
    content = sorted(content_vocab)
    expansions = {k: list(v) for k, v in spec.expansions.items()}
    if spec.auto_expansions:
        rng = _lang_rng(seed, spec.code, "expansions")
        pool = [w for w in content if w not in expansions]
        for w in rng.sample(pool, min(spec.auto_expansions, len(pool))):
            expansions[w] = _pseudo_words(rng.randint(2, 3), rng, taken)
    for w, exp in expansions.items():
        if not 1 <= len(exp) <= 3:
            raise ValueError(f"{spec.code}: expansion for {w!r} must have 1-3 tokens")
    lexicon = spec.lexicon
    if lexicon is None:
        rng = _lang_rng(seed, spec.code, "lexicon")
        lexicon = dict(zip(content, _pseudo_words(len(content), rng, taken)))
    else:
        missing = [w for w in content if w not in lexicon and w not in expansions]
        if missing:
            raise ValueError(f"{spec.code}: lexicon does not cover {missing[:5]}")
        values = list(lexicon.values())
        if len(set(values)) != len(values):
            raise ValueError(f"{spec.code}: lexicon is not a bijection")
        clash = set(values) & domains.ENTITY_TOKENS
        if clash:
            raise ValueError(f"{spec.code}: lexicon maps onto entity tokens {sorted(clash)[:5]}")
    return LanguageSpec(spec.code, dict(lexicon), spec.reorder, expansions, 0)


def realize_tokens(tokens: Sequence[str], spec: LanguageSpec) -> List[List[str]]:
    """Per-token target realization (expansion first, then lexicon, else unchanged)."""
    out = []
    for t in tokens:
        if t in spec.expansions:
            out.append(list(spec.expansions[t]))
        elif spec.lexicon and t in spec.lexicon:
            out.append([spec.lexicon[t]])
        else:
            out.append([t])
    return out


def reorder_phrases(phrases: List, rule: str) -> List:
    if rule == "none" or len(phrases) < 2:
        return list(phrases)
    if rule == "reverse":
        return list(reversed(phrases))
    if rule == "head_final":
        return list(phrases[1:]) + [phrases[0]]
    if rule == "swap_pairs":
        out = list(phrases)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise ValueError(f"unknown reorder rule {rule!r}")


def realize_frame(phrases: List[domains.Phrase], spec: Optional[LanguageSpec]):
    """Surface tokens plus, for every slot index, its (1-based) token positions."""
    if spec is not None:
        new = []
        for ph in phrases:
            realized = realize_tokens([t for t, _ in ph], spec)
            new.append([(w, s) for (t, s), ws in zip(ph, realized) for w in ws])
        phrases = reorder_phrases(new, spec.reorder)
    tokens, positions = [], {}
    for ph in phrases:
        for t, s in ph:
            tokens.append(t)
            if s is not None:
                positions.setdefault(s, []).append(len(tokens))
    return tokens, positions


def tree_lf(intent: str, slots: Sequence[str], positions: Mapping[int, List[int]]) -> str:
    parts = [f"[{intent}"]
    for i, name in enumerate(slots):
        words = " ".join(f"word{p}" for p in sorted(positions[i]))
        parts.append(f"[{name} {words} ]")
    parts.append("]")
    return " ".join(parts)


def generate_synthetic(cfg: GeneratorConfig) -> Tuple[Corpus, Optional[ToyDatabase]]:
    """Realize ``cfg.num_frames`` distinct frames in every configured language.

    Returns the corpus and, for the sql task, the database the logical forms
    execute against.
    """
    rng = random.Random(cfg.seed)
    frames, seen = [], set()
    attempts = 0
    while len(frames) < cfg.num_frames:
        attempts += 1
        if attempts > 200 * cfg.num_frames:
            raise ValueError("num_frames: template space exhausted before enough unique frames")
        if cfg.task == "tree":
            fr = domains.sample_tree_frame(rng, cfg.intents)
        else:
            fr = domains.sample_sql_frame(rng, cfg.intents)
        key = tuple(t for ph in fr.phrases for t, _ in ph)
        if key in seen:
            continue
        seen.add(key)
        frames.append(fr)

    content = sorted({t for fr in frames for ph in fr.phrases for t, _ in ph}
                     - domains.ENTITY_TOKENS)
    taken = set(content) | set(domains.ENTITY_TOKENS)
    specs = []
    for spec in cfg.languages:
        if spec.code == "en":
            specs.append(None)
        else:
            for ws in spec.expansions.values():
                taken.update(ws)
            specs.append(resolve_language(spec, content, cfg.seed, taken))

    db = ToyDatabase.from_json(domains.build_flight_database(cfg.seed)) if cfg.task == "sql" else None
    examples = []
    for i, fr in enumerate(frames):
        pid = f"{cfg.task}-{i:05d}"
        for lang_cfg, spec in zip(cfg.languages, specs):
            tokens, positions = realize_frame(fr.phrases, spec)
            if cfg.task == "tree":
                lf = tree_lf(fr.intent, fr.slots, positions)
            else:
                lf = domains.sql_lf(fr)
            lang = lang_cfg.code
            examples.append(Example(f"{pid}-{lang}", lang, tokens, lf, pid,
                                    extract_labels(lf, cfg.task)))
    corpus = Corpus(examples, tuple(l.code for l in cfg.languages), cfg.task)
    if db is not None:
        for ex in corpus.by_lang("en"):
            if isinstance(execute_lf(ex.lf, db), ExecutionFailure):
                raise AssertionError(f"generated gold LF is not executable: {ex.lf}")
    return corpus, db


def split_corpus(corpus: Corpus, fractions: Mapping[str, float], seed: int) -> Dict[str, Corpus]:
    """Split by parallel group so translations never straddle splits."""
    pids = sorted({ex.parallel_id for ex in corpus.examples})
    order = np.random.default_rng(seed).permutation(len(pids))
    names = ["train", "validation", "test"]
    bounds, acc = [], 0.0
    for n in names:
        acc += fractions[n]
        bounds.append(int(round(acc * len(pids))))
    assign = {}
    start = 0
    for n, end in zip(names, bounds):
        for k in order[start:end]:
            assign[pids[k]] = n
        start = end
    out = {n: [] for n in names}
    for ex in corpus.examples:
        out[assign[ex.parallel_id]].append(ex)
    return {n: Corpus(v, corpus.languages, corpus.task) for n, v in out.items()}


# ---------------------------------------------------------------------------
# few-shot sampling


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _lang_examples(corpus: Corpus, lang: str) -> List[Example]:
    if lang not in corpus.languages:
        raise ValueError(f"language {lang!r} not in corpus")
    return corpus.by_lang(lang)


def spis_sample(corpus: Corpus, lang: str, rate: int, rng=None) -> List[Example]:
    """Samples-per-intent-and-slot selection.

    Walks a seeded permutation and keeps an example when any of its labels is
    still below ``rate`` in the subset; stops once every label has
    min(rate, corpus frequency) occurrences.
    """
    if int(rate) != rate or rate < 1:
        raise ValueError("SPIS rate must be a positive integer")
    pool = _lang_examples(corpus, lang)
    if not pool:
        return []
    freq = Counter(l for ex in pool for l in ex.labels)
    need = {l: min(rate, f) for l, f in freq.items()}
    counts = Counter()
    kept = []
    order = _as_rng(rng).permutation(len(pool))
    # one pass always suffices: a label left short has had every carrier kept
    for k in order:
        ex = pool[k]
        if any(counts[l] < rate for l in ex.labels):
            kept.append(ex)
            counts.update(ex.labels)
            if all(counts[l] >= n for l, n in need.items()):
                break
    return kept


def random_sample(corpus: Corpus, lang: str, fraction: float, rng=None) -> List[Example]:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    pool = _lang_examples(corpus, lang)
    n = min(len(pool), math.ceil(round(fraction * len(pool), 9)))
    idx = _as_rng(rng).choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(idx)]


def assemble_fewshot(corpus: Corpus, samples: Mapping[str, Sequence[Example]]) -> Corpus:
    """Full English split plus the sampled target-language subsets."""
    en = corpus.by_lang("en")
    en_ids = {ex.parallel_id for ex in en}
    out = list(en)
    for lang, exs in samples.items():
        if lang == "en":
            continue
        for ex in exs:
            if ex.parallel_id not in en_ids:
                raise ValueError(f"{ex.id}: no EN partner for parallel group {ex.parallel_id}")
            out.append(ex)
    langs = ("en",) + tuple(l for l in corpus.languages if l != "en" and samples.get(l))
    return Corpus(out, langs, corpus.task)


# ---------------------------------------------------------------------------
# JSONL


def example_to_record(ex: Example) -> dict:
    rec = dict(ex.extra)
    rec.update(id=ex.id, lang=ex.lang, utterance=ex.utterance, lf=ex.lf, parallel_id=ex.parallel_id)
    return rec


def save_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            fh.write(json.dumps(example_to_record(ex), ensure_ascii=False, sort_keys=True) + "\n")


def load_jsonl(path, task: Optional[str] = None) -> Corpus:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: record must be a JSON object")
            missing = [k for k in JSONL_FIELDS if k not in rec]
            if missing:
                raise ValueError(f"{path}:{lineno}: record missing field(s) {missing}")
            bad = [k for k in JSONL_FIELDS if not isinstance(rec[k], str)]
            if bad:
                raise ValueError(f"{path}:{lineno}: field(s) {bad} must be strings")
            if task is None:
                task = infer_task(rec["lf"])
            extra = {k: v for k, v in rec.items() if k not in JSONL_FIELDS}
            examples.append(Example(rec["id"], rec["lang"], rec["utterance"].split(), rec["lf"],
                                    rec["parallel_id"], extract_labels(rec["lf"], task), extra))
    return Corpus(examples, task=task or "tree")


def load_corpora(paths: Iterable[Union[str, Path]], task: Optional[str] = None) -> Corpus:
    examples, out_task = [], task
    for p in paths:
        c = load_jsonl(p, task)
        out_task = out_task or c.task
        examples.extend(c.examples)
    return Corpus(examples, task=out_task or "tree")


# ---------------------------------------------------------------------------
# vocabularies


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(tokens)
        if tuple(self.itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> List[int]:
        unk = self.stoi["<unk>"]
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in ids]


def build_vocab(corpus: Corpus, min_sentinels: int = 32) -> Tuple[Vocab, Vocab]:
    """Source vocabulary over surface tokens; closed target vocabulary over LF symbols."""
    if not corpus.examples:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    longest = max(len(ex.tokens) for ex in corpus.examples)
    sentinels = [f"word{i}" for i in range(1, max(longest, min_sentinels) + 1)]
    sent_set = set(sentinels)
    surface = sorted({t for ex in corpus.examples for t in ex.tokens} - sent_set - set(SPECIALS))
    symbols = sorted({t for ex in corpus.examples for t in ex.lf.split()
                      if not is_sentinel(t)} - set(SPECIALS))
    return Vocab(list(SPECIALS) + sentinels + surface), Vocab(list(SPECIALS) + sentinels + symbols)
