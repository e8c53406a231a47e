"""Command-line entry point: gen-data, sample, train, eval, ablate."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .data import (Corpus, GeneratorConfig, Vocab, assemble_fewshot, build_vocab,
                   generate_synthetic, load_corpora, random_sample, save_jsonl, spis_sample,
                   split_corpus)
from .evaluation import EvalReport, evaluate, write_pca, write_representations
from .experiments import SUITES, comparison_table, run_variant
from .model import load_checkpoint
from .sqlexec import ToyDatabase
from .training import TrainConfig, build_model, train

SPLITS = ("train", "validation", "test")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests and config plumbing


def content_hash(path) -> str:
    """Git blob hash of a file."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    inputs: Dict[str, str]
    outputs: List[str]
    version: str = __version__
    created: str = ""

    def write(self, out_dir: Path) -> Path:
        self.created = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        path = out_dir / "manifest.json"
        missing = [p for p in self.outputs if not (out_dir / p).exists()]
        if missing:
            raise CliError(f"outputs missing before manifest write: {missing}")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, assignments: Sequence[str]) -> dict:
    """Apply ``a.b=value`` overrides; values are parsed as JSON when possible."""
    config = json.loads(json.dumps(config))
    for item in assignments or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CliError(f"--set {key}: {p} is not an object")
        node[parts[-1]] = parse_value(value)
    return config


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return data


def expand_corpus_paths(paths: Sequence[str], split: Optional[str] = None) -> List[Path]:
    """Files are used as given; a directory contributes its ``{split}.*.jsonl`` files."""
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found = sorted(p.glob(f"{split}.*.jsonl" if split else "*.jsonl"))
            if not found:
                raise CliError(f"{p}: no {split or ''} JSONL files found")
            out += found
        elif p.exists():
            out.append(p)
        else:
            raise CliError(f"{p}: no such file or directory")
    return out


def read_corpus(paths: Sequence[str], split: Optional[str] = None) -> (Corpus, List[Path]):
    files = expand_corpus_paths(paths, split)
    return load_corpora(files), files


def _write_json(path: Path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> List[str]:
    raw = apply_overrides(load_config(args.config), args.set)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = GeneratorConfig.from_json(raw)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid generator config: {e}") from None
    corpus, db = generate_synthetic(cfg)
    splits = split_corpus(corpus, cfg.split, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for split in SPLITS:
        for lang in corpus.languages:
            name = f"{split}.{lang}.jsonl"
            save_jsonl(Corpus(splits[split].by_lang(lang), (lang,), corpus.task), out / name)
            written.append(name)
    if db is not None:
        db.save(out / "database.json")
        written.append("database.json")
    _write_json(out / "generator_config.json", cfg.to_json())
    written.append("generator_config.json")
    RunManifest("gen-data", cfg.seed, {"generator": cfg.to_json()}, {}, written).write(out)
    return written


def cmd_sample(args) -> List[str]:
    corpus, files = read_corpus(args.corpus, "train")
    rate = args.rate
    if args.method == "spis":
        if float(rate) != int(float(rate)):
            raise CliError(f"spis rate must be an integer, got {rate}")
        rate = int(float(rate))
    else:
        rate = float(rate)
        if not 0 <= rate <= 1:
            raise CliError(f"random rate must be a fraction in [0, 1], got {rate}")
    if rate < 0:
        raise CliError("rate must be nonnegative")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    samples = {}
    for lang in corpus.languages:
        if lang == "en" or rate == 0:
            continue
        if args.method == "spis":
            samples[lang] = spis_sample(corpus, lang, rate, rng)
        else:
            samples[lang] = random_sample(corpus, lang, rate, rng)
    fewshot = assemble_fewshot(corpus, samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_jsonl(fewshot, out / "train.fewshot.jsonl")
    summary = {"method": args.method, "rate": rate, "seed": seed,
               "counts": {l: len(fewshot.by_lang(l)) for l in fewshot.languages},
               "available": {l: len(corpus.by_lang(l)) for l in corpus.languages}}
    if args.method == "spis":
        coverage = {}
        for lang, exs in samples.items():
            freq = {}
            for ex in corpus.by_lang(lang):
                for lab in ex.labels:
                    freq[lab] = freq.get(lab, 0) + 1
            got = {}
            for ex in exs:
                for lab in ex.labels:
                    got[lab] = got.get(lab, 0) + 1
            coverage[lang] = {lab: {"count": got.get(lab, 0), "corpus": f,
                                    "satisfied": got.get(lab, 0) >= min(rate, f)}
                              for lab, f in sorted(freq.items())}
        summary["coverage"] = coverage
    _write_json(out / "summary.json", summary)
    written = ["train.fewshot.jsonl", "summary.json"]
    RunManifest("sample", seed, {"method": args.method, "rate": rate},
                {str(f): content_hash(f) for f in files}, written).write(out)
    return written


def _train_config(args) -> TrainConfig:
    raw = apply_overrides(load_config(args.config), args.set)
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "alignment", None) == "off":
        raw.setdefault("alignment", {})
        raw["alignment"] = dict(raw["alignment"], alpha_P=0.0, beta_P=0.0)
    try:
        return TrainConfig.from_json(raw)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid train config: {e}") from None


def cmd_train(args) -> List[str]:
    cfg = _train_config(args)
    train_corpus, train_files = read_corpus(args.corpus, "train")
    val_corpus, val_files = read_corpus(args.validation, "validation")
    if val_corpus.task != train_corpus.task:
        raise CliError("training and validation corpora have different tasks")
    vocabs = build_vocab(train_corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, vocabs)
    result = train(model, train_corpus, val_corpus, cfg, vocabs, log_path=out / "steps.jsonl",
                   checkpoint_path=out / "checkpoint.pt",
                   checkpoint_extra={"task": train_corpus.task, "train_config": cfg.to_json()})
    _write_json(out / "validation_curve.json", result.validation_curve)
    written = ["checkpoint.pt", "steps.jsonl", "validation_curve.json"]
    inputs = {str(f): content_hash(f) for f in list(train_files) + list(val_files)}
    RunManifest("train", cfg.seed, {"train": cfg.to_json()}, inputs, written).write(out)
    return written


def cmd_eval(args) -> List[str]:
    model, src_itos, tgt_itos, extra = load_checkpoint(args.checkpoint)
    corpus, files = read_corpus(args.corpus, "test")
    task = extra.get("task")
    if task and task != corpus.task:
        raise CliError(f"checkpoint was trained on the {task} task, corpus is {corpus.task}")
    db = None
    if corpus.task == "sql":
        if not args.db:
            raise CliError("sql evaluation needs --db")
        db = ToyDatabase.load(args.db)
    baseline = EvalReport.load(args.baseline) if args.baseline else None
    report, examples, reps = evaluate(model, corpus, Vocab(src_itos), Vocab(tgt_itos), db,
                                      args.beam, baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    write_representations(out / "representations.tsv", examples, reps)
    write_pca(out / "pca.tsv", examples, reps)
    written = ["report.json", "representations.tsv", "pca.tsv"]
    inputs = {str(f): content_hash(f) for f in [Path(args.checkpoint)] + list(files)}
    if args.db:
        inputs[args.db] = content_hash(args.db)
    RunManifest("eval", args.seed or 0, {"beam": args.beam}, inputs, written).write(out)
    return written


def cmd_ablate(args) -> List[str]:
    if args.suite not in SUITES:
        raise CliError(f"unknown suite {args.suite!r}")
    cfg = _train_config(args)
    train_corpus, f1 = read_corpus(args.corpus, "train")
    val_corpus, f2 = read_corpus(args.validation, "validation")
    test_corpus, f3 = read_corpus(args.test, "test")
    db = ToyDatabase.load(args.db) if args.db else None
    if test_corpus.task == "sql" and db is None:
        raise CliError("sql evaluation needs --db")
    vocabs = build_vocab(train_corpus)
    seeds = args.seeds or [cfg.seed]
    outcomes = [run_variant(v, cfg, s, train_corpus, val_corpus, test_corpus, vocabs, db,
                            args.beam)
                for v in SUITES[args.suite] for s in seeds]
    table = comparison_table(outcomes, list(test_corpus.languages))
    table["suite"] = args.suite
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", table)
    langs = list(test_corpus.languages)
    with open(out / "ablation.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["row"] + langs + ["target_mean"])
        for r in table["rows"]:
            w.writerow([r["row"]] + [f"{r['accuracy'][l]:.4f}" for l in langs]
                       + [f"{r['target_mean']:.4f}"])
    written = ["ablation.json", "ablation.tsv"]
    inputs = {str(f): content_hash(f) for f in list(f1) + list(f2) + list(f3)}
    RunManifest("ablate", seeds[0], {"train": cfg.to_json(), "suite": args.suite,
                                     "seeds": seeds}, inputs, written).write(out)
    return written


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="JSON config file for this command")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (dotted keys, JSON values)")

    p = argparse.ArgumentParser(prog="minotaur", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")

    s = sub.add_parser("sample", parents=[common], help="build a few-shot training corpus")
    s.add_argument("--corpus", nargs="+", required=True)
    s.add_argument("--method", choices=("spis", "random"), required=True)
    s.add_argument("--rate", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--corpus", nargs="+", required=True)
    t.add_argument("--validation", nargs="+", required=True)
    t.add_argument("--alignment", choices=("on", "off"), default="on")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", nargs="+", required=True)
    e.add_argument("--db")
    e.add_argument("--baseline", help="report.json of a baseline run for sign tests")
    e.add_argument("--beam", type=int, default=5)

    a = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    a.add_argument("--suite", choices=sorted(SUITES), required=True)
    a.add_argument("--corpus", nargs="+", required=True)
    a.add_argument("--validation", nargs="+", required=True)
    a.add_argument("--test", nargs="+", required=True)
    a.add_argument("--db")
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--beam", type=int, default=5)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "sample": cmd_sample, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        written = COMMANDS[args.command](args)
    except (CliError, ValueError, OSError) as e:
        print(f"minotaur {args.command}: error: {e}", file=sys.stderr)
        return 2
    for name in written:
        print(os.path.join(args.out, name))
    return 0


if __name__ == "__main__":
    sys.exit(main())
