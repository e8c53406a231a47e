import json
import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minotaur.data import (Corpus, Example, GeneratorConfig, LanguageSpec, Vocab, assemble_fewshot,
                           build_vocab, desentinelize, extract_labels, generate_synthetic,
                           is_sentinel, load_corpora, load_jsonl, random_sample, realize_frame,
                           resolve_language, save_jsonl, sentinelize, source_tokens, spis_sample,
                           split_corpus)
from minotaur.sqlexec import ExecutionFailure, execute_lf


@pytest.fixture(scope="module")
def tree_corpus():
    return generate_synthetic(GeneratorConfig(task="tree", num_frames=300, seed=1))[0]


@pytest.fixture(scope="module")
def sql_corpus():
    return generate_synthetic(GeneratorConfig(task="sql", num_frames=300, seed=1))


def toy(labels_per_example, lang="en"):
    exs = [Example(f"e{i}", lang, ["t"], "[IN:X ]", f"p{i}", frozenset(ls))
           for i, ls in enumerate(labels_per_example)]
    return Corpus(exs, task="tree")


class TestSentinels:
    def test_worked_example(self):
        aug, index = sentinelize(["Who", "attended", "Yale?"])
        assert aug == ["word1", "Who", "word2", "attended", "word3", "Yale?"]
        assert index == {0: "word1", 1: "word2", 2: "word3"}

    def test_single_token(self):
        assert sentinelize(["hi"])[0] == ["word1", "hi"]

    @given(st.lists(st.text(min_size=1, max_size=6), min_size=1, max_size=20))
    def test_round_trip(self, tokens):
        assert desentinelize(sentinelize(tokens)[0]) == tokens

    def test_odd_length_rejected(self):
        with pytest.raises(ValueError):
            desentinelize(["word1"])

    def test_is_sentinel(self):
        assert is_sentinel("word12") and not is_sentinel("words") and not is_sentinel("word")

    def test_source_tokens_by_task(self):
        ex = Example("a", "en", ["x", "y"], "", "p")
        assert source_tokens(ex, "tree") == ["word1", "x", "word2", "y"]
        assert source_tokens(ex, "sql") == ["x", "y"]


class TestLabels:
    def test_tree(self):
        lf = "[IN:GET_WEATHER [SL:LOCATION word3 ] [SL:DATE_TIME word5 word6 ] ]"
        assert extract_labels(lf, "tree") == {"IN:GET_WEATHER", "SL:LOCATION", "SL:DATE_TIME"}

    def test_sql(self):
        lf = "SELECT fare FROM flight WHERE from_city = denver AND to_city = boston"
        assert extract_labels(lf, "sql") == {"SELECT:flight.fare", "WHERE:from_city",
                                             "WHERE:to_city"}


class TestGenerator:
    def test_expansion_example(self):
        spec = LanguageSpec("xf", lexicon={"show": "show'", "fare": "fare'"},
                            expansions={"cheapest": ["le", "moins", "cher"]})
        phrase = [("show", None), ("cheapest", None), ("fare", None)]
        tokens, _ = realize_frame([phrase], spec)
        assert tokens == ["show'", "le", "moins", "cher", "fare'"]

    def test_same_seed_same_bytes(self, tmp_path):
        paths = []
        for i in range(2):
            corpus, _ = generate_synthetic(GeneratorConfig(task="tree", num_frames=80, seed=7))
            paths.append(tmp_path / f"{i}.jsonl")
            save_jsonl(corpus, paths[-1])
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_different_seed_differs(self):
        a, _ = generate_synthetic(GeneratorConfig(task="tree", num_frames=40, seed=1))
        b, _ = generate_synthetic(GeneratorConfig(task="tree", num_frames=40, seed=2))
        assert [e.lf for e in a.examples] != [e.lf for e in b.examples]

    @pytest.mark.parametrize("which", ["tree_corpus", "sql_corpus"])
    def test_parallel_groups_share_labels(self, which, request):
        got = request.getfixturevalue(which)
        corpus = got[0] if isinstance(got, tuple) else got
        groups = {}
        for ex in corpus.examples:
            groups.setdefault(ex.parallel_id, []).append(ex)
        assert all(len(g) == len(corpus.languages) for g in groups.values())
        for g in groups.values():
            assert len({ex.labels for ex in g}) == 1
            assert any(ex.lang == "en" for ex in g)
        corpus.check_parallel()

    def test_sql_groups_share_lf_and_denotation(self, sql_corpus):
        corpus, db = sql_corpus
        groups = {}
        for ex in corpus.examples:
            groups.setdefault(ex.parallel_id, []).append(ex)
        for g in groups.values():
            assert len({ex.lf for ex in g}) == 1
            rows = [execute_lf(ex.lf, db) for ex in g]
            assert not isinstance(rows[0], ExecutionFailure)
            assert all(r == rows[0] for r in rows)

    def test_tree_lfs_differ_only_in_sentinels(self, tree_corpus):
        groups = {}
        for ex in tree_corpus.examples:
            groups.setdefault(ex.parallel_id, []).append(ex)
        strip = lambda lf: re.sub(r"word\d+", "W", lf)
        for g in groups.values():
            assert len({re.sub(r"(W )+", "W ", strip(ex.lf)) for ex in g}) == 1

    def test_sentinels_referenced_by_lf_exist(self, tree_corpus):
        for ex in tree_corpus.examples:
            aug = set(sentinelize(ex.tokens)[0])
            refs = [t for t in ex.lf.split() if is_sentinel(t)]
            assert refs and all(r in aug for r in refs), ex.id

    def test_far_language_reorders(self, tree_corpus):
        lookup = tree_corpus.lookup()
        en = tree_corpus.by_lang("en")
        moved = sum(lookup[(e.parallel_id, "xf")].lf != e.lf for e in en)
        assert moved > len(en) // 2

    def test_resolve_language_validation(self):
        with pytest.raises(ValueError, match="1-3"):
            resolve_language(LanguageSpec("x", expansions={"a": ["p", "q", "r", "s"]}),
                             ["a"], 0, set())
        with pytest.raises(ValueError, match="bijection"):
            resolve_language(LanguageSpec("x", lexicon={"a": "z", "b": "z"}), ["a", "b"], 0, set())
        with pytest.raises(ValueError, match="cover"):
            resolve_language(LanguageSpec("x", lexicon={"a": "z"}), ["a", "b"], 0, set())

    def test_generated_lexicon_is_bijective(self):
        spec = resolve_language(LanguageSpec("q"), ["a", "b", "c", "d"], 3, set())
        assert sorted(spec.lexicon) == ["a", "b", "c", "d"]
        assert len(set(spec.lexicon.values())) == 4

    @pytest.mark.parametrize("kw", [
        dict(task="graph"), dict(num_frames=0), dict(languages=[{"code": "xn"}]),
        dict(languages=[{"code": "en"}, {"code": "en"}]),
        dict(languages=[{"code": "en"}, {"code": "x", "reorder": "shuffle"}]),
        dict(split={"train": 0.5, "validation": 0.1, "test": 0.1}),
        dict(intents=["IN:NOPE"]),
    ])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            GeneratorConfig(**kw)

    def test_config_json(self):
        cfg = GeneratorConfig(num_frames=9)
        assert GeneratorConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
        with pytest.raises(ValueError, match="unknown"):
            GeneratorConfig.from_json({"frames": 3})

    def test_split_keeps_groups_together(self, tree_corpus):
        splits = split_corpus(tree_corpus, {"train": 0.8, "validation": 0.1, "test": 0.1}, 0)
        seen = {}
        for name, c in splits.items():
            for ex in c.examples:
                assert seen.setdefault(ex.parallel_id, name) == name
        assert sum(len(c) for c in splits.values()) == len(tree_corpus)


def _label_counts(exs):
    counts = {}
    for ex in exs:
        for l in ex.labels:
            counts[l] = counts.get(l, 0) + 1
    return counts


class TestSPIS:
    def test_toy_rate_one_covers_every_label(self):
        corpus = toy([{"A", "s1"}, {"A", "s2"}, {"B", "s1"}, {"B"}, {"A"}])
        for seed in range(10):
            got = spis_sample(corpus, "en", 1, seed)
            assert set(_label_counts(got)) == {"A", "B", "s1", "s2"}

    def test_scarce_labels_fully_retained(self):
        corpus = toy([{"A"}] * 10 + [{"A", "rare"}, {"B", "rare"}])
        got = spis_sample(corpus, "en", 5, 0)
        assert _label_counts(got)["rare"] == 2
        assert _label_counts(got)["B"] == 1

    def test_empty_and_missing(self):
        corpus = Corpus([], languages=("en", "xn"), task="tree")
        assert spis_sample(corpus, "xn", 3, 0) == []
        with pytest.raises(ValueError):
            spis_sample(corpus, "de", 3, 0)
        with pytest.raises(ValueError):
            spis_sample(corpus, "en", 0, 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(1, 6))
    def test_coverage_bound(self, seed, rate):
        rng = np.random.default_rng(seed)
        labels = [frozenset(rng.choice(list("ABCDEFG"), size=rng.integers(1, 4), replace=False))
                  for _ in range(40)]
        corpus = toy(labels)
        got = spis_sample(corpus, "en", rate, seed)
        full, sub = _label_counts(corpus.examples), _label_counts(got)
        assert all(sub.get(l, 0) >= min(rate, f) for l, f in full.items())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(1, 4), st.integers(1, 4))
    def test_monotone_in_rate(self, seed, r, extra):
        rng = np.random.default_rng(seed)
        labels = [frozenset(rng.choice(list("ABCDE"), size=rng.integers(1, 3), replace=False))
                  for _ in range(30)]
        corpus = toy(labels)
        small = {e.id for e in spis_sample(corpus, "en", r, seed)}
        large = {e.id for e in spis_sample(corpus, "en", r + extra, seed)}
        assert small <= large


class TestRandomSample:
    def test_ceiling(self):
        corpus = toy([{"A"}] * 448)
        assert len(random_sample(corpus, "en", 0.1, 0)) == 45
        assert len(random_sample(corpus, "en", 0.05, 0)) == math.ceil(0.05 * 448)

    def test_full_fraction(self):
        corpus = toy([{"A"}] * 17)
        assert random_sample(corpus, "en", 1.0, 3) == corpus.examples

    def test_seeded(self):
        corpus = toy([{"A"}] * 100)
        assert random_sample(corpus, "en", 0.2, 5) == random_sample(corpus, "en", 0.2, 5)

    def test_validation(self):
        corpus = toy([{"A"}] * 3)
        for bad in (0.0, 1.5):
            with pytest.raises(ValueError):
                random_sample(corpus, "en", bad, 0)
        with pytest.raises(ValueError):
            random_sample(corpus, "xn", 0.5, 0)


class TestAssemble:
    def test_bookkeeping_and_partners(self, tree_corpus):
        samples = {l: random_sample(tree_corpus, l, 0.1, 0) for l in ("xn", "xf")}
        few = assemble_fewshot(tree_corpus, samples)
        n_en = len(tree_corpus.by_lang("en"))
        assert len(few) == n_en + sum(len(s) for s in samples.values())
        lookup = few.lookup()
        for s in samples.values():
            for ex in s:
                assert (ex.parallel_id, "en") in lookup

    def test_zero_shot(self, tree_corpus):
        few = assemble_fewshot(tree_corpus, {})
        assert few.languages == ("en",)
        assert {e.lang for e in few.examples} == {"en"}

    def test_orphan_rejected(self):
        corpus = toy([{"A"}])
        orphan = Example("o", "xn", ["t"], "[IN:X ]", "nowhere")
        with pytest.raises(ValueError):
            assemble_fewshot(corpus, {"xn": [orphan]})


class TestJsonl:
    def test_round_trip(self, tree_corpus, tmp_path):
        path = tmp_path / "c.jsonl"
        save_jsonl(tree_corpus, path)
        back = load_jsonl(path)
        assert back.task == "tree"
        assert back.examples == tree_corpus.examples
        assert back.languages == tree_corpus.languages

    def test_sql_task_inferred(self, sql_corpus, tmp_path):
        path = tmp_path / "s.jsonl"
        save_jsonl(sql_corpus[0], path)
        assert load_jsonl(path).task == "sql"

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = {"id": "a", "lang": "en", "utterance": "x", "lf": "[IN:X ]", "parallel_id": "p"}
        bad = dict(good, id="b")
        del bad["lf"]
        path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(ValueError, match=r"bad\.jsonl:2.*lf"):
            load_jsonl(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(ValueError, match=":1:"):
            load_jsonl(path)

    def test_extra_fields_survive(self, tmp_path):
        path = tmp_path / "x.jsonl"
        rec = {"id": "a", "lang": "en", "utterance": "x y", "lf": "[IN:X ]", "parallel_id": "p",
               "source": "hand"}
        path.write_text(json.dumps(rec) + "\n")
        c = load_jsonl(path)
        assert c.examples[0].extra == {"source": "hand"}
        out = tmp_path / "y.jsonl"
        save_jsonl(c, out)
        assert json.loads(out.read_text()) == rec

    def test_load_corpora_concatenates(self, tree_corpus, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_jsonl(Corpus(tree_corpus.by_lang("en"), task="tree"), a)
        save_jsonl(Corpus(tree_corpus.by_lang("xn"), task="tree"), b)
        c = load_corpora([a, b])
        assert c.languages == ("en", "xn") and len(c) == 2 * len(tree_corpus.by_lang("en"))


class TestVocab:
    def test_closed_target_vocab(self, tree_corpus):
        src, tgt = build_vocab(tree_corpus)
        surface = {t for ex in tree_corpus.examples for t in ex.tokens}
        lf_syms = {t for ex in tree_corpus.examples for t in ex.lf.split()}
        assert not (set(tgt.itos) & surface)
        assert set(tgt.itos) >= lf_syms
        assert surface <= set(src.itos)
        for i in range(1, 33):
            assert f"word{i}" in src and f"word{i}" in tgt

    def test_stable_under_reserialization(self, tree_corpus, tmp_path):
        path = tmp_path / "c.jsonl"
        save_jsonl(tree_corpus, path)
        a, b = build_vocab(tree_corpus), build_vocab(load_jsonl(path))
        assert a[0].itos == b[0].itos and a[1].itos == b[1].itos

    def test_unknown_maps_to_unk(self):
        v = Vocab(["<pad>", "<bos>", "<eos>", "<unk>", "a"])
        assert v.encode(["a", "zzz"]) == [4, 3]
        assert v.decode([4]) == ["a"]

    def test_errors(self):
        with pytest.raises(ValueError):
            Vocab(["a"])
        with pytest.raises(ValueError):
            Vocab(["<pad>", "<bos>", "<eos>", "<unk>", "a", "a"])
        with pytest.raises(ValueError):
            build_vocab(Corpus([], task="tree"))
