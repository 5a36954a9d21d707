import io
import random

import pytest

from faplearn.corpus import (EOS, GO, PAD, UNK, CorpusTooSmall, DuplicateId,
                             MalformedLine, Trace, Vocabulary, build_vocabulary,
                             drop_rare_families, encode_trace, parse_corpus,
                             serialize_corpus, split_corpus)


def mk(i, family, calls):
    return Trace(f"t{i}", family, tuple(calls))


class TestParse:
    def test_basic_line(self):
        traces = parse_corpus(["s1\tworm\tCreateFileA,WriteFile\n"])
        assert traces == [Trace("s1", "worm", ("CreateFileA", "WriteFile"))]

    def test_empty_stream(self):
        assert parse_corpus([]) == []

    def test_comments_and_blank_lines_skipped(self):
        traces = parse_corpus(["# header\n", "\n", "a\tf\tX\n"])
        assert [t.id for t in traces] == ["a"]

    def test_two_fields_is_malformed(self):
        with pytest.raises(MalformedLine) as exc:
            parse_corpus(["s1\tworm\n"])
        assert exc.value.line_number == 1

    def test_empty_call_rejected(self):
        with pytest.raises(MalformedLine):
            parse_corpus(["s1\tworm\tA,,B\n"])
        with pytest.raises(MalformedLine):
            parse_corpus(["s1\tworm\t\n"])

    def test_bad_api_name_rejected(self):
        with pytest.raises(MalformedLine):
            parse_corpus(["s1\tworm\tOpen File\n"])

    def test_duplicate_id(self):
        with pytest.raises(DuplicateId):
            parse_corpus(["a\tf\tX\n", "a\tf\tY\n"])

    def test_parse_serialize_round_trip(self):
        rng = random.Random(5)
        traces = [mk(i, rng.choice("abc"),
                     [rng.choice(["X", "Y", "Zw_1"]) for _ in range(rng.randint(1, 6))])
                  for i in range(40)]
        text = serialize_corpus(traces)
        assert parse_corpus(io.StringIO(text)) == traces


class TestDropRareFamilies:
    def test_counting(self):
        corpus = [mk(0, "a", "X"), mk(1, "a", "X"), mk(2, "a", "X"), mk(3, "b", "X")]
        kept = drop_rare_families(corpus, 2)
        assert {t.family for t in kept} == {"a"}
        assert [t.id for t in kept] == ["t0", "t1", "t2"]

    def test_min_count_one_is_identity(self):
        corpus = [mk(0, "a", "X"), mk(1, "b", "X")]
        assert drop_rare_families(corpus, 1) == corpus

    def test_table1_sized_corpus_unchanged(self):
        # 7430 traces over four families with the published counts; the
        # smallest family has 865 members, so any threshold up to 865 keeps all
        sizes = {"trojan-fakeav": 3247, "adware": 2354, "packed": 964, "worm": 865}
        corpus = []
        for fam, n in sizes.items():
            corpus.extend(mk(f"{fam}{i}", fam, "X") for i in range(n))
        assert len(corpus) == 7430
        assert drop_rare_families(corpus, 865) == corpus
        assert len(drop_rare_families(corpus, 866)) == 7430 - 865

    def test_idempotent(self):
        rng = random.Random(0)
        corpus = [mk(i, rng.choice("abcd"), "X") for i in range(50)]
        once = drop_rare_families(corpus, 10)
        assert drop_rare_families(once, 10) == once


class TestSplit:
    def test_sizes_n100(self):
        corpus = [mk(i, "f", "X") for i in range(100)]
        s = split_corpus(corpus, seed=1)
        assert (len(s.train), len(s.validation), len(s.test)) == (75, 5, 20)

    def test_sizes_n7430(self):
        # golden value from the rounding rule: round(.75n)=5573, round(.05n)=372
        corpus = [mk(i, "f", "X") for i in range(7430)]
        s = split_corpus(corpus, seed=3)
        assert (len(s.train), len(s.validation), len(s.test)) == (5573, 372, 1485)

    def test_deterministic(self):
        corpus = [mk(i, "f", "X") for i in range(57)]
        a = split_corpus(corpus, seed=9)
        b = split_corpus(corpus, seed=9)
        assert a == b

    def test_seed_changes_membership(self):
        corpus = [mk(i, "f", "X") for i in range(60)]
        a = split_corpus(corpus, seed=0)
        b = split_corpus(corpus, seed=1)
        assert {t.id for t in a.train} != {t.id for t in b.train}

    def test_too_small(self):
        with pytest.raises(CorpusTooSmall):
            split_corpus([mk(i, "f", "X") for i in range(19)], seed=0)

    def test_disjoint_exhaustive_property(self):
        rng = random.Random(11)
        for _ in range(25):
            n = rng.randint(20, 400)
            seed = rng.randint(0, 2**32)
            corpus = [mk(i, "f", "X") for i in range(n)]
            s = split_corpus(corpus, seed)
            ids = [t.id for part in (s.train, s.validation, s.test) for t in part]
            assert len(ids) == n
            assert set(ids) == {t.id for t in corpus}
            assert len(s.train) == int(0.75 * n + 0.5)
            assert len(s.validation) == int(0.05 * n + 0.5)


class TestVocabulary:
    def test_ordering_rule(self):
        corpus = [mk(0, "f", ["A", "A", "A", "B"])]
        v = build_vocabulary(corpus, 0)
        assert v.size == 6
        assert v.token_to_index == {"A": 4, "B": 5}

    def test_min_token_count(self):
        corpus = [mk(0, "f", ["A", "A", "A", "B"])]
        v = build_vocabulary(corpus, 2)
        assert v.size == 5
        assert v.encode_token("B") == UNK

    def test_reserved_name_collision(self):
        # an API literally named PAD is an ordinary token; reserved
        # entries are identified by index only
        corpus = [mk(0, "f", ["PAD", "PAD", "GO"])]
        v = build_vocabulary(corpus, 0)
        assert v.token_to_index["PAD"] == 4
        assert v.token_to_index["GO"] == 5
        assert v.index_to_token[PAD] == "PAD"

    def test_lexicographic_tiebreak(self):
        corpus = [mk(0, "f", ["B", "A"])]
        v = build_vocabulary(corpus, 0)
        assert v.token_to_index == {"A": 4, "B": 5}

    def test_round_trip_token_index(self):
        corpus = [mk(0, "f", ["Alpha", "Beta", "Gamma", "Beta"])]
        v = build_vocabulary(corpus, 0)
        for tok, idx in v.token_to_index.items():
            assert v.index_to_token[idx] == tok

    def test_file_round_trip(self, tmp_path):
        corpus = [mk(0, "f", ["A", "B", "B"])]
        v = build_vocabulary(corpus, 0)
        path = tmp_path / "vocab.tsv"
        v.save(path)
        lines = path.read_text().splitlines()
        assert lines[:4] == ["0\tPAD", "1\tGO", "2\tEOS", "3\tUNK"]
        v2 = Vocabulary.load(path)
        assert v2.index_to_token == v.index_to_token
        assert v2.token_to_index == v.token_to_index


class TestEncode:
    def test_single_known_token(self):
        v = Vocabulary.from_tokens(["A"])
        assert encode_trace(v, mk(0, "f", ["A"]), 8) == [4]

    def test_unknown_maps_to_unk(self):
        v = Vocabulary.from_tokens(["A"])
        assert encode_trace(v, mk(0, "f", ["Zzz"]), 8) == [UNK]

    def test_truncation_keeps_prefix(self):
        calls = [f"T{i}" for i in range(300)]
        v = Vocabulary.from_tokens(sorted(set(calls)))
        t = mk(0, "f", calls)
        enc = encode_trace(v, t, 256)
        assert len(enc) == 256
        # oracle: direct slice then per-token encode
        expected = [v.token_to_index[c] for c in calls[:256]]
        assert enc == expected

    def test_no_padding_added(self):
        v = Vocabulary.from_tokens(["A"])
        assert len(encode_trace(v, mk(0, "f", ["A", "A"]), 10)) == 2
