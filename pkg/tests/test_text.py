import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lvit import tensor as T
from lvit.synth import SynthParams, build_dataset
from lvit.tensor import Tensor
from lvit.text import (
    PAD_ID,
    VOCAB,
    BankEntry,
    ContrastiveBank,
    Location,
    ParseError,
    ReportValidationError,
    StructuredReport,
    embed_tokens,
    encode,
    parse_report,
    render_report,
    select_contrastive,
    text_sim,
)

SENTENCE = "Bilateral pulmonary infection, two infected areas, upper left lung and upper right lung."


class TestParse:
    def test_bilateral_example(self):
        r = parse_report(SENTENCE)
        assert r.laterality == "bilateral"
        assert r.lesion_count == 2
        assert r.locations == [Location("upper", "left"), Location("upper", "right")]

    def test_unilateral_example(self):
        r = parse_report("Unilateral pulmonary infection, one infected area, middle left lung.")
        assert (r.laterality, r.lesion_count, r.locations) == ("unilateral", 1, [Location("middle", "left")])

    def test_out_of_grammar(self):
        with pytest.raises(ParseError) as info:
            parse_report("lungs broken everywhere")
        assert info.value.position == 0

    def test_whitespace_and_case(self):
        r = parse_report("  UNILATERAL pulmonary   infection ,one infected area,middle lower right lung .")
        assert r.locations == [Location("middle lower", "right")]

    @pytest.mark.parametrize(
        "raw,position",
        [
            ("Bilateral pulmonary infection, two infected areas, upper left lung", 11),
            ("Bilateral pulmonary infection, ten infected areas, upper left lung.", 4),
            ("Unilateral pulmonary infection, one infected area, upper left lung. extra", 12),
            ("Unilateral pulmonary infection, one infected area, all upper left lung.", 9),
        ],
    )
    def test_parse_error_positions(self, raw, position):
        with pytest.raises(ParseError) as info:
            parse_report(raw)
        assert info.value.position == position

    def test_count_disagreement(self):
        with pytest.raises(ReportValidationError):
            parse_report("Unilateral pulmonary infection, two infected areas, upper left lung.")

    def test_laterality_disagreement(self):
        with pytest.raises(ReportValidationError):
            parse_report("Bilateral pulmonary infection, one infected area, upper left lung.")
        r = parse_report("Bilateral pulmonary infection, one infected area, upper left lung.", validate=False)
        assert r.lesion_count == 1

    def test_roundtrip(self):
        r = parse_report(SENTENCE)
        assert render_report(r) == SENTENCE
        assert parse_report(render_report(r)) == r

    def test_synth_reports_parse(self):
        ds = build_dataset(1, 60, SynthParams(image_size=32))
        for case in ds.cases:
            assert parse_report(case.report_text) == case.report


class TestEncode:
    def test_tokens_in_vocab(self):
        ids = encode(parse_report(SENTENCE))
        assert len(ids) == 16
        assert all(0 <= i < len(VOCAB) for i in ids)
        assert ids.count(PAD_ID) == 16 - 13

    def test_too_long(self):
        with pytest.raises(ValueError):
            encode(parse_report(SENTENCE), max_tokens=8)

    def test_embed_shapes(self):
        table = Tensor(np.random.default_rng(0).normal(size=(len(VOCAB), 4)))
        ids = encode(parse_report(SENTENCE))
        assert embed_tokens(ids, table).shape == (16, 4)
        assert np.all(embed_tokens([PAD_ID] * 5, table).data == 0.0)

    def test_embed_out_of_range(self):
        table = Tensor(np.zeros((len(VOCAB), 4)))
        with pytest.raises(IndexError):
            embed_tokens([len(VOCAB)], table)

    def test_embed_gradient_is_counts(self):
        table = Tensor(np.random.default_rng(1).normal(size=(len(VOCAB), 3)), requires_grad=True)
        ids = np.array([[2, 4, 4, PAD_ID], [4, 7, PAD_ID, PAD_ID]])
        grads = T.backward(T.sum(embed_tokens(ids, table)), [table])
        counts = np.bincount(ids[ids != PAD_ID], minlength=len(VOCAB))
        np.testing.assert_array_equal(grads[table], np.repeat(counts[:, None], 3, axis=1))
        err = T.finite_diff_check(lambda t: T.sum(embed_tokens(ids, t)), table, eps=1e-4)
        assert err < 1e-6


class TestSimilarity:
    def test_examples(self):
        assert text_sim([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
        assert text_sim([1.0, 0.0], [0.0, 3.0]) == 0.0
        assert text_sim([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.70710678, abs=1e-8)
        assert text_sim([0.0, 0.0], [1.0, 1.0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            text_sim([1.0], [1.0, 2.0])

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        st.floats(0.01, 100),
    )
    def test_properties(self, a, b, k):
        s = text_sim(a, b)
        assert -1.0 <= s <= 1.0
        assert s == pytest.approx(text_sim(b, a), abs=1e-12)
        if np.linalg.norm(a) > 1e-3:
            assert text_sim(np.multiply(k, a), b) == pytest.approx(s, abs=1e-9)


def make_bank(vectors):
    # hand-set vectors bypass the embedding table
    bank = ContrastiveBank(np.eye(3))
    for i, v in enumerate(vectors):
        bank.entries.append(BankEntry(np.asarray(v, float), np.full((2, 2), i, dtype=np.uint8), f"c{i}"))
    return bank


class TestContrastive:
    def test_self_match(self):
        table = np.random.default_rng(2).normal(size=(len(VOCAB), 4))
        bank = ContrastiveBank(table)
        reports = [
            SENTENCE,
            "Unilateral pulmonary infection, one infected area, middle left lung.",
            "Unilateral pulmonary infection, one infected area, lower right lung.",
        ]
        for i, raw in enumerate(reports):
            bank.add(f"case{i}", parse_report(raw).tokens, np.full((2, 2), i))
        mask, sim = select_contrastive(bank.vector(parse_report(reports[1]).tokens), bank)
        assert sim == pytest.approx(1.0)
        assert np.all(mask == 1)

    def test_single_entry(self):
        bank = make_bank([[0.0, 1.0, 0.0]])
        mask, _ = select_contrastive(np.array([1.0, 0.0, 0.0]), bank)
        assert np.all(mask == 0)

    def test_empty_bank(self):
        with pytest.raises(ValueError):
            select_contrastive(np.ones(3), ContrastiveBank(np.eye(3)))

    def test_ties_go_to_lowest_id(self):
        bank = make_bank([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        mask, _ = select_contrastive(np.array([1.0, 0.0, 0.0]), bank)
        assert np.all(mask == 1)

    def test_mask_shape_mismatch(self):
        bank = ContrastiveBank(np.eye(len(VOCAB)))
        bank.add("a", [2, 4], np.zeros((2, 2)))
        with pytest.raises(ValueError):
            bank.add("b", [2, 4], np.zeros((3, 3)))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.lists(st.floats(-5, 5), min_size=3, max_size=3), min_size=3, max_size=3),
        st.lists(st.floats(-5, 5), min_size=3, max_size=3),
        st.floats(0.1, 50),
    )
    def test_argmax_matches_scan(self, vectors, query, k):
        bank = make_bank(vectors)
        mask, sim = select_contrastive(np.array(query), bank)
        sims = [text_sim(query, v) for v in vectors]
        assert sim == max(sims)
        assert mask.flat[0] == int(np.argmax(sims))
        scaled, _ = select_contrastive(k * np.array(query), bank)
        assert scaled.flat[0] == mask.flat[0]


@settings(max_examples=80, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.sets(st.sampled_from(["upper", "middle", "lower"]), min_size=1).map(
                lambda s: " ".join(v for v in ("upper", "middle", "lower") if v in s)
            )
            | st.just("all"),
            st.sampled_from(["left", "right"]),
        ),
        min_size=1,
        max_size=4,
    )
)
def test_render_parse_idempotent(locs):
    locations = [Location(v, s) for v, s in locs]
    lateral = "bilateral" if {s for _, s in locs} == {"left", "right"} else "unilateral"
    report = StructuredReport("", lateral, len(locations), locations)
    once = parse_report(render_report(report), max_tokens=32)
    assert once == report
    assert parse_report(render_report(once), max_tokens=32) == once
