import numpy as np
import pytest
from hypothesis import given, strategies as st

from hetkr.corpus import EntityRef, QuestionRecord
from hetkr.instructions import (
    DOMAINS,
    TEMPLATE,
    InstructionGroup,
    InstructionSet,
    InvalidDomainError,
    RenderedInstruction,
    build_retrieval_query,
    default_instructions,
    parse_paraphrases,
    render_instruction,
    sample_training_instruction,
)

G = InstructionGroup
SOURCES = {G.ALL: "All Knowledge Sources", G.TEXT: "Text", G.KG: "Knowledge Graph Triples", G.TABLE: "Table", G.INFO: "Infobox"}


def question(text="Who was the voice actor for Meg Griffin in Family Guy?", domain="tvseries"):
    return QuestionRecord(1, text, domain, "Mila Kunis", (EntityRef("Q37628", "Mila Kunis"),))


def test_schema_examples():
    assert render_instruction(G.KG, "music", 0).text == (
        "Given a question in the music domain, retrieve relevant evidence to answer the question from the Knowledge Graph Triples."
    )
    assert render_instruction(G.ALL, "football", 0).text == (
        "Given a question in the football domain, retrieve relevant evidence to answer the question from the All Knowledge Sources."
    )


def test_unknown_domain():
    with pytest.raises(InvalidDomainError):
        render_instruction(G.TABLE, "cooking", 0)


def test_index_out_of_range():
    inst = default_instructions()
    with pytest.raises(IndexError):
        inst.render(G.ALL, "books", inst.count(G.ALL) + 1)
    with pytest.raises(IndexError):
        inst.render(G.ALL, "books", -1)


def test_query_concatenation():
    inst = RenderedInstruction(G.ALL, "", "X.")
    assert build_retrieval_query(inst, question("Y?")).text == "X. Y?"


def test_empty_domain_drops_clause():
    for g in G:
        for idx in range(default_instructions().count(g) + 1):
            text = render_instruction(g, "", idx).text
            assert "[" not in text and "domain" not in text
    q = build_retrieval_query(render_instruction(G.TEXT, "", 0), question(domain=""))
    assert q.text.startswith("Given a question, retrieve relevant evidence to answer the question from the Text. ")


def test_domain_code_is_normalized():
    q = question()
    rq = build_retrieval_query(render_instruction(G.ALL, q.domain, 0), q)
    expected = TEMPLATE.replace("[domain]", "television series").replace("[source]", "All Knowledge Sources")
    assert rq.text == expected + " " + q.text


@pytest.mark.parametrize("group", list(G))
@pytest.mark.parametrize("domain", DOMAINS)
def test_canonical_mentions_once(group, domain):
    text = render_instruction(group, domain, 0).text
    assert text.count(domain) == 1
    assert text.count(SOURCES[group]) == 1


@given(st.sampled_from(list(G)), st.sampled_from(DOMAINS + ("",)), st.integers(0, 20))
def test_render_deterministic_and_filled(group, domain, idx):
    a = render_instruction(group, domain, idx)
    assert a == render_instruction(group, domain, idx)
    assert "[" not in a.text and "]" not in a.text
    assert SOURCES[group] in a.text


@given(st.text(min_size=1, max_size=40))
def test_query_length(qtext):
    inst = render_instruction(G.INFO, "movies", 3)
    rq = build_retrieval_query(inst, question(qtext))
    assert len(rq.text) == len(inst.text) + 1 + len(qtext)


def test_paraphrase_file_shape():
    inst = default_instructions()
    for g in G:
        assert inst.count(g) == 20


def test_parse_rejects_orphan_and_placeholderless():
    with pytest.raises(ValueError):
        parse_paraphrases("retrieve from the [source]\n")
    with pytest.raises(ValueError):
        parse_paraphrases("[I_All]\nno placeholder here\n")


def test_sample_matches_uniform_draw():
    inst = default_instructions()
    rng_a, rng_b = np.random.default_rng(42), np.random.default_rng(42)
    for _ in range(50):
        drawn = sample_training_instruction(G.TABLE, "books", rng_a, inst)
        assert drawn.paraphrase_index == int(rng_b.integers(0, 21))


def test_no_paraphrases_is_canonical():
    inst = InstructionSet({})
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert inst.sample(G.KG, "music", rng).paraphrase_index == 0


def test_draw_frequencies():
    inst = default_instructions()
    rng = np.random.default_rng(7)
    counts = np.bincount([inst.sample(G.ALL, "movies", rng).paraphrase_index for _ in range(21_000)], minlength=21)
    assert np.all(np.abs(counts - 1000) <= 150)
    chi2 = float(((counts - 1000.0) ** 2 / 1000.0).sum())
    # 99.9th percentile of chi-square with 20 degrees of freedom
    assert chi2 < 45.31
