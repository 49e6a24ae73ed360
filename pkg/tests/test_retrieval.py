from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import case_record, metric_record, model_record, refinement_record, write_bank
from oracles import oracle_tfidf_rank, oracle_tokenize, oracle_votes
from tsrefine.banks import load_banks
from tsrefine.errors import EmptyBank, NoCandidates
from tsrefine.retrieval import (
    index_cases,
    retrieve,
    retrieve_and_vote,
    tokenize,
    top_k_models,
)


def test_tokenize_rules():
    assert tokenize("The AR(2) lag-8 model, v2!") == ["the", "ar", "lag", "model", "v2"]
    assert tokenize("a b c") == []  # single-char tokens dropped
    assert tokenize("") == []
    assert oracle_tokenize("The AR(2) lag-8 model, v2!") == tokenize("The AR(2) lag-8 model, v2!")


def toy_bank(tmp_path, descriptions, models=("m1", "m2", "m3")):
    """descriptions: list of (case_id, description, model_id)."""
    return write_bank(
        tmp_path,
        cases=[case_record(cid, desc, mid) for cid, desc, mid in descriptions],
        refinements=[refinement_record("r1")],
        models=[model_record(m, family="linear", ref="gd_linear") for m in models],
        metrics=[metric_record("rmse")],
    )


# worked example, hand-checked: three single-sentence cases, query overlaps
# case-a on "linear trend" and case-b on "seasonal"; idf down-weights the
# shared token "series"
WORKED = [
    ("case-a", "linear trend series", "m1"),
    ("case-b", "seasonal series pattern", "m2"),
    ("case-c", "random walk noise", "m3"),
]


def worked_similarities():
    n = 3
    idf = {
        "linear": math.log(4 / 2) + 1,
        "trend": math.log(4 / 2) + 1,
        "series": math.log(4 / 3) + 1,
        "seasonal": math.log(4 / 2) + 1,
        "pattern": math.log(4 / 2) + 1,
        "random": math.log(4 / 2) + 1,
        "walk": math.log(4 / 2) + 1,
        "noise": math.log(4 / 2) + 1,
    }

    def unit(tokens):
        vec = {t: idf[t] for t in tokens}
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return {t: v / norm for t, v in vec.items()}

    query = unit(["linear", "trend"])
    a = unit(["linear", "trend", "series"])
    b = unit(["seasonal", "series", "pattern"])
    c = unit(["random", "walk", "noise"])
    sim = lambda d: sum(d.get(t, 0.0) * q for t, q in query.items())
    return sim(a), sim(b), sim(c)


def test_worked_example(tmp_path, banks=None):
    root = toy_bank(tmp_path, WORKED)
    bankset = load_banks(root)
    index = index_cases(bankset, "forecasting")
    ranked = retrieve(index, "linear trend", k_cases=3)
    sa, sb, sc = worked_similarities()
    assert ranked[0][0] == "case-a"
    assert ranked[0][1] == pytest.approx(sa, rel=1e-12)
    # cases b and c have zero overlap with the query
    assert sb == 0.0 and sc == 0.0
    assert {ranked[1][0], ranked[2][0]} == {"case-b", "case-c"}
    # zero-similarity ties order by ascending case id
    assert ranked[1][0] == "case-b"


def test_retrieval_matches_oracle_on_repo_bank(banks):
    index = index_cases(banks, "forecasting")
    case_docs = [(c.id, c.description) for c in banks.cases if c.task_kind == "forecasting"]
    queries = [
        "autoregressive correlated linear windows rmse",
        "smooth level slowly drifting sensor",
        "random walk noise quotes",
        "weekly retail demand seasonal",
        "electricity hourly load lag",
    ]
    for query in queries:
        for k in (1, 3, 5, 8):
            got = retrieve(index, query, k_cases=k)
            want = oracle_tfidf_rank(case_docs, query, k)
            assert [c for c, _ in got] == [c for c, _ in want]
            for (_, gs), (_, ws) in zip(got, want):
                assert gs == pytest.approx(ws, rel=1e-9, abs=1e-12)


def test_vote_aggregation_matches_oracle(banks):
    index = index_cases(banks, "forecasting")
    recommended = {c.id: c.recommended_model for c in banks.cases}
    query = "autoregressive correlated linear lag windows minimize rmse"
    ranked = retrieve(index, query, k_cases=5)
    votes, rationale, shortfall = top_k_models(ranked, banks, k=2)
    want = oracle_votes(ranked, recommended, 2)
    assert [m for m, _ in votes] == [m for m, _ in want]
    for (_, gs), (_, ws) in zip(votes, want):
        assert gs == pytest.approx(ws, rel=1e-9)
    assert not shortfall
    for model_id, score in votes:
        assert f"model {model_id} score {score:.4f}" in rationale


def test_vote_tie_breaks_on_model_id(tmp_path):
    # two models each backed by one case with identical descriptions -> equal
    # votes; ascending model id wins
    root = toy_bank(
        tmp_path,
        [
            ("case-a", "alpha beta gamma", "m2"),
            ("case-b", "alpha beta gamma", "m1"),
        ],
        models=("m1", "m2"),
    )
    bankset = load_banks(root)
    index = index_cases(bankset, "forecasting")
    ranked = retrieve(index, "alpha beta", k_cases=2)
    assert ranked[0][1] == pytest.approx(ranked[1][1])
    votes, _, _ = top_k_models(ranked, bankset, k=2)
    assert [m for m, _ in votes] == ["m1", "m2"]


def test_shortfall_flag(tmp_path):
    root = toy_bank(tmp_path, [("case-a", "alpha beta", "m1")], models=("m1",))
    bankset = load_banks(root)
    index = index_cases(bankset, "forecasting")
    result = retrieve_and_vote(index, bankset, "alpha", k_cases=1, k_models=2)
    assert result.shortfall
    assert "shortfall" in result.rationale
    assert [m for m, _ in result.model_votes] == ["m1"]


def test_kind_filter_and_empty_bank(banks, tmp_path):
    gen_index = index_cases(banks, "generation")
    assert all(cid.startswith("case-g") for cid in gen_index.case_ids)
    root = toy_bank(tmp_path, [("case-a", "alpha", "m1")], models=("m1",))
    bankset = load_banks(root)
    with pytest.raises(EmptyBank):
        index_cases(bankset, "generation")


def test_retrieve_k_validation(banks):
    index = index_cases(banks, "forecasting")
    with pytest.raises(ValueError):
        retrieve(index, "query", k_cases=0)
    with pytest.raises(ValueError):
        top_k_models((("case-f01", 1.0),), banks, k=0)


def test_no_candidates_on_empty_ranked(banks):
    with pytest.raises(NoCandidates):
        top_k_models((), banks, k=2)


def test_index_is_stable_and_frozen(banks):
    a = index_cases(banks, "forecasting")
    b = index_cases(banks, "forecasting")
    assert a.case_ids == b.case_ids
    assert np.array_equal(np.asarray(a.vectors), np.asarray(b.vectors))
    with pytest.raises(ValueError):
        np.asarray(a.vectors)[0, 0] = 1.0


def test_query_with_no_known_tokens_ranks_by_id(banks):
    index = index_cases(banks, "forecasting")
    ranked = retrieve(index, "zzzz qqqq", k_cases=3)
    assert [c for c, _ in ranked] == ["case-f01", "case-f02", "case-f03"]
    assert all(s == 0.0 for _, s in ranked)
