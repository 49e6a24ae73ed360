"""Stage 1 case-based reasoning: tf-idf cosine retrieval over the case bank.

Deterministic lexical retrieval recommends model candidates by summing the
similarities of retrieved cases per recommended model.  All ties break on
ascending ids so rankings are total and reproducible.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .banks import BankSet
from .errors import EmptyBank, NoCandidates

_TOKEN_RE = re.compile(r"[a-z0-9]+")

DEFAULT_K_CASES = 5


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop tokens shorter than 2."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if len(t) >= 2]


@dataclass(frozen=True)
class CaseIndex:
    vocabulary: Mapping[str, int]
    idf: np.ndarray
    vectors: np.ndarray  # n_cases x vocab, rows unit-norm or zero
    case_ids: tuple[str, ...]


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[tuple[str, float], ...]
    model_votes: tuple[tuple[str, float], ...]
    rationale: str
    shortfall: bool = False

    def to_json(self) -> dict:
        return {
            "ranked": [{"case_id": c, "similarity": s} for c, s in self.ranked],
            "model_votes": [{"model_id": m, "score": s} for m, s in self.model_votes],
            "rationale": self.rationale,
            "shortfall": self.shortfall,
        }


def _tf_vector(tokens: Sequence[str], vocabulary: Mapping[str, int]) -> np.ndarray:
    vec = np.zeros(len(vocabulary))
    for tok in tokens:
        idx = vocabulary.get(tok)
        if idx is not None:
            vec[idx] += 1.0
    return vec


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    return vec / norm if norm > 0 else vec


def index_cases(banks: BankSet, kind_filter: str) -> CaseIndex:
    """Build a tf-idf index over cases of one task kind.

    idf = ln((1+N)/(1+df)) + 1; case vectors are L2-normalized raw-count tf
    scaled by idf.  Case order in the index is ascending id.
    """
    cases = [c for c in banks.cases if c.task_kind == kind_filter]
    if not cases:
        raise EmptyBank(f"no cases of kind {kind_filter!r} in bank")
    cases.sort(key=lambda c: c.id)
    docs = [tokenize(c.description) for c in cases]
    vocab: dict[str, int] = {}
    for doc in docs:
        for tok in doc:
            if tok not in vocab:
                vocab[tok] = len(vocab)
    vocab = {tok: i for i, tok in enumerate(sorted(vocab))}
    n = len(cases)
    df = np.zeros(len(vocab))
    for doc in docs:
        for tok in set(doc):
            df[vocab[tok]] += 1.0
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    vectors = np.zeros((n, len(vocab)))
    for i, doc in enumerate(docs):
        vectors[i] = _normalize(_tf_vector(doc, vocab) * idf)
    vectors.setflags(write=False)
    idf.setflags(write=False)
    return CaseIndex(
        vocabulary=vocab,
        idf=idf,
        vectors=vectors,
        case_ids=tuple(c.id for c in cases),
    )


def retrieve(index: CaseIndex, query: str, k_cases: int = DEFAULT_K_CASES) -> tuple[tuple[str, float], ...]:
    """Top-k cases by cosine similarity; ties broken by ascending case id."""
    if k_cases < 1:
        raise ValueError(f"k_cases must be >= 1, got {k_cases}")
    qvec = _normalize(_tf_vector(tokenize(query), index.vocabulary) * np.asarray(index.idf))
    sims = np.asarray(index.vectors) @ qvec
    order = sorted(range(len(index.case_ids)), key=lambda i: (-sims[i], index.case_ids[i]))
    top = order[: min(k_cases, len(order))]
    return tuple((index.case_ids[i], float(sims[i])) for i in top)


def top_k_models(
    ranked: Sequence[tuple[str, float]],
    banks: BankSet,
    k: int,
) -> tuple[tuple[tuple[str, float], ...], str, bool]:
    """Aggregate retrieved-case votes into a model shortlist.

    vote(model) = sum of similarities over retrieved cases recommending it.
    Returns (votes sorted by score desc then id asc, rationale, shortfall flag);
    shortfall is set when fewer than k distinct models were available.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    votes: dict[str, float] = {}
    contributors: dict[str, list[tuple[str, float]]] = {}
    for case_id, sim in ranked:
        case = banks.case(case_id)
        model_id = case.recommended_model
        votes[model_id] = votes.get(model_id, 0.0) + sim
        contributors.setdefault(model_id, []).append((case_id, sim))
    if not votes:
        raise NoCandidates("no retrieved case recommends a resolvable model")
    ordered = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))
    shortfall = len(ordered) < k
    top = ordered[: min(k, len(ordered))]
    lines = []
    for model_id, score in top:
        parts = ", ".join(f"{cid} ({sim:.4f})" for cid, sim in contributors[model_id])
        lines.append(f"model {model_id} score {score:.4f} from cases: {parts}")
    if shortfall:
        lines.append(f"shortfall: only {len(ordered)} distinct model(s) among retrieved cases, requested {k}")
    return tuple(top), "\n".join(lines), shortfall


def retrieve_and_vote(
    index: CaseIndex,
    banks: BankSet,
    query: str,
    k_cases: int = DEFAULT_K_CASES,
    k_models: int = 2,
) -> RetrievalResult:
    """Full stage-1 pipeline: rank cases, then vote models."""
    ranked = retrieve(index, query, k_cases)
    model_votes, rationale, shortfall = top_k_models(ranked, banks, k_models)
    return RetrievalResult(ranked=ranked, model_votes=model_votes, rationale=rationale, shortfall=shortfall)
