import math

import numpy as np
import pytest
from scipy import sparse

from cbvr.core import RankedList
from cbvr.exceptions import ConfigError, DataError
from cbvr.semantic import (
    ConceptVocabulary,
    SemanticDocMatrix,
    SemanticQuery,
    SimilarityProvider,
    modality_fuse,
    read_docs,
    retrieve,
    score_modality,
    semantic_search,
    sqg_map,
    write_docs,
)

# 5 documents x 4 terms; the last document has no text at all
FIXTURE = [
    [2, 0, 1, 0],
    [0, 3, 0, 1],
    [1, 1, 1, 1],
    [0, 0, 4, 0],
    [0, 0, 0, 0],
]
QUERY = [1.0, 0.0, 0.5, 0.0]


def ref_scores(model, docs=FIXTURE, query=QUERY, k1=1.2, b=0.75, lam=0.5):
    """Straight-line reference, one document and one term at a time."""
    N = len(docs)
    T = len(docs[0])
    df = [sum(1 for d in docs if d[t] > 0) for t in range(T)]
    dl = [sum(d) for d in docs]
    avgdl = sum(dl) / N
    out = []
    for d in docs:
        if model == "bm25":
            s = 0.0
            for t in range(T):
                if query[t]:
                    idf = math.log((N - df[t] + 0.5) / (df[t] + 0.5) + 1)
                    s += query[t] * idf * d[t] * (k1 + 1) / (d[t] + k1 * (1 - b + b * sum(d) / avgdl))
        elif model in ("vsm", "tfidf"):
            w = [d[t] * (math.log(N / df[t]) if model == "tfidf" and df[t] else 1.0) for t in range(T)]
            nw = math.sqrt(sum(x * x for x in w))
            nq = math.sqrt(sum(x * x for x in query))
            s = sum(a * c for a, c in zip(w, query)) / (nw * nq) if nw else 0.0
        else:
            total = sum(dl)
            s = 0.0
            for t in range(T):
                if query[t]:
                    pc = sum(x[t] for x in docs) / total
                    pd = d[t] / sum(d) if sum(d) else 0.0
                    s += query[t] * math.log((1 - lam) * pd + lam * pc)
        out.append(s)
    return np.array(out)


@pytest.mark.parametrize("model", ["bm25", "tfidf", "vsm", "lm"])
def test_models_match_reference_on_fixture(model):
    got = score_modality(np.array(QUERY), sparse.csr_matrix(np.array(FIXTURE, float)), model)
    np.testing.assert_allclose(got, ref_scores(model), atol=1e-9, rtol=0)


def test_bm25_toy_value():
    D = sparse.csr_matrix(np.array([[2.0, 0.0], [0.0, 2.0]]))
    assert score_modality(np.array([1.0, 0.0]), D, "bm25")[0] == pytest.approx(0.95307, abs=1e-5)
    assert score_modality(np.array([1.0, 0.0]), D, "bm25")[0] == pytest.approx(math.log(2) * 1.375, abs=1e-12)


def test_lm_pure_collection_model_ties_everything():
    got = score_modality(np.array(QUERY), sparse.csr_matrix(np.array(FIXTURE[:4], float)), "lm", lam=1.0)
    assert np.ptp(got) == 0


def test_vsm_proportional_doc_ranks_first():
    D = sparse.csr_matrix(np.array([[1.0, 0.0, 3.0], [2.0, 0.0, 1.0], [0.0, 5.0, 0.0]]))
    assert np.argmax(score_modality(np.array([2.0, 0.0, 6.0]), D, "vsm")) == 0


def vocab():
    return ConceptVocabulary(("dog", "cat", "bark", "meow"), ("visual", "visual", "asr", "asr"))


def docs():
    ids = ("a", "b", "c")
    visual = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
    asr = np.array([[3, 0], [0, 1], [1, 0]])
    return SemanticDocMatrix(ids, vocab(), {"visual": visual, "asr": asr})


def test_sqg_map_threshold_and_modalities():
    sim = SimilarityProvider(("puppy",), ("dog", "cat", "bark", "meow"), np.array([[0.9, 0.2, 0.4, 0.0]]))
    q = sqg_map(["puppy", "unknown"], sim, vocab(), tau=0.3)
    assert q.terms == (("dog", "visual", 0.9), ("bark", "asr", 0.4))
    assert q.modality_weights == {"visual": 0.9, "asr": 0.4}
    with pytest.raises(DataError, match=r"nearest misses: puppy->dog \(0.900\)"):
        sqg_map(["puppy"], sim, vocab(), tau=0.95)
    with pytest.raises(ConfigError):
        sqg_map(["puppy"], sim, vocab(), tau=2)


def test_retrieve_and_search():
    q = SemanticQuery((("dog", "visual", 1.0), ("bark", "asr", 1.0)))
    lists = retrieve(q, docs(), "bm25")
    assert set(lists) == {"visual", "asr"}
    assert lists["visual"].video_ids[0] == "a"
    sim = SimilarityProvider.identity(vocab().concepts)
    ranked = semantic_search(["dog", "bark"], sim, docs())
    assert ranked.video_ids[0] == "a"
    with pytest.raises(ConfigError):
        retrieve(q, docs(), "dfr")


def test_threshold_visual_mode():
    t = docs().block("visual", "threshold").toarray()
    np.testing.assert_array_equal(t, [[1, 0], [0, 1], [1, 1]])


def test_modality_fuse_rules():
    a = RankedList("e", ("x", "y", "z"), np.array([3.0, 2.0, 1.0]))
    assert modality_fuse({"visual": a}, {"visual": 1.0}).video_ids == a.video_ids
    assert modality_fuse({"visual": a, "asr": a}, {"visual": 1.0, "asr": 1.0}).video_ids == a.video_ids
    with pytest.raises(DataError):
        modality_fuse({"visual": a}, {"visual": 0.0})


def test_vocabulary_and_doc_validation(tmp_path):
    with pytest.raises(DataError):
        ConceptVocabulary(("a", "a"), ("visual", "visual"))
    with pytest.raises(DataError):
        SemanticDocMatrix(("a",), vocab(), {"visual": np.array([[-1.0, 0.0]])})
    vocab().to_csv(tmp_path / "v.csv")
    assert ConceptVocabulary.from_csv(tmp_path / "v.csv") == vocab()


def test_docs_and_similarity_round_trip(tmp_path):
    d = docs()
    write_docs(tmp_path / "sem", d)
    back = read_docs(tmp_path / "sem")
    assert back.video_ids == d.video_ids
    for m in ("asr", "ocr"):
        np.testing.assert_array_equal(back.blocks[m].toarray(), d.blocks[m].toarray())
    # visual scores are stored as 8-bit codes, so they come back within half a bin
    visual = d.blocks["visual"].toarray()
    half_bin = np.ptp(visual, axis=0) / 256 / 2
    assert np.all(np.abs(back.blocks["visual"].toarray() - visual) <= half_bin + 1e-6)
    sim = SimilarityProvider(("w",), ("dog", "cat"), np.array([[0.25, 1.0]]))
    sim.to_tsv(tmp_path / "s.tsv")
    again = SimilarityProvider.from_tsv(tmp_path / "s.tsv")
    np.testing.assert_array_equal(again.matrix, sim.matrix)
