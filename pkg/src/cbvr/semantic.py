"""Text-query search over concept detector scores and ASR/OCR term counts.

A query is mapped onto the concept vocabulary through a word/concept
similarity matrix (:func:`sqg_map`), each modality is searched with a
classical retrieval model (:func:`retrieve`), and the per-modality lists are
fused with the query's modality weights (:func:`modality_fuse`).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .core import RankedList, ScoreList, to_ranked_list
from .exceptions import ConfigError, DataError

MODALITIES = ("visual", "asr", "ocr")
MODELS = ("vsm", "tfidf", "bm25", "lm")

BM25_K1 = 1.2
BM25_B = 0.75
LM_JM = 0.5


@dataclass(frozen=True)
class ConceptVocabulary:
    concepts: tuple[str, ...]
    modalities: tuple[str, ...]

    def __post_init__(self):
        concepts, modalities = tuple(self.concepts), tuple(self.modalities)
        if not concepts:
            raise DataError("empty concept vocabulary")
        if len(set(concepts)) != len(concepts):
            raise DataError("duplicate concept tokens")
        if len(modalities) != len(concepts):
            raise DataError("one modality per concept required")
        bad = set(modalities) - set(MODALITIES)
        if bad:
            raise DataError(f"unknown modality {sorted(bad)[0]!r}")
        object.__setattr__(self, "concepts", concepts)
        object.__setattr__(self, "modalities", modalities)
        object.__setattr__(self, "_modality", dict(zip(concepts, modalities)))

    def __len__(self):
        return len(self.concepts)

    def __contains__(self, concept):
        return concept in self._modality

    def modality_of(self, concept: str) -> str:
        try:
            return self._modality[concept]
        except KeyError:
            raise DataError(f"unknown concept {concept!r}") from None

    def in_modality(self, modality: str) -> tuple[str, ...]:
        return tuple(c for c, m in zip(self.concepts, self.modalities) if m == modality)

    @classmethod
    def from_csv(cls, path) -> "ConceptVocabulary":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(reader.fieldnames) != {"concept", "modality"}:
                raise DataError("vocabulary CSV must have header concept,modality")
            rows = [(r["concept"], r["modality"]) for r in reader]
        return cls(tuple(r[0] for r in rows), tuple(r[1] for r in rows))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["concept", "modality"])
            writer.writerows(zip(self.concepts, self.modalities))


@dataclass(frozen=True)
class SimilarityProvider:
    """Query-word by concept similarity matrix with values in [0, 1]."""

    words: tuple[str, ...]
    concepts: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (len(self.words), len(self.concepts)):
            raise DataError("similarity matrix shape does not match its labels")
        if not np.all(np.isfinite(m)) or m.min(initial=0) < 0 or m.max(initial=0) > 1:
            raise DataError("similarities must lie in [0, 1]")
        m.setflags(write=False)
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "concepts", tuple(self.concepts))
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_word_index", {w: i for i, w in enumerate(self.words)})

    @classmethod
    def identity(cls, tokens: Sequence[str]) -> "SimilarityProvider":
        return cls(tuple(tokens), tuple(tokens), np.eye(len(tokens)))

    def row(self, word: str) -> np.ndarray | None:
        i = self._word_index.get(word)
        return None if i is None else self.matrix[i]

    @classmethod
    def from_tsv(cls, path) -> "SimilarityProvider":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataError("empty similarity file")
        concepts = tuple(lines[0].split("\t")[1:])
        words, rows = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(concepts) + 1:
                raise DataError(f"similarity line {lineno}: expected {len(concepts) + 1} fields")
            words.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
        return cls(tuple(words), concepts, np.array(rows).reshape(len(words), len(concepts)))

    def to_tsv(self, path) -> None:
        out = ["word\t" + "\t".join(self.concepts)]
        for w, row in zip(self.words, self.matrix):
            out.append(w + "\t" + "\t".join(f"{v:.9g}" for v in row))
        Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SemanticQuery:
    terms: tuple[tuple[str, str, float], ...]

    def __post_init__(self):
        for concept, modality, weight in self.terms:
            if not weight > 0:
                raise DataError(f"non-positive weight for concept {concept!r}")
            if modality not in MODALITIES:
                raise DataError(f"unknown modality {modality!r}")

    @property
    def modality_weights(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for _, modality, weight in self.terms:
            out[modality] = out.get(modality, 0.0) + weight
        return out

    def weights_for(self, modality: str) -> dict[str, float]:
        return {c: w for c, m, w in self.terms if m == modality}


def sqg_map(query_words: Iterable[str], provider: SimilarityProvider, vocab: ConceptVocabulary,
            tau: float = 0.3) -> SemanticQuery:
    """Map query words to concepts whose similarity clears ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError("tau must lie in [0, 1]")
    words = list(query_words)
    weights: dict[str, float] = {}
    misses = []
    for word in words:
        row = provider.row(word)
        if row is None:
            continue
        for concept, sim in zip(provider.concepts, row):
            if concept not in vocab:
                continue
            if sim >= tau:
                weights[concept] = weights.get(concept, 0.0) + float(sim)
            elif sim > 0:
                misses.append((float(sim), word, concept))
    weights = {c: w for c, w in weights.items() if w > 0}
    if not weights:
        misses.sort(key=lambda t: (-t[0], t[1], t[2]))
        near = ", ".join(f"{w}->{c} ({s:.3f})" for s, w, c in misses[:3]) or "none"
        raise DataError(f"query outside vocabulary; nearest misses: {near}")
    terms = tuple((c, vocab.modality_of(c), weights[c]) for c in vocab.concepts if c in weights)
    return SemanticQuery(terms)


@dataclass(frozen=True)
class SemanticDocMatrix:
    """Videos by concepts, one block per modality.

    ``visual`` holds detector scores in [0, 1] used as fractional term
    frequencies; ``asr`` and ``ocr`` hold sparse term counts.
    """

    video_ids: tuple[str, ...]
    vocabulary: ConceptVocabulary
    blocks: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(self.video_ids)
        if len(set(ids)) != len(ids):
            raise DataError("duplicate video ids in document matrix")
        blocks = {}
        for modality in MODALITIES:
            cols = self.vocabulary.in_modality(modality)
            block = self.blocks.get(modality)
            if block is None:
                block = sparse.csr_matrix((len(ids), len(cols)))
            block = sparse.csr_matrix(block, dtype=np.float64)
            if block.shape != (len(ids), len(cols)):
                raise DataError(f"{modality} block has shape {block.shape}, expected {(len(ids), len(cols))}")
            if block.nnz and (not np.all(np.isfinite(block.data)) or block.data.min() < 0):
                raise DataError(f"{modality} block must be finite and nonnegative")
            blocks[modality] = block
        object.__setattr__(self, "video_ids", ids)
        object.__setattr__(self, "blocks", blocks)

    @property
    def n(self) -> int:
        return len(self.video_ids)

    def block(self, modality: str, visual_mode="fractional"):
        m = self.blocks[modality]
        if modality == "visual" and visual_mode == "threshold":
            m = m.copy()
            m.data = (m.data >= 0.5).astype(np.float64)
            m.eliminate_zeros()
        elif visual_mode not in ("fractional", "threshold"):
            raise ConfigError(f"unknown visual mode {visual_mode!r}")
        return m

    def doc_lengths(self, modality: str) -> np.ndarray:
        return np.asarray(self.blocks[modality].sum(axis=1)).ravel()

    def subset(self, ids: Sequence[str]) -> "SemanticDocMatrix":
        index = {v: i for i, v in enumerate(self.video_ids)}
        try:
            rows = [index[v] for v in ids]
        except KeyError as exc:
            raise DataError(f"unknown video id {exc.args[0]!r}") from None
        return SemanticDocMatrix(tuple(ids), self.vocabulary,
                                 {m: b[rows] for m, b in self.blocks.items()})


def _query_vector(query: SemanticQuery, docs: SemanticDocMatrix, modality: str) -> np.ndarray:
    cols = docs.vocabulary.in_modality(modality)
    index = {c: i for i, c in enumerate(cols)}
    q = np.zeros(len(cols))
    for concept, weight in query.weights_for(modality).items():
        if concept not in index:
            raise DataError(f"query concept {concept!r} not in documents")
        q[index[concept]] = weight
    return q


def _row_norms(D) -> np.ndarray:
    return np.sqrt(np.asarray(D.multiply(D).sum(axis=1)).ravel())


def _cosine(D, q) -> np.ndarray:
    qn = np.linalg.norm(q)
    dn = _row_norms(D)
    dots = D @ q
    out = np.zeros(D.shape[0])
    ok = dn > 0
    if qn > 0:
        out[ok] = dots[ok] / (dn[ok] * qn)
    return out


def score_modality(q: np.ndarray, D, model: str, k1=BM25_K1, b=BM25_B, lam=LM_JM) -> np.ndarray:
    """Retrieval scores of every row of ``D`` (docs x terms) for query weights ``q``."""
    D = sparse.csr_matrix(D, dtype=np.float64)
    N = D.shape[0]
    df = np.asarray((D > 0).sum(axis=0)).ravel().astype(np.float64)
    terms = np.flatnonzero(q)
    if model == "vsm":
        return _cosine(D, q)
    if model == "tfidf":
        idf = np.zeros_like(df)
        nz = df > 0
        idf[nz] = np.log(N / df[nz])
        return _cosine(D @ sparse.diags(idf), q)
    if model == "bm25":
        dl = np.asarray(D.sum(axis=1)).ravel()
        avgdl = dl.mean() if N else 0.0
        norm = k1 * (1.0 - b + b * dl / avgdl) if avgdl > 0 else np.full(N, k1)
        out = np.zeros(N)
        for t in terms:
            tf = D[:, t].toarray().ravel()
            idf = math.log((N - df[t] + 0.5) / (df[t] + 0.5) + 1.0)
            out += q[t] * idf * tf * (k1 + 1.0) / (tf + norm)
        return out
    if model == "lm":
        dl = np.asarray(D.sum(axis=1)).ravel()
        cf = np.asarray(D.sum(axis=0)).ravel()
        total = cf.sum()
        out = np.zeros(N)
        for t in terms:
            p_c = cf[t] / total if total > 0 else 0.0
            if p_c <= 0:
                continue  # equal -inf for every document
            tf = D[:, t].toarray().ravel()
            p_d = np.divide(tf, dl, out=np.zeros(N), where=dl > 0)
            out += q[t] * np.log((1.0 - lam) * p_d + lam * p_c)
        return out
    raise ConfigError(f"unknown retrieval model {model!r}")


def retrieve(query: SemanticQuery, docs: SemanticDocMatrix, model: str = "bm25", event_id="query",
             visual_mode="fractional", **params) -> dict[str, RankedList]:
    """One ranked list per modality the query touches."""
    if model not in MODELS:
        raise ConfigError(f"unknown retrieval model {model!r}")
    out = {}
    for modality in MODALITIES:
        if not query.weights_for(modality):
            continue
        q = _query_vector(query, docs, modality)
        scores = score_modality(q, docs.block(modality, visual_mode), model, **params)
        out[modality] = to_ranked_list(ScoreList(event_id, f"{model}:{modality}", docs.video_ids, scores))
    return out


def modality_fuse(lists: Mapping[str, RankedList], modality_weights: Mapping[str, float],
                  event_id=None) -> RankedList:
    """Rank-normalize each list, average with the given weights, re-rank."""
    from .fusion import fuse_ranked_lists

    names = [m for m in lists]
    weights = np.array([float(modality_weights.get(m, 0.0)) for m in names])
    if np.any(weights < 0) or not np.any(weights > 0):
        raise DataError("modality weights must be nonnegative and not all zero")
    return fuse_ranked_lists([lists[m] for m in names], weights, event_id)


def semantic_search(query_words, provider, docs: SemanticDocMatrix, model="bm25", tau=0.3,
                    event_id="query") -> RankedList:
    query = sqg_map(query_words, provider, docs.vocabulary, tau)
    lists = retrieve(query, docs, model, event_id)
    return modality_fuse(lists, query.modality_weights, event_id)


# --------------------------------------------------------------------------
# document files


def write_docs(directory, docs: SemanticDocMatrix) -> None:
    """``vocabulary.csv``, ``visual.idx`` (8-bit uniform codes) and ``asr.jsonl`` / ``ocr.jsonl``."""
    from .quantizers import CompressedIndex, UniformQuantizer, index_write

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    docs.vocabulary.to_csv(directory / "vocabulary.csv")
    visual = docs.blocks["visual"].toarray().astype(np.float32)
    if visual.shape[1]:
        uq = UniformQuantizer(n_bins=256).fit(visual)
        index_write(directory / "visual.idx", CompressedIndex(uq, uq.encode(visual), docs.video_ids, "visual"))
    for modality in ("asr", "ocr"):
        cols = docs.vocabulary.in_modality(modality)
        block = docs.blocks[modality].tocsr()
        lines = []
        for i, vid in enumerate(docs.video_ids):
            lo, hi = block.indptr[i], block.indptr[i + 1]
            terms = {cols[j]: float(v) for j, v in zip(block.indices[lo:hi], block.data[lo:hi])}
            lines.append(json.dumps({"video_id": vid, "terms": dict(sorted(terms.items()))},
                                    ensure_ascii=False, sort_keys=True))
        (directory / f"{modality}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_docs(directory) -> SemanticDocMatrix:
    from .quantizers import index_read

    directory = Path(directory)
    vocab = ConceptVocabulary.from_csv(directory / "vocabulary.csv")
    blocks = {}
    ids = None
    if vocab.in_modality("visual"):
        index = index_read(directory / "visual.idx")
        ids = index.video_ids
        blocks["visual"] = sparse.csr_matrix(index.decode().values.astype(np.float64))
    for modality in ("asr", "ocr"):
        cols = vocab.in_modality(modality)
        col_index = {c: j for j, c in enumerate(cols)}
        path = directory / f"{modality}.jsonl"
        rows = [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
        row_ids = tuple(r["video_id"] for r in rows)
        if ids is None:
            ids = row_ids
        elif row_ids != ids:
            raise DataError(f"{modality} rows do not match the visual index ids")
        data, ri, ci = [], [], []
        for i, r in enumerate(rows):
            for term, count in r["terms"].items():
                if term not in col_index:
                    raise DataError(f"unknown {modality} term {term!r}")
                ri.append(i)
                ci.append(col_index[term])
                data.append(float(count))
        blocks[modality] = sparse.csr_matrix((data, (ri, ci)), shape=(len(rows), len(cols)))
    return SemanticDocMatrix(ids, vocab, blocks)
