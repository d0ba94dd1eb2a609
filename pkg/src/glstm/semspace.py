"""Normalized CCA between image features and TF-IDF caption vectors.

Projections are weighted column-wise by the canonical correlations raised to
``p`` and then L2-normalized, so cosine similarity in the shared space is a
dot product. On top of that sit nearest-caption retrieval and the three
guidance builders (retrieved-caption BoW, image embedding, raw image).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from glstm import container
from glstm.errors import BadInputError, ConfigError, DecompositionError, ShapeError
from glstm.numkit import sym_generalized_eig
from glstm.textcorpus import Corpus, TfIdfVectorizer

CCA_MAGIC = b"GLSX"
GUIDANCE_KINDS = ("ret", "emb", "img")


@dataclass
class CcaModel:
    U1: np.ndarray  # F x d
    U2: np.ndarray  # G x d
    D: np.ndarray  # canonical correlations, descending
    p: float
    mean1: np.ndarray
    mean2: np.ndarray
    ridge1: float
    ridge2: float

    @property
    def dim(self) -> int:
        return self.D.shape[0]


def _cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a.T @ b / (a.shape[0] - 1)


def fit_cca(X1, X2, d: int = 200, p: float = 4.0, ridge: float = 1e-6) -> CcaModel:
    """Fit CCA on paired rows of ``X1`` (images) and ``X2`` (texts).

    Each view's covariance gets ``ridge * mean(diag)`` added to its diagonal.
    Directions come from ``S12 S22^-1 S21 u = rho^2 S11 u``; the text side is
    ``v = S22^-1 S21 u / rho``, which makes both sets covariance-orthonormal.
    """
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if X1.ndim != 2 or X2.ndim != 2 or X1.shape[0] != X2.shape[0]:
        raise ShapeError(f"views must be paired matrices, got {X1.shape} and {X2.shape}")
    n, f = X1.shape
    g = X2.shape[1]
    if n < 2:
        raise BadInputError("CCA needs at least two paired rows")
    if not 1 <= d <= min(f, g):
        raise ConfigError(f"CCA dimension {d} must lie in [1, {min(f, g)}]")
    mean1, mean2 = X1.mean(axis=0), X2.mean(axis=0)
    A, B = X1 - mean1, X2 - mean2
    s11, s22, s12 = _cov(A, A), _cov(B, B), _cov(A, B)
    eps1 = ridge * float(np.mean(np.diag(s11)))
    eps2 = ridge * float(np.mean(np.diag(s22)))
    if eps1 <= 0 or eps2 <= 0:
        raise DecompositionError("a CCA view has zero variance; nothing to correlate")
    s11 = s11 + eps1 * np.eye(f)
    s22 = s22 + eps2 * np.eye(g)
    try:
        chol22 = np.linalg.cholesky(s22)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("text covariance is not positive definite; increase the ridge") from exc
    s22_inv_s21 = np.linalg.solve(chol22.T, np.linalg.solve(chol22, s12.T))
    rho2, U = sym_generalized_eig(s12 @ s22_inv_s21, s11)
    rho2, U1 = rho2[:d], U[:, :d]
    D = np.sqrt(np.clip(rho2, 0.0, None))
    V = s22_inv_s21 @ U1
    for j in range(d):
        if D[j] > 1e-12:
            V[:, j] /= D[j]
        else:
            norm = np.sqrt(V[:, j] @ s22 @ V[:, j])
            V[:, j] = V[:, j] / norm if norm > 0 else 0.0
    U1, V = np.ascontiguousarray(U1), np.ascontiguousarray(V)
    return CcaModel(U1, V, D, float(p), mean1, mean2, eps1, eps2)


def project(model: CcaModel, x, view: int) -> np.ndarray:
    """Center, project, weight by ``D**p`` and L2-normalize (zero stays zero)."""
    if view not in (1, 2):
        raise ConfigError("view must be 1 (image) or 2 (text)")
    x = np.asarray(x, dtype=np.float64)
    U, mean = (model.U1, model.mean1) if view == 1 else (model.U2, model.mean2)
    if x.shape[-1] != mean.shape[0]:
        raise ShapeError(f"view {view} input has dim {x.shape[-1]}, expected {mean.shape[0]}")
    z = ((x - mean) @ U) * model.D**model.p
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return np.divide(z, norm, out=np.zeros_like(z), where=norm > 0)


@dataclass
class SemanticIndex:
    rows: np.ndarray  # one projected caption per row
    refs: list[tuple[str, int]]  # (item id, caption index)
    captions: list[list[str]]

    def __len__(self) -> int:
        return len(self.refs)


def build_index(model: CcaModel, vectorizer: TfIdfVectorizer, corpus: Corpus) -> SemanticIndex:
    refs, captions, vecs = [], [], []
    for item in corpus.items:
        for ci, tokens in enumerate(item.captions):
            refs.append((item.image_id, ci))
            captions.append(list(tokens))
            vecs.append(vectorizer.vectorize(tokens))
    if not refs:
        raise BadInputError("cannot index an empty corpus")
    rows = project(model, np.array(vecs), 2)
    return SemanticIndex(rows, refs, captions)


@dataclass
class Hit:
    row: int
    item_id: str
    caption_index: int
    score: float


def retrieve(
    model: CcaModel,
    index: SemanticIndex,
    image_feature,
    top_t: int = 15,
    exclude_id: str | None = None,
) -> list[Hit]:
    """Index captions ranked by cosine similarity to the projected image.

    Ties go to the lower row (earlier caption). ``exclude_id`` drops one
    image's own captions, which keeps training-time guidance honest.
    """
    if len(index) == 0:
        raise BadInputError("retrieval index is empty")
    q = project(model, image_feature, 1)
    scores = np.clip(index.rows @ q, -1.0, 1.0)
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = []
    for r in order:
        ref = index.refs[r]
        if exclude_id is not None and ref[0] == exclude_id:
            continue
        hits.append(Hit(int(r), ref[0], ref[1], float(scores[r])))
        if len(hits) == top_t:
            break
    return hits


@dataclass
class Guidance:
    kind: str
    vector: np.ndarray

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def build_guidance(
    kind: str,
    image_feature,
    model: CcaModel | None = None,
    index: SemanticIndex | None = None,
    vectorizer: TfIdfVectorizer | None = None,
    top_t: int = 15,
    exclude_id: str | None = None,
) -> Guidance:
    if kind == "img":
        return Guidance(kind, np.array(image_feature, dtype=np.float64, copy=True))
    if model is None:
        raise ConfigError(f"{kind!r} guidance needs a CCA model")
    if kind == "emb":
        return Guidance(kind, project(model, image_feature, 1))
    if kind == "ret":
        if index is None or vectorizer is None:
            raise ConfigError("'ret' guidance needs a retrieval index and a vectorizer")
        bow = np.zeros(vectorizer.dim)
        for hit in retrieve(model, index, image_feature, top_t, exclude_id):
            bow += vectorizer.counts(index.captions[hit.row])
        norm = np.linalg.norm(bow)
        return Guidance(kind, bow / norm if norm > 0 else bow)
    raise ConfigError(f"unknown guidance kind {kind!r}; expected one of {GUIDANCE_KINDS}")


def guidance_dim(kind: str, feature_dim: int, model: CcaModel | None, vectorizer: TfIdfVectorizer | None) -> int:
    if kind == "img":
        return feature_dim
    if kind == "emb" and model is not None:
        return model.dim
    if kind == "ret" and vectorizer is not None:
        return vectorizer.dim
    raise ConfigError(f"cannot size {kind!r} guidance without its CCA ingredients")


def paired_views(corpus: Corpus, vectorizer: TfIdfVectorizer, text_view: str = "caption") -> tuple[np.ndarray, np.ndarray]:
    """Rows for CCA: per caption (image repeated) or per image (captions pooled)."""
    X1, X2 = [], []
    for item in corpus.items:
        if text_view == "caption":
            for tokens in item.captions:
                X1.append(item.feature)
                X2.append(vectorizer.vectorize(tokens))
        elif text_view == "image":
            X1.append(item.feature)
            X2.append(vectorizer.vectorize([t for c in item.captions for t in c]))
        else:
            raise ConfigError(f"text_view must be 'caption' or 'image', got {text_view!r}")
    return np.array(X1), np.array(X2)


# --- persistence ---------------------------------------------------------------------


def save_cca(path, model: CcaModel, vectorizer: TfIdfVectorizer, extra: dict | None = None) -> None:
    header = {
        "kind": "cca",
        "p": model.p,
        "ridge": [model.ridge1, model.ridge2],
        "tfidf_words": vectorizer.words,
        "tfidf_docs": vectorizer.n_docs,
        "extra": extra or {},
    }
    tensors = {
        "U1": model.U1, "U2": model.U2, "D": model.D,
        "mean1": model.mean1, "mean2": model.mean2, "idf": vectorizer.idf,
    }
    container.write(path, CCA_MAGIC, header, tensors)


def load_cca(path) -> tuple[CcaModel, TfIdfVectorizer, dict]:
    header, t = container.read(path, CCA_MAGIC)
    if header.get("kind") != "cca":
        raise BadInputError(f"{path} is not a CCA model file")
    model = CcaModel(t["U1"], t["U2"], t["D"], header["p"], t["mean1"], t["mean2"], *header["ridge"])
    vec = TfIdfVectorizer(header["tfidf_words"], t["idf"], header["tfidf_docs"])
    return model, vec, header.get("extra", {})


def save_index(path, index: SemanticIndex) -> None:
    header = {"kind": "index", "refs": [list(r) for r in index.refs], "captions": index.captions}
    container.write(path, CCA_MAGIC, header, {"rows": index.rows})


def load_index(path) -> SemanticIndex:
    header, t = container.read(path, CCA_MAGIC)
    if header.get("kind") != "index":
        raise BadInputError(f"{path} is not a retrieval index file")
    return SemanticIndex(t["rows"], [(r[0], r[1]) for r in header["refs"]], header["captions"])
