"""Vector quantization over real-valued feature frames.

Four codec kinds share one model shape: ``VQ`` (one codebook over whole
frames), ``RVQ`` (a chain of codebooks quantizing successive residuals),
``GVQ`` (frames split into contiguous groups, one codebook each) and
``GRVQ`` (a residual chain per group).  Books are ordered level-major:
book ``r*G + g`` is residual level ``r`` of group ``g``, so truncating the
book list keeps the coarsest levels of every group.

Quantizing L frames yields a TokenGrid with one row per active book, which
plugs directly into the diffusion module.  Codebook fitting is Lloyd's
algorithm with k-means++ seeding, optionally with quantizer dropout for
residual chains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FittingError
from .tokens import TokenGrid, atomic_write_text

KINDS = ("VQ", "RVQ", "GVQ", "GRVQ")

_CHUNK = 4096  # frames per distance-matrix block


@dataclass
class CodecModel:
    """A fitted (or directly constructed) quantizer.

    ``codebooks`` holds G*R arrays of shape (Kp, d/G) in level-major
    order.  ``inertia_traces`` (one list per book, in book order) is
    populated by ``fit_codebooks`` and not serialized.
    """

    kind: str
    G: int
    R: int
    Kp: int
    codebooks: list
    inertia_traces: list | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.G < 1 or self.R < 1 or self.Kp < 2:
            raise ValueError("need G >= 1, R >= 1, Kp >= 2")
        if self.kind == "VQ" and (self.G, self.R) != (1, 1):
            raise ValueError("VQ requires G=1, R=1")
        if self.kind == "RVQ" and self.G != 1:
            raise ValueError("RVQ requires G=1")
        if self.kind == "GVQ" and self.R != 1:
            raise ValueError("GVQ requires R=1")
        if len(self.codebooks) != self.G * self.R:
            raise ValueError(
                f"expected {self.G * self.R} codebooks, got {len(self.codebooks)}"
            )
        books = [np.asarray(b, dtype=float) for b in self.codebooks]
        dp = books[0].shape[1] if books[0].ndim == 2 else -1
        for b in books:
            if b.ndim != 2 or b.shape != (self.Kp, dp):
                raise ValueError(f"every codebook must have shape ({self.Kp}, {dp})")
            if not np.all(np.isfinite(b)):
                raise ValueError("codebooks must be finite")
        self.codebooks = books

    @property
    def N_q(self) -> int:
        return self.G * self.R

    @property
    def dp(self) -> int:
        return self.codebooks[0].shape[1]

    @property
    def d(self) -> int:
        return self.dp * self.G


def _as_features(features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"features must be a 2-D (frames x dims) matrix, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    return X


def _nearest(X: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Index of the closest code per frame; ties go to the lowest index."""
    out = np.empty(len(X), dtype=np.int64)
    c2 = (book**2).sum(axis=1)
    for lo in range(0, len(X), _CHUNK):
        block = X[lo : lo + _CHUNK]
        d2 = (block**2).sum(axis=1)[:, None] - 2.0 * block @ book.T + c2[None, :]
        out[lo : lo + _CHUNK] = np.argmin(d2, axis=1)
    return out


def quantize(features, model: CodecModel, active_books: int | None = None):
    """Encode frames; returns (TokenGrid, reconstruction).

    The grid has one row per active book.  ``active_books`` truncates the
    residual chain for RVQ/GRVQ; the flat kinds always use every book.
    """
    X = _as_features(features)
    if X.shape[1] != model.d:
        raise ValueError(f"features have dim {X.shape[1]}, model expects {model.d}")
    n_active = model.N_q if active_books is None else int(active_books)
    if not 1 <= n_active <= model.N_q:
        raise ValueError(f"active_books must be in 1..{model.N_q}, got {n_active}")
    if model.kind in ("VQ", "GVQ") and n_active != model.N_q:
        raise ValueError(f"{model.kind} does not support partial depth")

    L = X.shape[0]
    dp = model.dp
    tokens = np.zeros((n_active, L), dtype=np.int64)
    recon = np.zeros_like(X)
    residual = X.copy()
    for b in range(n_active):
        g = b % model.G
        cols = slice(g * dp, (g + 1) * dp)
        idx = _nearest(residual[:, cols], model.codebooks[b])
        tokens[b] = idx
        picked = model.codebooks[b][idx]
        recon[:, cols] += picked
        residual[:, cols] -= picked
    return TokenGrid(data=tokens, K=model.Kp), recon


def dequantize(tokens: TokenGrid, model: CodecModel) -> np.ndarray:
    """Sum/concatenate the selected code vectors; inverse of quantize's
    reconstruction arm for the same model."""
    if tokens.K != model.Kp:
        raise ValueError(f"grid K={tokens.K} does not match model Kp={model.Kp}")
    if tokens.N_q > model.N_q:
        raise ValueError(f"grid has {tokens.N_q} rows, model has {model.N_q} books")
    if tokens.contains_mask():
        raise ValueError("cannot decode a grid containing mask tokens")
    dp = model.dp
    out = np.zeros((tokens.L, model.d))
    for b in range(tokens.N_q):
        g = b % model.G
        out[:, g * dp : (g + 1) * dp] += model.codebooks[b][tokens.data[b]]
    return out


@dataclass
class FitConfig:
    """Codebook fitting parameters."""

    kind: str
    Kp: int
    G: int = 1
    R: int = 1
    iters: int = 50
    seed: int = 0
    dropout: bool = False


def _check_distinct(X: np.ndarray, k: int) -> None:
    if len(np.unique(X, axis=0)) < k:
        raise FittingError(
            f"need at least {k} distinct frames to fit {k} codes, "
            f"got {len(np.unique(X, axis=0))}"
        )


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum()
        centroids[j] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd_step(X: np.ndarray, centroids: np.ndarray):
    """One assignment + update; returns (new_centroids, inertia).

    Empty clusters are re-seeded from the points currently farthest from
    their assigned centroid, farthest first, ties to the lowest frame
    index.
    """
    labels = _nearest(X, centroids)
    diffs = X - centroids[labels]
    point_d2 = (diffs**2).sum(axis=1)
    inertia = float(point_d2.sum())
    k = len(centroids)
    new = np.zeros_like(centroids)
    counts = np.bincount(labels, minlength=k)
    np.add.at(new, labels, X)
    nonempty = counts > 0
    new[nonempty] /= counts[nonempty][:, None]
    empty = np.nonzero(~nonempty)[0]
    if empty.size:
        order = np.argsort(-point_d2, kind="stable")
        new[empty] = X[order[: empty.size]]
    return new, inertia


def _kmeans(X: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    _check_distinct(X, k)
    centroids = _kmeanspp_init(X, k, rng)
    trace = []
    for _ in range(iters):
        new, inertia = _lloyd_step(X, centroids)
        trace.append(inertia)
        if np.array_equal(new, centroids):
            break
        centroids = new
    return centroids, trace


def _fit_residual_chain(X, R, Kp, iters, rng):
    """Plain sequential fitting: finalize each level before the next."""
    books = []
    traces = []
    residual = X.copy()
    for _ in range(R):
        book, trace = _kmeans(residual, Kp, iters, rng)
        books.append(book)
        traces.append(trace)
        residual = residual - book[_nearest(residual, book)]
    return books, traces


def _fit_residual_chain_dropout(X, R, Kp, iters, rng):
    """Variable-depth fitting: every iteration draws an effective depth
    d ~ U{1..R} and runs one Lloyd step on levels 1..d in turn, so early
    books see the residual statistics of truncated decoding."""
    books: list = [None] * R
    traces: list = [[] for _ in range(R)]
    for _ in range(iters):
        depth = int(rng.integers(1, R + 1))
        residual = X.copy()
        for r in range(depth):
            if books[r] is None:
                _check_distinct(residual, Kp)
                books[r] = _kmeanspp_init(residual, Kp, rng)
            new, inertia = _lloyd_step(residual, books[r])
            traces[r].append(inertia)
            books[r] = new
            residual = residual - books[r][_nearest(residual, books[r])]
    if any(b is None for b in books):
        raise FittingError(
            "quantizer dropout never drew the full depth; increase iters"
        )
    return books, traces


def fit_codebooks(features, config: FitConfig) -> CodecModel:
    """Fit a codec of the configured kind with Lloyd's algorithm.

    Deterministic under ``config.seed``.  Residual chains are fitted
    sequentially; with ``dropout`` (RVQ only) the chain is trained at a
    random effective depth per iteration instead.
    """
    X = _as_features(features)
    if config.kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {config.kind!r}")
    if config.dropout and config.kind != "RVQ":
        raise ValueError("quantizer dropout applies to RVQ fitting only")
    if config.iters < 1:
        raise ValueError("iters must be >= 1")
    G, R = config.G, config.R
    if config.kind == "VQ":
        G = R = 1
    elif config.kind == "RVQ":
        G = 1
    elif config.kind == "GVQ":
        R = 1
    if X.shape[1] % G != 0:
        raise ValueError(f"feature dim {X.shape[1]} not divisible by G={G}")
    dp = X.shape[1] // G
    rng = np.random.default_rng(config.seed)

    group_books: list[list] = [[] for _ in range(G)]
    group_traces: list[list] = [[] for _ in range(G)]
    for g in range(G):
        Xg = X[:, g * dp : (g + 1) * dp]
        if config.kind == "RVQ" and config.dropout:
            books, traces = _fit_residual_chain_dropout(Xg, R, config.Kp, config.iters, rng)
        else:
            books, traces = _fit_residual_chain(Xg, R, config.Kp, config.iters, rng)
        group_books[g] = books
        group_traces[g] = traces

    codebooks = [group_books[g][r] for r in range(R) for g in range(G)]
    traces = [group_traces[g][r] for r in range(R) for g in range(G)]
    return CodecModel(
        kind=config.kind, G=G, R=R, Kp=config.Kp,
        codebooks=codebooks, inertia_traces=traces,
    )


def reconstruction_report(features, model: CodecModel) -> list[float]:
    """MSE at each usable depth: 1..N_q for residual kinds, full depth
    otherwise (the flat kinds have no partial decoding)."""
    X = _as_features(features)
    if model.kind in ("VQ", "GVQ"):
        depths = [model.N_q]
    else:
        depths = list(range(1, model.N_q + 1))
    out = []
    for depth in depths:
        _, recon = quantize(X, model, active_books=depth)
        out.append(float(np.mean((X - recon) ** 2)))
    return out


def model_to_json_dict(model: CodecModel) -> dict:
    return {
        "kind": model.kind,
        "G": model.G,
        "R": model.R,
        "Kp": model.Kp,
        "codebooks": [b.tolist() for b in model.codebooks],
    }


def save_codec(path, model: CodecModel) -> None:
    atomic_write_text(path, json.dumps(model_to_json_dict(model)))


def load_codec(path) -> CodecModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return CodecModel(
        kind=payload["kind"],
        G=int(payload["G"]),
        R=int(payload["R"]),
        Kp=int(payload["Kp"]),
        codebooks=[np.asarray(b, dtype=float) for b in payload["codebooks"]],
    )


def load_features(path) -> np.ndarray:
    X = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    return _as_features(X)


def save_features(path, features) -> None:
    X = _as_features(features)
    rows = "\n".join(",".join(repr(v) for v in row) for row in X.tolist())
    atomic_write_text(path, rows + "\n")
