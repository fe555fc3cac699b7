"""Token grids and their on-disk JSON format.

A token grid is an (N_q, L) integer array: N_q codebook rows by L frames.
Entries are codeword indices in 0..K-1, or K for the mask placeholder that
appears in partially corrupted grids.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory.

    The content is fully serialized before anything touches the target, so
    a failure part-way never leaves a truncated file behind.
    """
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class TokenGrid:
    """An (N_q, L) grid of codeword indices over alphabet size ``K``."""

    data: np.ndarray
    K: int
    layout: str = "concatenated"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"token grid must be 2-D, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError("token grid entries must be integers")
        data = data.astype(np.int64)
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if np.any(data < 0) or np.any(data > self.K):
            raise ValueError(f"token values must lie in 0..{self.K} (K = mask)")
        if self.layout not in ("concatenated", "interleaved"):
            raise ValueError(f"unknown layout {self.layout!r}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def N_q(self) -> int:
        return self.data.shape[0]

    @property
    def L(self) -> int:
        return self.data.shape[1]

    @property
    def n_positions(self) -> int:
        return self.data.size

    @property
    def mask_id(self) -> int:
        return self.K

    def contains_mask(self) -> bool:
        return bool(np.any(self.data == self.K))

    def flatten(self) -> np.ndarray:
        """Flatten to 1-D following the grid's layout.

        ``concatenated`` lays out whole codebook rows one after another;
        ``interleaved`` alternates codebooks frame by frame.
        """
        if self.layout == "concatenated":
            return self.data.reshape(-1).copy()
        return self.data.T.reshape(-1).copy()

    @classmethod
    def from_flat(cls, flat, N_q: int, L: int, K: int, layout: str = "concatenated"):
        flat = np.asarray(flat)
        if flat.size != N_q * L:
            raise ValueError(f"expected {N_q * L} tokens, got {flat.size}")
        if layout == "concatenated":
            data = flat.reshape(N_q, L)
        else:
            data = flat.reshape(L, N_q).T
        return cls(data=data, K=K, layout=layout)

    def with_data(self, data: np.ndarray) -> "TokenGrid":
        return TokenGrid(data=data, K=self.K, layout=self.layout)


def token_file_dict(grids: list[TokenGrid], labels: list[int] | None = None) -> dict:
    if not grids:
        raise ValueError("token file needs at least one grid")
    first = grids[0]
    for g in grids:
        if (g.N_q, g.L, g.K, g.layout) != (first.N_q, first.L, first.K, first.layout):
            raise ValueError("all grids in a token file must share shape, K and layout")
    if labels is not None and len(labels) != len(grids):
        raise ValueError("labels must match the number of grids")
    payload = {
        "K": first.K,
        "N_q": first.N_q,
        "L": first.L,
        "layout": first.layout,
        "grids": [g.data.tolist() for g in grids],
    }
    if labels is not None:
        payload["labels"] = [int(x) for x in labels]
    return payload


def save_token_file(path, grids: list[TokenGrid], labels: list[int] | None = None) -> None:
    atomic_write_text(path, json.dumps(token_file_dict(grids, labels), indent=2))


def load_token_file(path) -> tuple[list[TokenGrid], list[int] | None]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    K = int(payload["K"])
    layout = payload.get("layout", "concatenated")
    grids = [
        TokenGrid(data=np.asarray(g, dtype=np.int64), K=K, layout=layout)
        for g in payload["grids"]
    ]
    labels = payload.get("labels")
    if labels is not None:
        labels = [int(x) for x in labels]
    return grids, labels
