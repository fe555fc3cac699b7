"""Forward corruption, guided reverse sampling, and likelihood-bound training.

The forward process corrupts a clean token grid position by position with
the mask+uniform kernel of its schedule.  The reverse process is built by
x0-reparameterization: a denoiser predicts a distribution over the clean
token at each position, and the reverse kernel is the posterior mixture

    p(x_s | x_t) = sum_v q(x_s | x_t, x0=v) * p(v | x_t)

which is always a valid kernel and reduces to the exact reverse process
when the denoiser is the true Bayes posterior.  Conditioning is an opaque
integer label; ``None`` is the null (unconditional) label used both for
classifier-free training and as the guidance reference.
"""

from __future__ import annotations

import json
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, InconsistencyError, SizeGuardError
from .tokens import TokenGrid, atomic_write_text

NULL_COND = None

MAX_ORACLE_SUPPORT = 10_000

_PREDICT_ATOL = 1e-9


def _check_grid_table(grid: TokenGrid, table) -> None:
    if grid.K != table.K:
        raise ValueError(f"grid K={grid.K} does not match schedule K={table.K}")
    if table.n_layers > 1 and grid.N_q != table.n_layers:
        raise ValueError(
            f"grid has {grid.N_q} codebook rows but the schedule defines "
            f"{table.n_layers} layers"
        )


def _cum_rows(table, t: int, n_rows: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative coefficients per grid row, shape (n_rows,) each."""
    ab = np.atleast_1d(np.asarray(table.alpha_bar[t], dtype=float))
    bb = np.atleast_1d(np.asarray(table.beta_bar[t], dtype=float))
    gb = np.atleast_1d(np.asarray(table.gamma_bar[t], dtype=float))
    if ab.size == 1:
        ab, bb, gb = (np.full(n_rows, x[0]) for x in (ab, bb, gb))
    return ab, bb, gb


def _segment_rows(table, s: int, t: int, n_rows: int):
    a = np.empty(n_rows)
    b = np.empty(n_rows)
    g = np.empty(n_rows)
    for r in range(n_rows):
        layer = r if table.n_layers > 1 else 0
        a[r], b[r], g[r] = table.segment(s, t, layer)
    return a, b, g


def corrupt(x0: TokenGrid, t: int, table, rng: np.random.Generator) -> TokenGrid:
    """Sample x_t ~ q(x_t | x_0), each position independently.

    Step 0 is the identity by definition, which also sidesteps the
    per-codebook schedule's small t=0 mask offset.
    """
    _check_grid_table(x0, table)
    if x0.contains_mask():
        raise ValueError("corrupt requires a mask-free grid")
    if not 0 <= t <= table.T:
        raise ValueError(f"t must be in 0..{table.T}, got {t}")
    if t == 0:
        return x0
    K = x0.K
    ab, bb, gb = _cum_rows(table, t, x0.N_q)
    keep_edge = ab[:, None]
    uni_edge = (ab + K * bb)[:, None]
    u = rng.random(x0.data.shape)
    out = np.array(x0.data)
    uniform_zone = (u >= keep_edge) & (u < uni_edge)
    mask_zone = u >= uni_edge
    n_uni = int(uniform_zone.sum())
    if n_uni:
        out[uniform_zone] = rng.integers(0, K, size=n_uni)
    out[mask_zone] = K
    return x0.with_data(out)


class Denoiser(ABC):
    """Predicts per-position distributions over the clean token.

    ``predict`` must be deterministic given its inputs and return an
    (N_q, L, K) array of probabilities over non-mask targets.
    """

    K: int
    grid_shape: tuple[int, int]
    layout: str = "concatenated"

    @abstractmethod
    def predict(self, x_t: TokenGrid, t: int, cond=None) -> np.ndarray:
        raise NotImplementedError


def _validated_predict(denoiser, x_t: TokenGrid, t: int, cond) -> np.ndarray:
    p0 = np.asarray(denoiser.predict(x_t, t, cond), dtype=float)
    expected = (x_t.N_q, x_t.L, x_t.K)
    if p0.shape != expected:
        raise ContractError(f"denoiser returned shape {p0.shape}, expected {expected}")
    if not np.all(np.isfinite(p0)):
        raise ContractError("denoiser returned non-finite probabilities")
    if np.any(p0 < -_PREDICT_ATOL):
        raise ContractError("denoiser returned negative probabilities")
    sums = p0.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > _PREDICT_ATOL:
        raise ContractError("denoiser distributions do not sum to 1")
    p0 = np.clip(p0, 0.0, None)
    return p0 / p0.sum(axis=-1, keepdims=True)


def cfg_combine(log_p_cond, log_p_uncond, guidance_scale: float, mode: str = "log") -> np.ndarray:
    """Blend conditional and unconditional predictions; returns probabilities.

    ``log`` mode sharpens in log space, (1+lambda)*log p_c - lambda*log p_u,
    then renormalizes.  ``prob`` mode extrapolates the probabilities
    literally and clamps negative mass to zero before renormalizing; the
    two agree only when the literal form stays nonnegative.
    """
    lam = float(guidance_scale)
    if lam < -1:
        raise ValueError(f"guidance scale must be >= -1, got {lam}")
    if mode not in ("log", "prob"):
        raise ValueError(f"mode must be 'log' or 'prob', got {mode!r}")
    lp_c = np.asarray(log_p_cond, dtype=float)
    lp_u = np.asarray(log_p_uncond, dtype=float)
    if lp_c.shape != lp_u.shape:
        raise ValueError("log_p_cond and log_p_uncond must have the same shape")
    for name, lp in (("log_p_cond", lp_c), ("log_p_uncond", lp_u)):
        norm = logsumexp(lp, axis=-1)
        if np.max(np.abs(norm)) > 1e-6:
            raise ValueError(f"{name} is not a normalized log-distribution")

    if mode == "prob":
        p = (1.0 + lam) * np.exp(lp_c) - lam * np.exp(lp_u)
        p = np.clip(p, 0.0, None)
        return p / p.sum(axis=-1, keepdims=True)

    with np.errstate(invalid="ignore"):
        g = (1.0 + lam) * lp_c - lam * lp_u
    # both components zero: zero mass in the limit, not NaN
    g[np.isneginf(lp_c) & np.isneginf(lp_u)] = -np.inf
    pos_inf = np.isposinf(g)
    if np.any(pos_inf):
        # conditional mass where the unconditional model has none: the
        # sharpened distribution degenerates onto those states
        out = pos_inf.astype(float)
        return out / out.sum(axis=-1, keepdims=True)
    return np.exp(g - logsumexp(g, axis=-1, keepdims=True))


def _predict_guided(denoiser, x_t, t, cond, guidance_scale, guidance_mode):
    p_c = _validated_predict(denoiser, x_t, t, cond)
    if guidance_scale == 0 or cond is None:
        return p_c
    p_u = _validated_predict(denoiser, x_t, t, None)
    with np.errstate(divide="ignore"):
        return cfg_combine(np.log(p_c), np.log(p_u), guidance_scale, mode=guidance_mode)


def _reverse_step_dists(x_t: TokenGrid, t: int, p0: np.ndarray, table, t_prev: int) -> np.ndarray:
    """Per-position p(x_{t_prev} | x_t) as an (N_q, L, K+1) array.

    Mixes the exact posterior q(x_s|x_t, x0=v) over the denoiser's clean
    token distribution, evaluated with O(K) closed forms per position.
    Clean-token candidates impossible under the forward process are
    dropped and the remainder renormalized.
    """
    K = x_t.K
    N_q, L = x_t.N_q, x_t.L
    data = x_t.data
    ab_t, bb_t, gb_t = _cum_rows(table, t, N_q)
    ab_s, bb_s, gb_s = _cum_rows(table, t_prev, N_q)
    a_seg, b_seg, g_seg = _segment_rows(table, t_prev, t, N_q)

    out = np.zeros((N_q, L, K + 1))
    masked = data == K

    if masked.any():
        rows = np.nonzero(masked)[0]
        if np.any(gb_t[rows] == 0.0):
            raise InconsistencyError(
                f"grid contains mask tokens but step {t} assigns them zero probability"
            )
        coef_keep = (g_seg / gb_t)[:, None]  # per row, broadcast over frames
        base = (coef_keep * bb_s[:, None])[..., None] + (
            (coef_keep * ab_s[:, None])[..., None] * p0
        )
        mask_prob = (gb_s / gb_t)[:, None]
        out[..., :K] = np.where(masked[..., None], base, 0.0)
        out[..., K] = np.where(masked, np.broadcast_to(mask_prob, (N_q, L)), 0.0)

    unmasked = ~masked
    if unmasked.any():
        rr, cc = np.nonzero(unmasked)
        obs = data[rr, cc]
        n = rr.size
        D = np.repeat(bb_t[rr][:, None], K, axis=1)
        D[np.arange(n), obs] += ab_t[rr]
        valid = D > 0
        p = p0[rr, cc]
        M = np.where(valid, p, 0.0).sum(axis=1)
        if np.any(M <= 0.0):
            raise InconsistencyError(
                "denoiser assigns zero probability to every clean token "
                "consistent with an observed token"
            )
        with np.errstate(divide="ignore", invalid="ignore"):
            W = np.where(valid, p / D, 0.0)
        S = W.sum(axis=1)
        base = bb_s[rr][:, None] * S[:, None] + ab_s[rr][:, None] * W
        vals = b_seg[rr][:, None] * base
        vals[np.arange(n), obs] += a_seg[rr] * base[np.arange(n), obs]
        vals /= M[:, None]
        out[rr, cc, :K] = vals
    return out


def _sample_categorical(dists: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw along the last axis; dists sums to 1 there."""
    cdf = np.cumsum(dists, axis=-1)
    u = rng.random(dists.shape[:-1])
    idx = (u[..., None] > cdf).sum(axis=-1)
    return np.minimum(idx, dists.shape[-1] - 1)


def reverse_step(
    x_t: TokenGrid,
    t: int,
    denoiser: Denoiser,
    cond,
    table,
    guidance_scale: float = 0.0,
    rng: np.random.Generator | None = None,
    *,
    t_prev: int | None = None,
    guidance_mode: str = "log",
) -> TokenGrid:
    """Sample x_{t_prev} from the reparameterized reverse kernel at step t."""
    _check_grid_table(x_t, table)
    if not 1 <= t <= table.T:
        raise ValueError(f"t must be in 1..{table.T}, got {t}")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must satisfy 0 <= t_prev < t, got {t_prev}")
    if rng is None:
        rng = np.random.default_rng()
    p0 = _predict_guided(denoiser, x_t, t, cond, guidance_scale, guidance_mode)
    dists = _reverse_step_dists(x_t, t, p0, table, t_prev)
    return x_t.with_data(_sample_categorical(dists, rng))


def _stationary_rows(table, n_rows: int, K: int) -> np.ndarray:
    ab, bb, gb = _cum_rows(table, table.T, n_rows)
    probs = np.repeat(bb[:, None], K + 1, axis=1)
    probs[:, K] = gb
    probs[:, :K] += (ab / K)[:, None]  # spread unconverged identity mass
    return probs


def sample(
    denoiser: Denoiser,
    cond,
    table,
    T: int | None = None,
    stride: int = 1,
    rng: np.random.Generator | None = None,
    guidance_scale: float = 0.0,
    guidance_mode: str = "log",
) -> TokenGrid:
    """Generate a mask-free grid by running the reverse process T -> 0.

    Starts from the schedule's terminal distribution and applies guided
    reverse steps with the given stride.  Positions still masked after the
    final step are filled with the argmax of the last clean-token
    prediction.
    """
    if T is None:
        T = table.T
    if T != table.T:
        raise ValueError(f"T={T} does not match the schedule's T={table.T}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if rng is None:
        rng = np.random.default_rng()
    N_q, L = denoiser.grid_shape
    K = denoiser.K
    if K != table.K:
        raise ValueError(f"denoiser K={K} does not match schedule K={table.K}")
    if table.n_layers > 1 and N_q != table.n_layers:
        raise ValueError("denoiser grid shape does not match the schedule's layers")

    init = _stationary_rows(table, N_q, K)
    data = _sample_categorical(np.repeat(init[:, None, :], L, axis=1), rng)
    x = TokenGrid(data=data, K=K, layout=denoiser.layout)

    last_p0 = None
    for t in range(T, 0, -stride):
        s = max(0, t - stride)
        p0 = _predict_guided(denoiser, x, t, cond, guidance_scale, guidance_mode)
        dists = _reverse_step_dists(x, t, p0, table, s)
        x = x.with_data(_sample_categorical(dists, rng))
        last_p0 = p0
    if x.contains_mask():
        fill = last_p0.argmax(axis=-1)
        x = x.with_data(np.where(x.data == K, fill, x.data))
    return x


def _onehot_p0(data: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros(data.shape + (K,))
    idx = np.indices(data.shape)
    out[idx[0], idx[1], data] = 1.0
    return out


def _kl_grids(post: np.ndarray, model: np.ndarray) -> float:
    """Sum over positions of KL(post || model); inf if support is violated."""
    support = post > 0
    if np.any(model[support] == 0.0):
        warnings.warn(
            "model assigns zero probability to an outcome the true posterior "
            "supports; likelihood bound is infinite",
            RuntimeWarning,
            stacklevel=3,
        )
        return float("inf")
    ratio = np.ones_like(post)
    ratio[support] = post[support] / model[support]
    return float(np.sum(post[support] * np.log(ratio[support])))


def vlb_loss(
    denoiser: Denoiser,
    x0: TokenGrid,
    cond,
    table,
    rng: np.random.Generator | None = None,
    num_t_samples: int = 1,
) -> float:
    """Monte-Carlo estimate of the variational bound, in nats.

    Equals KL(q(x_T|x0) || p(x_T)) plus T times the average over sampled
    steps t ~ U{1..T}, x_t ~ q(x_t|x0) of the per-step posterior KL.  The
    t=1 term plays the reconstruction role since the step-0 posterior is a
    point mass on x0.
    """
    _check_grid_table(x0, table)
    if x0.contains_mask():
        raise ValueError("vlb_loss requires a mask-free grid")
    if num_t_samples < 1:
        raise ValueError("num_t_samples must be >= 1")
    if rng is None:
        rng = np.random.default_rng()
    T = table.T
    K = x0.K

    # prior term, exact
    ab, bb, gb = _cum_rows(table, T, x0.N_q)
    prior_rows = _stationary_rows(table, x0.N_q, K)
    prior = 0.0
    for r in range(x0.N_q):
        for token in x0.data[r]:
            q = np.full(K + 1, bb[r])
            q[token] += ab[r]
            q[K] = gb[r]
            support = q > 0
            prior += float(np.sum(q[support] * np.log(q[support] / prior_rows[r][support])))

    terms = []
    for _ in range(num_t_samples):
        t = int(rng.integers(1, T + 1))
        x_t = corrupt(x0, t, table, rng)
        p0 = _validated_predict(denoiser, x_t, t, cond)
        model = _reverse_step_dists(x_t, t, p0, table, t - 1)
        post = _reverse_step_dists(x_t, t, _onehot_p0(x0.data, K), table, t - 1)
        kl = _kl_grids(post, model)
        if kl == float("inf"):
            return float("inf")
        terms.append(kl)
    return prior + T * float(np.mean(terms))


class BayesOracleDenoiser(Denoiser):
    """Exact posterior over clean tokens for an enumerable data distribution.

    Conditioning labels are ignored: the oracle models the unconditional
    distribution it was given.  Intended for verification at small scale.
    """

    def __init__(self, grids: list[TokenGrid], probs, table):
        if len(grids) == 0:
            raise ValueError("empty support")
        if len(grids) > MAX_ORACLE_SUPPORT:
            raise SizeGuardError(
                f"oracle support limited to {MAX_ORACLE_SUPPORT} grids, got {len(grids)}"
            )
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (len(grids),):
            raise ValueError("probs must be one weight per support grid")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be a probability vector")
        first = grids[0]
        for g in grids:
            if (g.N_q, g.L, g.K) != (first.N_q, first.L, first.K):
                raise ValueError("support grids must share shape and K")
            if g.contains_mask():
                raise ValueError("support grids must be mask-free")
        _check_grid_table(first, table)
        self.K = first.K
        self.grid_shape = (first.N_q, first.L)
        self.layout = first.layout
        self._table = table
        self._support = np.stack([g.data for g in grids])  # (S, N_q, L)
        with np.errstate(divide="ignore"):
            self._log_probs = np.log(probs)

    def predict(self, x_t: TokenGrid, t: int, cond=None) -> np.ndarray:
        if (x_t.N_q, x_t.L) != self.grid_shape or x_t.K != self.K:
            raise ValueError("grid shape mismatch with the oracle's support")
        if not 0 <= t <= self._table.T:
            raise ValueError(f"t must be in 0..{self._table.T}, got {t}")
        K = self.K
        N_q, L = self.grid_shape
        ab, bb, gb = _cum_rows(self._table, t, N_q)
        data = x_t.data
        is_mask = data == K  # (N_q, L)
        match = self._support == data[None, :, :]  # (S, N_q, L)
        with np.errstate(divide="ignore"):
            log_keep = np.log(ab + bb)[:, None]
            log_uni = np.log(bb)[:, None]
            log_mask = np.log(gb)[:, None]
        per_pos = np.where(match, log_keep[None], log_uni[None])
        per_pos = np.where(is_mask[None], log_mask[None], per_pos)
        loglik = per_pos.sum(axis=(1, 2)) + self._log_probs  # (S,)
        total = logsumexp(loglik)
        if np.isneginf(total):
            raise InconsistencyError(
                "observed grid has zero probability under the oracle's support"
            )
        w = np.exp(loglik - total)
        flat_support = self._support.reshape(len(w), -1)  # (S, N)
        out = np.zeros((N_q * L, K))
        np.add.at(out, (np.arange(N_q * L)[None, :], flat_support), w[:, None])
        out /= out.sum(axis=1, keepdims=True)
        return out.reshape(N_q, L, K)


def bayes_oracle_denoiser(grids, probs, table) -> BayesOracleDenoiser:
    return BayesOracleDenoiser(grids, probs, table)


def empirical_bayes_denoiser(grids: list[TokenGrid], table) -> BayesOracleDenoiser:
    """Bayes oracle over the empirical distribution of a dataset."""
    if not grids:
        raise ValueError("empty dataset")
    seen: dict[bytes, int] = {}
    unique = []
    counts = []
    for g in grids:
        key = g.data.tobytes()
        if key in seen:
            counts[seen[key]] += 1
        else:
            seen[key] = len(unique)
            unique.append(g)
            counts.append(1)
    probs = np.asarray(counts, dtype=float)
    return BayesOracleDenoiser(unique, probs / probs.sum(), table)


@dataclass
class TrainConfig:
    """Knobs for tabular denoiser fitting."""

    epochs: int = 30
    lr: float = 1.0
    null_cond_prob: float = 0.1
    shuffle: bool = True


class TabularDenoiser(Denoiser):
    """Per-(condition, step, position, observed token) softmax table.

    Each position has its own logits: the prediction for position (q, l)
    depends only on the token observed there, never on neighbors, so any
    product distribution over positions is representable exactly.  Richer
    context models are an extension point, not provided here.
    """

    def __init__(self, K, grid_shape, T, cond_labels, layout="concatenated", weights=None):
        self.K = int(K)
        self.grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
        self.T = int(T)
        self.layout = layout
        self.cond_labels = sorted(int(c) for c in cond_labels)
        self._cond_index = {c: i + 1 for i, c in enumerate(self.cond_labels)}
        shape = (
            len(self.cond_labels) + 1,
            self.T + 1,
            self.grid_shape[0],
            self.grid_shape[1],
            self.K + 1,
            self.K,
        )
        if weights is None:
            self.weights = np.zeros(shape)
        else:
            self.weights = np.asarray(weights, dtype=float).reshape(shape)

    def _cond_row(self, cond) -> int:
        if cond is None:
            return 0
        cond = int(cond)
        if cond not in self._cond_index:
            raise ValueError(f"unknown condition label {cond}")
        return self._cond_index[cond]

    def _probs_for(self, data: np.ndarray, t: int, cond) -> np.ndarray:
        iq, il = np.indices(self.grid_shape)
        w = self.weights[self._cond_row(cond), t, iq, il, data]  # (N_q, L, K)
        w = w - w.max(axis=-1, keepdims=True)
        e = np.exp(w)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, x_t: TokenGrid, t: int, cond=None) -> np.ndarray:
        if (x_t.N_q, x_t.L) != self.grid_shape or x_t.K != self.K:
            raise ValueError("grid shape mismatch with the trained table")
        if not 0 <= t <= self.T:
            raise ValueError(f"t must be in 0..{self.T}, got {t}")
        return self._probs_for(x_t.data, t, cond)

    def to_json_dict(self) -> dict:
        return {
            "kind": "tabular",
            "K": self.K,
            "N_q": self.grid_shape[0],
            "L": self.grid_shape[1],
            "T": self.T,
            "layout": self.layout,
            "cond_labels": self.cond_labels,
            "weights": self.weights.reshape(-1).tolist(),
        }


def save_denoiser(path, denoiser: TabularDenoiser) -> None:
    atomic_write_text(path, json.dumps(denoiser.to_json_dict()))


def load_denoiser(path) -> TabularDenoiser:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("kind") != "tabular":
        raise ValueError(f"unsupported denoiser kind {payload.get('kind')!r}")
    return TabularDenoiser(
        K=payload["K"],
        grid_shape=(payload["N_q"], payload["L"]),
        T=payload["T"],
        cond_labels=payload["cond_labels"],
        layout=payload.get("layout", "concatenated"),
        weights=payload["weights"],
    )


def _posterior_kernel(obs: np.ndarray, rows: np.ndarray, t: int, table, K: int):
    """Per position: Q[k, v] = q(x_{t-1}=k | x_t=obs, x0=v) and the valid-v set.

    obs, rows are flat arrays over positions; returns Q (n, K+1, K) and
    valid (n, K).  Used by the analytic training gradient at toy scales.
    """
    n = obs.size
    n_rows = int(rows.max()) + 1 if n else 1
    ab_t, bb_t, gb_t = _cum_rows(table, t, n_rows)
    ab_s, bb_s, gb_s = _cum_rows(table, t - 1, n_rows)
    a_seg, b_seg, g_seg = _segment_rows(table, t - 1, t, n_rows)
    Q = np.zeros((n, K + 1, K))
    valid = np.zeros((n, K), dtype=bool)
    arange = np.arange(K)
    is_mask = obs == K
    for i in range(n):
        r = rows[i]
        if is_mask[i]:
            if gb_t[r] == 0.0:
                raise InconsistencyError("mask token impossible at this step")
            block = np.full((K, K), g_seg[r] * bb_s[r] / gb_t[r])
            block[arange, arange] += g_seg[r] * ab_s[r] / gb_t[r]
            Q[i, :K, :] = block
            Q[i, K, :] = gb_s[r] / gb_t[r]
            valid[i] = True
        else:
            c = obs[i]
            D = np.full(K, bb_t[r])
            D[c] += ab_t[r]
            v_ok = D > 0
            lead = np.full(K, b_seg[r])
            lead[c] += a_seg[r]
            body = np.full((K, K), bb_s[r])
            body[arange, arange] += ab_s[r]
            with np.errstate(divide="ignore", invalid="ignore"):
                blk = lead[:, None] * body / D[None, :]
            blk[:, ~v_ok] = 0.0
            Q[i, :K, :] = blk
            valid[i] = v_ok
    return Q, valid


def train_denoiser(
    dataset,
    table,
    config: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[TabularDenoiser, list[float]]:
    """Fit the tabular denoiser by SGD on per-step posterior KL.

    ``dataset`` is a list of TokenGrid or (TokenGrid, condition label)
    pairs.  Each step draws one grid and one step index t ~ U{1..T},
    corrupts the grid, and descends the analytic gradient of
    KL(q(x_{t-1}|x_t, x0) || p_model(x_{t-1}|x_t)) through the softmax
    table.  With probability ``null_cond_prob`` the condition is replaced
    by the null label, which trains the guidance reference for free.
    Returns the denoiser and the mean per-epoch loss trace.
    """
    if config is None:
        config = TrainConfig()
    if rng is None:
        rng = np.random.default_rng()
    if not dataset:
        raise ValueError("empty dataset")
    pairs = [(item, None) if isinstance(item, TokenGrid) else tuple(item) for item in dataset]
    first = pairs[0][0]
    for g, _ in pairs:
        if (g.N_q, g.L, g.K, g.layout) != (first.N_q, first.L, first.K, first.layout):
            raise ValueError("dataset grids must share shape, K and layout")
        if g.contains_mask():
            raise ValueError("dataset grids must be mask-free")
    _check_grid_table(first, table)
    if not 0 <= config.null_cond_prob <= 1:
        raise ValueError("null_cond_prob must be in [0, 1]")

    K = first.K
    labels = sorted({c for _, c in pairs if c is not None})
    den = TabularDenoiser(K, (first.N_q, first.L), table.T, labels, layout=first.layout)

    trace: list[float] = []
    n = len(pairs)
    for _ in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_losses = []
        for idx in order:
            grid, cond = pairs[idx]
            if cond is not None and rng.random() < config.null_cond_prob:
                cond = None
            t = int(rng.integers(1, table.T + 1))
            x_t = corrupt(grid, t, table, rng)

            obs = x_t.data.reshape(-1)
            rows = np.repeat(np.arange(grid.N_q), grid.L)
            cols = np.tile(np.arange(grid.L), grid.N_q)
            ci = den._cond_row(cond)
            p = den._probs_for(x_t.data, t, cond).reshape(-1, K)  # (n_pos, K)

            Q, valid = _posterior_kernel(obs, rows, t, table, K)
            p_eff = np.where(valid, p, 0.0)
            M = p_eff.sum(axis=1)
            mix = np.einsum("nkv,nv->nk", Q, p_eff) / M[:, None]

            post_flat = _reverse_step_dists(
                x_t, t, _onehot_p0(grid.data, K), table, t - 1
            ).reshape(-1, K + 1)

            support = post_flat > 0
            ratio = np.where(support, post_flat / np.where(mix > 0, mix, 1.0), 0.0)
            loss = float(
                np.mean(
                    np.sum(
                        np.where(support, post_flat * np.log(np.where(support, ratio, 1.0)), 0.0),
                        axis=1,
                    )
                )
            )
            epoch_losses.append(loss)

            # dL/dp_v = (1 - sum_k post_k Q[k,v] / mix_k) / M on the valid set
            inner = np.einsum("nk,nkv->nv", ratio, Q)
            g_p = np.where(valid, (1.0 - inner) / M[:, None], 0.0)
            g_w = p * (g_p - (p * g_p).sum(axis=1, keepdims=True))
            den.weights[ci, t, rows, cols, obs] -= config.lr * g_w
        trace.append(float(np.mean(epoch_losses)))
    return den, trace
