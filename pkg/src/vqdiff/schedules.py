"""Noise schedules for mask+uniform categorical diffusion.

A schedule over ``T`` steps and a ``K``-token alphabet (plus mask id ``K``)
is stored as cumulative coefficients ``alpha_bar`` (probability of still
carrying the original token), ``beta_bar`` (per-category uniform mass) and
``gamma_bar`` (mask mass), together with the stepwise coefficients
``alpha``, ``beta``, ``gamma`` that generate them through the recurrences

    alpha_bar[t] = alpha_bar[t-1] * alpha[t]
    1 - gamma_bar[t] = (1 - gamma_bar[t-1]) * (1 - gamma[t])
    beta_bar[t] = (1 - alpha_bar[t] - gamma_bar[t]) / K

Two constructions are provided: a linear ramp shared by every position,
and a per-codebook variant that masks later (residual) codebooks earlier
so that reverse generation recovers coarse content first.

All arrays are indexed by step ``t in 0..T``; index 0 of the stepwise
arrays is an identity placeholder so that ``alpha[t]`` is the coefficient
of the step taking ``t-1`` to ``t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ScheduleError

SIMPLEX_ATOL = 1e-12

LAYOUTS = ("concatenated", "interleaved")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _check_unit_interval(name: str, a: np.ndarray) -> None:
    if np.any(a < -SIMPLEX_ATOL) or np.any(a > 1 + SIMPLEX_ATOL):
        raise ScheduleError(f"{name} has entries outside [0, 1]")


def _derive_stepwise(alpha_bar, gamma_bar, K):
    """Invert the cumulative products into per-step coefficients.

    Degenerate steps (alpha_bar already 0, or gamma_bar already 1) get
    alpha=0 / gamma=0 respectively; beta is the simplex residual over K.
    """
    T = len(alpha_bar) - 1
    alpha = np.ones(T + 1)
    gamma = np.zeros(T + 1)
    for t in range(1, T + 1):
        if alpha_bar[t] > alpha_bar[t - 1] + SIMPLEX_ATOL:
            raise ScheduleError(f"alpha_bar increases at t={t}")
        if gamma_bar[t] < gamma_bar[t - 1] - SIMPLEX_ATOL:
            raise ScheduleError(f"gamma_bar decreases at t={t}")
        alpha[t] = alpha_bar[t] / alpha_bar[t - 1] if alpha_bar[t - 1] > 0 else 0.0
        survive_prev = 1.0 - gamma_bar[t - 1]
        gamma[t] = 1.0 - (1.0 - gamma_bar[t]) / survive_prev if survive_prev > 0 else 0.0
    beta = (1.0 - alpha - gamma) / K
    if np.any(beta < -1e-9):
        raise ScheduleError("cumulative tables imply a negative uniform mass")
    beta = np.clip(beta, 0.0, None)
    beta[np.abs(beta) < SIMPLEX_ATOL] = 0.0  # quotient noise; keep pure-mask steps exact
    beta[0] = 0.0
    return alpha, beta, gamma


@dataclass(frozen=True)
class ScheduleTable:
    """Mask+uniform schedule shared by every position of a token grid.

    ``alpha_bar``, ``beta_bar``, ``gamma_bar`` have length T+1 (cumulative,
    ``t=0`` is the identity); ``alpha``, ``beta``, ``gamma`` have length T+1
    with index 0 unused (identity placeholder).
    """

    T: int
    K: int
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        for name in ("alpha_bar", "beta_bar", "gamma_bar", "alpha", "beta", "gamma"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        self.validate()

    @property
    def mask_id(self) -> int:
        return self.K

    @property
    def n_layers(self) -> int:
        return 1

    def layer_of(self, position: int) -> int:
        return 0

    def cumulative(self, t: int, layer: int = 0):
        """(alpha_bar, beta_bar, gamma_bar) at step ``t``."""
        return self.alpha_bar[t], self.beta_bar[t], self.gamma_bar[t]

    def stepwise(self, t: int, layer: int = 0):
        """(alpha, beta, gamma) of the single step ``t-1 -> t``; requires t >= 1."""
        if not 1 <= t <= self.T:
            raise ValueError(f"step index must be in 1..{self.T}, got {t}")
        return self.alpha[t], self.beta[t], self.gamma[t]

    def segment(self, s: int, t: int, layer: int = 0):
        """(alpha, beta, gamma) of the composite kernel taking step s to step t > s.

        The product of mask+uniform matrices stays in the family, with the
        composite coefficients given by the same quotient rules as single steps.
        """
        if not 0 <= s < t <= self.T:
            raise ValueError(f"need 0 <= s < t <= {self.T}, got s={s}, t={t}")
        ab_s, _, gb_s = self.cumulative(s, layer)
        ab_t, _, gb_t = self.cumulative(t, layer)
        alpha = ab_t / ab_s if ab_s > 0 else 0.0
        gamma = 1.0 - (1.0 - gb_t) / (1.0 - gb_s) if gb_s < 1 else 0.0
        beta = max(0.0, (1.0 - alpha - gamma)) / self.K
        return alpha, beta, gamma

    def validate(self) -> None:
        for name in ("alpha_bar", "beta_bar", "gamma_bar"):
            arr = getattr(self, name)
            if arr.shape != (self.T + 1,):
                raise ScheduleError(f"{name} must have length T+1={self.T + 1}")
            _check_unit_interval(name, arr)
        closure = self.alpha_bar + self.K * self.beta_bar + self.gamma_bar
        if np.max(np.abs(closure - 1.0)) > SIMPLEX_ATOL:
            raise ScheduleError("alpha_bar + K*beta_bar + gamma_bar must equal 1")
        if not (self.alpha_bar[0] == 1.0 and self.gamma_bar[0] == 0.0 and self.beta_bar[0] == 0.0):
            raise ScheduleError("step 0 must be the identity (alpha_bar=1, others 0)")
        if np.any(np.diff(self.alpha_bar) > SIMPLEX_ATOL):
            raise ScheduleError("alpha_bar must be non-increasing")
        if np.any(np.diff(self.gamma_bar) < -SIMPLEX_ATOL):
            raise ScheduleError("gamma_bar must be non-decreasing")
        # recurrence consistency between cumulative and stepwise views
        rebuilt_ab = self.alpha_bar[:-1] * self.alpha[1:]
        rebuilt_surv = (1.0 - self.gamma_bar[:-1]) * (1.0 - self.gamma[1:])
        if np.max(np.abs(rebuilt_ab - self.alpha_bar[1:])) > SIMPLEX_ATOL:
            raise ScheduleError("alpha recurrence violated")
        if np.max(np.abs(rebuilt_surv - (1.0 - self.gamma_bar[1:]))) > SIMPLEX_ATOL:
            raise ScheduleError("gamma recurrence violated")

    def to_json_dict(self) -> dict:
        return {
            "T": self.T,
            "K": self.K,
            "kind": self.kind if self.kind in ("linear", "improved") else "linear",
            "N_q": 1,
            "layout": "concatenated",
            "L": 0,
            "alpha_bar": self.alpha_bar.tolist(),
            "gamma_bar": self.gamma_bar.tolist(),
            "beta_bar": self.beta_bar.tolist(),
        }


@dataclass(frozen=True)
class PositionalScheduleTable:
    """Per-codebook schedule: each of ``N_q`` layers has its own coefficients.

    Cumulative and stepwise arrays have shape (T+1, N_q).  ``layout``
    defines which layer owns a flattened sequence position: under
    ``concatenated`` layout position ``i`` belongs to layer ``i // L``,
    under ``interleaved`` layout to ``i % N_q``.
    """

    T: int
    K: int
    N_q: int
    L: int
    layout: str
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    kind: str = "improved"

    def __post_init__(self):
        for name in ("alpha_bar", "beta_bar", "gamma_bar", "alpha", "beta", "gamma"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        self.validate()

    @property
    def mask_id(self) -> int:
        return self.K

    @property
    def n_layers(self) -> int:
        return self.N_q

    @property
    def n_positions(self) -> int:
        return self.N_q * self.L

    def layer_of(self, position: int) -> int:
        if not 0 <= position < self.N_q * self.L:
            raise ValueError(f"position {position} outside 0..{self.N_q * self.L - 1}")
        if self.layout == "concatenated":
            return position // self.L
        return position % self.N_q

    def cumulative(self, t: int, layer: int = 0):
        return self.alpha_bar[t, layer], self.beta_bar[t, layer], self.gamma_bar[t, layer]

    def stepwise(self, t: int, layer: int = 0):
        if not 1 <= t <= self.T:
            raise ValueError(f"step index must be in 1..{self.T}, got {t}")
        return self.alpha[t, layer], self.beta[t, layer], self.gamma[t, layer]

    def segment(self, s: int, t: int, layer: int = 0):
        if not 0 <= s < t <= self.T:
            raise ValueError(f"need 0 <= s < t <= {self.T}, got s={s}, t={t}")
        ab_s, _, gb_s = self.cumulative(s, layer)
        ab_t, _, gb_t = self.cumulative(t, layer)
        alpha = ab_t / ab_s if ab_s > 0 else 0.0
        gamma = 1.0 - (1.0 - gb_t) / (1.0 - gb_s) if gb_s < 1 else 0.0
        beta = max(0.0, (1.0 - alpha - gamma)) / self.K
        return alpha, beta, gamma

    def validate(self) -> None:
        shape = (self.T + 1, self.N_q)
        if self.layout not in LAYOUTS:
            raise ScheduleError(f"layout must be one of {LAYOUTS}")
        for name in ("alpha_bar", "beta_bar", "gamma_bar"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ScheduleError(f"{name} must have shape {shape}")
            _check_unit_interval(name, arr)
        closure = self.alpha_bar + self.K * self.beta_bar + self.gamma_bar
        if np.max(np.abs(closure - 1.0)) > SIMPLEX_ATOL:
            raise ScheduleError("per-layer simplex closure violated")
        # later codebooks must never be less masked than earlier ones
        if np.any(np.diff(self.gamma_bar, axis=1) < -SIMPLEX_ATOL):
            raise ScheduleError("gamma_bar must be non-decreasing in the layer index")
        for q in range(self.N_q):
            if np.any(np.diff(self.alpha_bar[:, q]) > SIMPLEX_ATOL):
                raise ScheduleError(f"alpha_bar must be non-increasing in t (layer {q})")
            if np.any(np.diff(self.gamma_bar[:, q]) < -SIMPLEX_ATOL):
                raise ScheduleError(f"gamma_bar must be non-decreasing in t (layer {q})")

    def to_json_dict(self) -> dict:
        return {
            "T": self.T,
            "K": self.K,
            "kind": "improved",
            "N_q": self.N_q,
            "layout": self.layout,
            "L": self.L,
            "alpha_bar": self.alpha_bar.tolist(),
            "gamma_bar": self.gamma_bar.tolist(),
            "beta_bar": self.beta_bar.tolist(),
        }


def linear_schedule(T: int, K: int) -> ScheduleTable:
    """Linear ramp: mask mass grows to 0.9, total uniform mass to 0.1.

    At step t the cumulative coefficients are gamma_bar = 0.9*t/T,
    K*beta_bar = 0.1*t/T and alpha_bar = 1 - t/T, so the process ends in
    the fixed distribution (0.1/K, ..., 0.1/K, 0.9).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    frac = np.arange(T + 1) / T
    alpha_bar = 1.0 - frac
    gamma_bar = 0.9 * frac
    beta_bar = (1.0 - alpha_bar - gamma_bar) / K
    alpha, beta, gamma = _derive_stepwise(alpha_bar, gamma_bar, K)
    return ScheduleTable(T, K, alpha_bar, beta_bar, gamma_bar, alpha, beta, gamma, kind="linear")


def improved_schedule(
    T: int,
    K: int,
    N_q: int,
    layout: str = "concatenated",
    L: int = 1,
) -> PositionalScheduleTable:
    """Per-codebook schedule that masks later (residual) layers earlier.

    Layer ``q`` of ``N_q`` uses

        alpha_bar[t][q] = 1 - t/T - exp(q / (2*N_q)) / (2*T)
        gamma_bar[t][q] = t/T + exp(q / (2*N_q)) / (2*T)

    which makes the uniform component identically zero (a pure-mask
    process).  The raw alpha_bar dips below 0 at t=T; it is clamped to
    [0, 1] and gamma_bar recomputed as the simplex residual, so every
    layer ends fully masked.  Note the offset term makes step 0 carry a
    small amount of mask mass already; forward corruption at t=0 is
    defined as the identity regardless (see ``diffusion.corrupt``).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if N_q < 1:
        raise ValueError(f"N_q must be >= 1, got {N_q}")
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    if layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}, got {layout!r}")

    t = (np.arange(T + 1) / T)[:, None]
    q = np.arange(N_q)[None, :]
    offset = np.exp(q / (2.0 * N_q)) / (2.0 * T)
    alpha_bar_raw = 1.0 - t - offset
    beta_bar = np.zeros_like(alpha_bar_raw)  # the three-line construction leaves no uniform mass
    alpha_bar = np.clip(alpha_bar_raw, 0.0, 1.0)
    gamma_bar = 1.0 - alpha_bar - K * beta_bar

    alpha = np.ones_like(alpha_bar)
    beta = np.zeros_like(alpha_bar)
    gamma = np.zeros_like(alpha_bar)
    for layer in range(N_q):
        alpha[:, layer], beta[:, layer], gamma[:, layer] = _derive_stepwise(
            alpha_bar[:, layer], gamma_bar[:, layer], K
        )
    return PositionalScheduleTable(
        T, K, N_q, L, layout, alpha_bar, beta_bar, gamma_bar, alpha, beta, gamma
    )


def from_cumulative(alpha_bar, gamma_bar, K: int, kind: str = "custom") -> ScheduleTable:
    """Build a table from cumulative alpha_bar/gamma_bar arrays (length T+1)."""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    gamma_bar = np.asarray(gamma_bar, dtype=np.float64)
    if alpha_bar.shape != gamma_bar.shape or alpha_bar.ndim != 1 or len(alpha_bar) < 2:
        raise ValueError("alpha_bar and gamma_bar must be 1-D arrays of equal length >= 2")
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    T = len(alpha_bar) - 1
    beta_bar = (1.0 - alpha_bar - gamma_bar) / K
    alpha, beta, gamma = _derive_stepwise(alpha_bar, gamma_bar, K)
    return ScheduleTable(T, K, alpha_bar, beta_bar, gamma_bar, alpha, beta, gamma, kind=kind)


def from_stepwise(alpha, beta, gamma, K: int) -> ScheduleTable:
    """Build a table from per-step coefficients (arrays of length T, steps 1..T).

    Each step must satisfy alpha + K*beta + gamma = 1 within 1e-9.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if not (alpha.shape == beta.shape == gamma.shape) or alpha.ndim != 1 or len(alpha) < 1:
        raise ValueError("alpha, beta, gamma must be 1-D arrays of equal length >= 1")
    if np.max(np.abs(alpha + K * beta + gamma - 1.0)) > 1e-9:
        raise ValueError("each step must satisfy alpha + K*beta + gamma = 1")
    if np.any(alpha < 0) or np.any(beta < 0) or np.any(gamma < 0):
        raise ValueError("stepwise coefficients must be nonnegative")
    T = len(alpha)
    alpha_full = np.concatenate([[1.0], alpha])
    beta_full = np.concatenate([[0.0], beta])
    gamma_full = np.concatenate([[0.0], gamma])
    alpha_bar = np.cumprod(alpha_full)
    gamma_bar = 1.0 - np.cumprod(1.0 - gamma_full)
    beta_bar = (1.0 - alpha_bar - gamma_bar) / K
    return ScheduleTable(T, K, alpha_bar, beta_bar, gamma_bar, alpha_full, beta_full, gamma_full)


def stepwise_from_cumulative(table: ScheduleTable) -> ScheduleTable:
    """Recompute the stepwise coefficients of ``table`` from its cumulatives."""
    alpha, beta, gamma = _derive_stepwise(table.alpha_bar, table.gamma_bar, table.K)
    return ScheduleTable(
        table.T, table.K, table.alpha_bar, table.beta_bar, table.gamma_bar,
        alpha, beta, gamma, kind=table.kind,
    )


def schedule_from_json_dict(payload: dict) -> ScheduleTable | PositionalScheduleTable:
    kind = payload.get("kind", "linear")
    T = int(payload["T"])
    K = int(payload["K"])
    alpha_bar = np.asarray(payload["alpha_bar"], dtype=np.float64)
    gamma_bar = np.asarray(payload["gamma_bar"], dtype=np.float64)
    beta_bar = np.asarray(payload["beta_bar"], dtype=np.float64)
    if kind == "improved":
        N_q = int(payload["N_q"])
        L = int(payload["L"])
        layout = payload.get("layout", "concatenated")
        alpha = np.ones_like(alpha_bar)
        beta = np.zeros_like(alpha_bar)
        gamma = np.zeros_like(alpha_bar)
        for q in range(N_q):
            alpha[:, q], beta[:, q], gamma[:, q] = _derive_stepwise(
                alpha_bar[:, q], gamma_bar[:, q], K
            )
        return PositionalScheduleTable(
            T, K, N_q, L, layout, alpha_bar, beta_bar, gamma_bar, alpha, beta, gamma
        )
    alpha, beta, gamma = _derive_stepwise(alpha_bar, gamma_bar, K)
    return ScheduleTable(T, K, alpha_bar, beta_bar, gamma_bar, alpha, beta, gamma, kind=kind)


def load_schedule(path) -> ScheduleTable | PositionalScheduleTable:
    with open(path, "r", encoding="utf-8") as fh:
        return schedule_from_json_dict(json.load(fh))


def save_schedule(path, table: ScheduleTable | PositionalScheduleTable) -> None:
    from .tokens import atomic_write_text

    atomic_write_text(path, json.dumps(table.to_json_dict()))


def format_table(table: ScheduleTable | PositionalScheduleTable) -> str:
    """Human-readable per-step listing used by the CLI."""
    lines = []
    if isinstance(table, PositionalScheduleTable):
        lines.append(f"kind=improved T={table.T} K={table.K} N_q={table.N_q} "
                     f"layout={table.layout} L={table.L}")
        header = f"{'t':>5} {'layer':>5} {'alpha_bar':>12} {'K*beta_bar':>12} {'gamma_bar':>12}"
        lines.append(header)
        for t in range(table.T + 1):
            for q in range(table.N_q):
                ab, bb, gb = table.cumulative(t, q)
                lines.append(f"{t:>5} {q:>5} {ab:>12.6f} {table.K * bb:>12.6f} {gb:>12.6f}")
    else:
        lines.append(f"kind={table.kind} T={table.T} K={table.K}")
        lines.append(f"{'t':>5} {'alpha_bar':>12} {'K*beta_bar':>12} {'gamma_bar':>12}")
        for t in range(table.T + 1):
            ab, bb, gb = table.cumulative(t)
            lines.append(f"{t:>5} {ab:>12.6f} {table.K * bb:>12.6f} {gb:>12.6f}")
    return "\n".join(lines)
