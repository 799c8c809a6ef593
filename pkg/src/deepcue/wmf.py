"""Weighted matrix factorization for implicit feedback, fitted by ALS.

Preference ``p_ui`` is the binarized interaction and confidence is
``c_ui = 1 + alpha * p_ui``; unobserved cells keep ``p = 0, c = 1``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ConfigError, DimensionError, NumericalError
from .interactions import BinaryInteractions

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WmfConfig:
    rank: int = 50
    alpha: float = 40.0
    reg: float = 0.01
    sweeps: int = 15
    seed: int = 0
    n_jobs: int = 1  # >1 solves rows on a thread pool; 1 is the deterministic mode

    def __post_init__(self):
        if self.rank < 1 or self.alpha < 0 or not self.reg > 0 or self.sweeps < 1 or self.n_jobs < 1:
            raise ConfigError(f"invalid WMF config {self}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Factors:
    U: np.ndarray  # [num_users, rank]
    V: np.ndarray  # [num_items, rank]


def normal_equations(other: np.ndarray, positives: np.ndarray, cfg: WmfConfig, gram: np.ndarray | None = None):
    """Ridge system ``(Y^T C Y + reg I) x = Y^T C p`` for one row.

    ``other`` is the fixed factor matrix Y and ``positives`` the indices of
    its rows with preference 1.
    """
    if gram is None:
        gram = other.T @ other
    Yp = other[positives]
    A = gram + cfg.alpha * (Yp.T @ Yp) + cfg.reg * np.eye(other.shape[1])
    rhs = (1.0 + cfg.alpha) * Yp.sum(axis=0)
    return A, rhs


def _solve(A, rhs):
    try:
        return cho_solve(cho_factor(A, lower=True, check_finite=False), rhs, check_finite=False)
    except LinAlgError as exc:
        raise NumericalError(f"normal equations not positive definite: {exc}") from None


def solve_rows(other: np.ndarray, rows: tuple[np.ndarray, ...], cfg: WmfConfig) -> np.ndarray:
    """Solve every row's ridge system against the fixed factors ``other``."""
    gram = other.T @ other
    out = np.empty((len(rows), other.shape[1]))

    def work(chunk):
        for r in chunk:
            out[r] = _solve(*normal_equations(other, rows[r], cfg, gram))

    if cfg.n_jobs == 1:
        work(range(len(rows)))
    else:
        chunks = np.array_split(np.arange(len(rows)), cfg.n_jobs)
        with ThreadPoolExecutor(cfg.n_jobs) as pool:
            list(pool.map(work, chunks))
    return out


def init_factors(num_users: int, num_items: int, cfg: WmfConfig) -> Factors:
    rng = np.random.default_rng(cfg.seed)
    return Factors(rng.normal(0.0, 0.01, (num_users, cfg.rank)), rng.normal(0.0, 0.01, (num_items, cfg.rank)))


def fit_wmf(
    b: BinaryInteractions,
    cfg: WmfConfig = WmfConfig(),
    callback: Callable[[str, int, Factors], None] | None = None,
) -> Factors:
    """Run exactly ``cfg.sweeps`` user-then-item ALS alternations.

    ``callback(half, sweep, factors)`` fires after each half-sweep with
    ``half`` in ``{"users", "items"}``.
    """
    if b.nnz == 0:
        raise ConfigError("WMF needs at least one positive interaction")
    f = init_factors(b.num_users, b.num_items, cfg)
    by_item = b.item_positives()
    for sweep in range(cfg.sweeps):
        f.U = solve_rows(f.V, b.positives, cfg)
        if callback:
            callback("users", sweep, f)
        f.V = solve_rows(f.U, by_item, cfg)
        if callback:
            callback("items", sweep, f)
        logger.debug("wmf sweep %d objective %.6g", sweep, wmf_objective(f, b, cfg))
    if not (np.isfinite(f.U).all() and np.isfinite(f.V).all()):
        raise NumericalError("WMF produced non-finite factors")
    return f


def wmf_objective(f: Factors, b: BinaryInteractions, cfg: WmfConfig) -> float:
    """``sum c (p - u.v)^2 + reg (|U|^2 + |V|^2)`` over all cells."""
    total = float(np.sum((f.U.T @ f.U) * (f.V.T @ f.V)))  # sum of all squared predictions
    for u, pos in enumerate(b.positives):
        if len(pos):
            s = f.V[pos] @ f.U[u]
            total += float(np.sum((1.0 + cfg.alpha) * (1.0 - s) ** 2 - s**2))
    return total + cfg.reg * (float(np.sum(f.U**2)) + float(np.sum(f.V**2)))


def score_items(u_factor: np.ndarray, V: np.ndarray) -> np.ndarray:
    u_factor = np.asarray(u_factor)
    if V.ndim != 2 or u_factor.shape != (V.shape[1],):
        raise DimensionError(f"score_items: u{u_factor.shape} vs V{V.shape}")
    return V @ u_factor
