"""Low-rank factor algebra shared by the learner and the inference code."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


class RankError(ValueError):
    """Requested rank does not fit the matrix."""


class DegenerateFactorError(ArithmeticError):
    """A Gram matrix of the factors is numerically rank deficient."""


@dataclass(frozen=True)
class FactorPair:
    """Factors ``(U, V)`` of one arm's estimate ``M = U V^T``."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[1] != self.v.shape[1]:
            raise ValueError(f"incompatible factor shapes {self.u.shape} and {self.v.shape}")

    @property
    def r(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    def product(self) -> np.ndarray:
        return self.u @ self.v.T

    def entry(self, j1: int, j2: int) -> float:
        return float(self.u[j1].dot(self.v[j2]))

    def balance_defect(self) -> float:
        """``||U^T U - V^T V||_F``."""
        return float(np.linalg.norm(self.u.T @ self.u - self.v.T @ self.v))


@dataclass(frozen=True)
class ThinSvd:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    @property
    def r(self) -> int:
        return self.singular_values.shape[0]

    def matrix(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right.T

    @property
    def lambda_max(self) -> float:
        return float(self.singular_values[0])

    @property
    def lambda_min(self) -> float:
        return float(self.singular_values[-1])

    @property
    def condition_number(self) -> float:
        return self.lambda_max / self.lambda_min if self.lambda_min > 0 else np.inf


@dataclass(frozen=True)
class IncoherenceReport:
    mu: float
    row_norms_left: np.ndarray
    row_norms_right: np.ndarray


def _check_rank(m: np.ndarray, r: int) -> None:
    if m.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if r < 1 or r > min(m.shape):
        raise RankError(f"rank {r} invalid for a {m.shape[0]}x{m.shape[1]} matrix")


def truncated_svd(m: np.ndarray, r: int) -> ThinSvd:
    """Top-``r`` singular triplets of ``m`` from a dense SVD."""
    _check_rank(m, r)
    left, s, right_t = np.linalg.svd(m, full_matrices=False)
    return ThinSvd(left[:, :r], s[:r], right_t[:r].T)


def balanced_factorize(m: np.ndarray, r: int) -> FactorPair:
    """``U = L sqrt(S)``, ``V = R sqrt(S)`` from the rank-``r`` truncated SVD."""
    svd = truncated_svd(np.asarray(m, dtype=float), r)
    root = np.sqrt(svd.singular_values)
    return FactorPair(svd.left * root, svd.right * root)


def rebalance_fast(pair: FactorPair, strict: bool = False) -> tuple[FactorPair, int]:
    """Restore ``U^T U = V^T V`` without forming the ``d1 x d2`` product.

    Only r x r eigen/singular value decompositions are taken. Returns the new
    pair and the number of Gram eigenvalues that had to be clamped to the
    floor; with ``strict=True`` any clamping raises DegenerateFactorError.
    """
    u = np.ascontiguousarray(pair.u, dtype=float)
    v = np.ascontiguousarray(pair.v, dtype=float)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("factors have non-finite entries")
    u_new, v_new, _, n_clamped = _kernels.rebalance_factors(u, v, _kernels.GRAM_FLOOR)
    if strict and n_clamped:
        raise DegenerateFactorError(f"{n_clamped} Gram eigenvalue(s) below the floor")
    return FactorPair(u_new, v_new), int(n_clamped)


def tangent_project(q: np.ndarray, svd: ThinSvd) -> np.ndarray:
    """Projection onto the tangent space of the rank-r manifold at ``svd``.

    Computes ``L L^T Q + Q R R^T - L L^T Q R R^T``.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (svd.left.shape[0], svd.right.shape[0]):
        raise ValueError(f"Q has shape {q.shape}, expected {(svd.left.shape[0], svd.right.shape[0])}")
    lq = svd.left @ (svd.left.T @ q)
    qr = (q @ svd.right) @ svd.right.T
    lqr = (lq @ svd.right) @ svd.right.T
    return lq + qr - lqr


def rank_r_project(m: np.ndarray, r: int) -> tuple[np.ndarray, ThinSvd]:
    """Best rank-``r`` approximation ``L L^T m R R^T`` and its thin SVD."""
    svd = truncated_svd(np.asarray(m, dtype=float), r)
    return svd.matrix(), svd


def incoherence(svd: ThinSvd) -> IncoherenceReport:
    d1, r = svd.left.shape
    d2 = svd.right.shape[0]
    left = np.linalg.norm(svd.left, axis=1)
    right = np.linalg.norm(svd.right, axis=1)
    mu = max(np.sqrt(d1 / r) * left.max(), np.sqrt(d2 / r) * right.max())
    return IncoherenceReport(float(mu), left, right)
