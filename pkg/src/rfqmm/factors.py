"""Eigendecomposition of the covariance and low-rank factor models.

The decomposition is a cyclic Jacobi iteration: sweeps over all off-diagonal
pairs, each annihilated by a plane rotation, until the off-diagonal Frobenius
mass falls below 1e-14 times the Frobenius norm of the input.  For the matrix
sizes this package targets (tens of assets) Jacobi is plenty fast, it is
unconditionally stable on symmetric input, and it keeps the package's linear
algebra self-contained.

A factor model keeps the top k eigenpairs: loadings are the eigenvectors,
the factor covariance is the diagonal of retained eigenvalues, and whatever
the factors miss is the residual covariance R = Sigma - loadings V loadings'.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

#: off-diagonal mass threshold, relative to ||input||_F
JACOBI_TOL = 1e-14

_MAX_SWEEPS = 60

#: components smaller than this are ignored by the sign convention
SIGN_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class EigenDecomposition:
    """Eigenvalues in descending order with matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def explained_ratio(self, k: int) -> float:
        """Share of total variance carried by the top k eigenvalues."""
        total = float(self.eigenvalues.sum())
        return float(self.eigenvalues[:k].sum()) / total


def _apply_sign_convention(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so the first component above SIGN_EPS is positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        big = np.abs(col) > SIGN_EPS
        if big.any() and col[np.argmax(big)] < 0.0:
            out[:, j] = -col
    return out


def jacobi_eigendecomposition(matrix: np.ndarray) -> EigenDecomposition:
    """Full symmetric eigendecomposition by cyclic Jacobi rotations."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(a).max()))):
        raise ValidationError("matrix is not symmetric")
    d = a.shape[0]
    a = a.copy()
    v = np.eye(d)
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        return EigenDecomposition(eigenvalues=np.zeros(d), eigenvectors=v)
    threshold = JACOBI_TOL * norm

    def off_mass():
        off = a - np.diag(np.diag(a))
        return float(np.linalg.norm(off))

    for _ in range(_MAX_SWEEPS):
        if off_mass() <= threshold:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                # classic symmetric Schur rotation annihilating a[p, q]
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.hypot(1.0, tau))
                else:
                    t = -1.0 / (-tau + np.hypot(1.0, tau))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                a[p, :], a[q, :] = c * a[p, :] - s * a[q, :], s * a[p, :] + c * a[q, :]
                a[p, q] = a[q, p] = 0.0
                v[:, p], v[:, q] = c * v[:, p] - s * v[:, q], s * v[:, p] + c * v[:, q]
    if off_mass() > threshold:
        raise ValidationError(
            f"Jacobi iteration failed to converge in {_MAX_SWEEPS} sweeps "
            f"(off-diagonal mass {off_mass():.3e}, threshold {threshold:.3e})"
        )

    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    vectors = _apply_sign_convention(v[:, order])
    eigenvalues.setflags(write=False)
    vectors.setflags(write=False)
    return EigenDecomposition(eigenvalues=eigenvalues, eigenvectors=vectors)


@dataclass(frozen=True, eq=False)
class FactorModel:
    """Rank-k factor representation Sigma ~ loadings V loadings' + R.

    ``loadings`` is d x k with orthonormal columns, ``factor_cov`` is the
    k x k factor covariance and ``residual_cov`` is what the factors miss.
    ``shift_directions`` row i is the image of the i-th inventory unit vector
    in factor space: the factor displacement caused by trading one unit of
    asset i.
    """

    covariance: np.ndarray
    loadings: np.ndarray
    factor_cov: np.ndarray
    residual_cov: np.ndarray
    eigenvalues: np.ndarray  # full spectrum, descending

    @property
    def n_assets(self) -> int:
        return self.loadings.shape[0]

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    @property
    def shift_directions(self) -> np.ndarray:
        """d x k array; row i equals loadings' applied to unit vector e_i."""
        return self.loadings

    @property
    def explained_ratio(self) -> float:
        return float(np.trace(self.factor_cov)) / float(np.trace(self.covariance))

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residual_cov))

    def factor_coordinates(self, inventory) -> np.ndarray:
        """Project inventories (last axis = assets) into factor space."""
        q = np.asarray(inventory, dtype=float)
        return q @ self.loadings


def build_factor_model(covariance: np.ndarray, n_factors: int) -> FactorModel:
    """Keep the top ``n_factors`` eigenpairs of ``covariance``.

    Validates the reconstruction: with all factors retained the residual is
    numerically zero, and in general the residual must stay positive
    semidefinite up to round-off.
    """
    cov = np.asarray(covariance, dtype=float)
    d = cov.shape[0]
    if not 1 <= n_factors <= d:
        raise ValidationError(f"n_factors must be in [1, {d}], got {n_factors}")
    decomp = jacobi_eigendecomposition(cov)
    loadings = decomp.eigenvectors[:, :n_factors].copy()
    factor_cov = np.diag(decomp.eigenvalues[:n_factors].copy())
    residual = cov - loadings @ factor_cov @ loadings.T
    residual = 0.5 * (residual + residual.T)

    scale = float(np.linalg.norm(cov))
    if n_factors == d:
        if float(np.linalg.norm(residual)) > 1e-9 * scale:
            raise ValidationError(
                "full-rank factor model should have a vanishing residual, "
                f"got Frobenius norm {np.linalg.norm(residual):.3e}"
            )
        # A full-rank model reconstructs the covariance exactly in exact
        # arithmetic, so the residual is zero by definition; snap the
        # round-off dust so that residual-free code paths can rely on it.
        residual = np.zeros_like(residual)
    res_eigs = jacobi_eigendecomposition(residual).eigenvalues
    if res_eigs[-1] < -1e-8 * float(np.trace(cov)):
        raise ValidationError(
            f"residual covariance has a negative eigenvalue {res_eigs[-1]:.3e}"
        )

    for arr in (loadings, factor_cov, residual):
        arr.setflags(write=False)
    return FactorModel(
        covariance=cov,
        loadings=loadings,
        factor_cov=factor_cov,
        residual_cov=residual,
        eigenvalues=decomp.eigenvalues,
    )


def inventory_factor_model(covariance: np.ndarray) -> FactorModel:
    """Identity-loadings model: factors are the raw inventories.

    Useful for solving directly in inventory coordinates; the factor
    covariance is the full (generally non-diagonal) covariance and the
    residual vanishes by construction.
    """
    cov = np.asarray(covariance, dtype=float)
    d = cov.shape[0]
    decomp = jacobi_eigendecomposition(cov)
    eye = np.eye(d)
    zero = np.zeros((d, d))
    for arr in (eye, zero):
        arr.setflags(write=False)
    return FactorModel(
        covariance=cov,
        loadings=eye,
        factor_cov=cov,
        residual_cov=zero,
        eigenvalues=decomp.eigenvalues,
    )
