"""Dense matrix helpers, singular values and numerical rank.

Matrices are plain numpy arrays. Precision is carried by the dtype:
``float32`` is "single" and ``float64`` is "double".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

PRECISIONS = {"single": np.float32, "double": np.float64}


class DecompositionError(RuntimeError):
    """Raised when the SVD fails to converge."""


def resolve_dtype(precision) -> np.dtype:
    """Map ``"single"``/``"double"`` (or a float dtype) to a numpy dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(
                f"unknown precision {precision!r}; expected 'single' or 'double'"
            ) from None
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; expected float32 or float64")
    return dtype


def precision_name(dtype) -> str:
    dtype = resolve_dtype(dtype)
    return "single" if dtype == np.float32 else "double"


def machine_epsilon(precision) -> float:
    """Spacing between 1.0 and the next representable number."""
    return float(np.finfo(resolve_dtype(precision)).eps)


def scaled_epsilon(shape, precision) -> float:
    """Machine epsilon times the largest dimension of ``shape``.

    Computed singular values of an exactly rank-deficient matrix sit at
    roughly ``eps * sigma_max``; this widens the threshold to clear that
    floor, in the same way LAPACK-style rank routines do.
    """
    return machine_epsilon(precision) * max(shape)


def as_matrix(a, precision=None) -> np.ndarray:
    """Validate ``a`` as a finite 2-D float matrix and cast it to ``precision``."""
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"matrix must be non-empty, got shape {arr.shape}")
    if precision is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    else:
        dtype = resolve_dtype(precision)
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf entries")
    return arr


@dataclass(frozen=True)
class SingularSpectrum:
    """Singular values in descending order plus the shape they came from."""

    values: np.ndarray
    source_shape: tuple[int, int]

    @property
    def sigma_max(self) -> float:
        return float(self.values[0]) if len(self.values) else 0.0

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class RankEstimate:
    spectrum: SingularSpectrum
    epsilon: float
    threshold: float
    numerical_rank: int


def _lapack_svd(M, compute_uv):
    try:
        return np.linalg.svd(M, full_matrices=False, compute_uv=compute_uv)
    except np.linalg.LinAlgError:
        pass
    # gesdd occasionally fails where the slower QR-iteration driver succeeds
    try:
        return scipy.linalg.svd(
            M, full_matrices=False, compute_uv=compute_uv, lapack_driver="gesvd"
        )
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DecompositionError(f"SVD did not converge for {M.shape} matrix") from exc


def svd(M, compute_uv: bool = False):
    """Singular values of ``M``, computed at the matrix's own precision.

    With ``compute_uv=True`` returns ``(U, spectrum, Vt)`` so that
    ``U @ diag(spectrum.values) @ Vt`` reconstructs ``M``.
    """
    M = as_matrix(M)
    if compute_uv:
        U, s, Vt = _lapack_svd(M, True)
    else:
        s = _lapack_svd(M, False)
    s = np.clip(np.asarray(s), 0, None)
    spectrum = SingularSpectrum(values=s, source_shape=M.shape)
    if compute_uv:
        return U, spectrum, Vt
    return spectrum


def rank_from_spectrum(spectrum: SingularSpectrum, epsilon: float) -> RankEstimate:
    """Count singular values at or above ``epsilon * sigma_max``.

    Values strictly below the threshold do not contribute. A zero matrix
    has rank 0.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    sigma_max = spectrum.sigma_max
    threshold = epsilon * sigma_max
    if sigma_max == 0.0:
        rank = 0
    else:
        rank = int(np.count_nonzero(spectrum.values >= threshold))
    return RankEstimate(spectrum, float(epsilon), float(threshold), rank)


def numerical_rank(M, epsilon: float | None = None) -> RankEstimate:
    """Numerical rank of ``M``; ``epsilon`` defaults to the machine epsilon
    of the matrix's precision."""
    M = as_matrix(M)
    if epsilon is None:
        epsilon = machine_epsilon(M.dtype)
    elif not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    return rank_from_spectrum(svd(M), epsilon)
