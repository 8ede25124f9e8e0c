import numpy as np


class NumericalError(ArithmeticError):
    """A matrix that must be positive definite could not be factorised."""


def spd_inverse(A, what="matrix"):
    """Inverse of a symmetric positive-definite matrix via Cholesky.

    On factorisation failure a jitter of 1e-10 * tr(A)/K is added once.
    Returns ``(inverse, jittered)``.
    """
    A = np.asarray(A, dtype=float)
    K = A.shape[0]
    try:
        L = np.linalg.cholesky(A)
        jittered = False
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(A) / K
        try:
            if not jitter > 0:
                raise np.linalg.LinAlgError
            L = np.linalg.cholesky(A + jitter * np.eye(K))
        except np.linalg.LinAlgError:
            raise NumericalError(f"{what} is not positive definite (condition number {np.linalg.cond(A):.3g})") from None
        jittered = True
    Linv = np.linalg.solve(L, np.eye(K))
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T), jittered


def batched_spd_inverse(A, what="matrix"):
    """Inverse of a stack of SPD matrices; raises NumericalError naming the first bad index."""
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        bad = first_non_pd(A)
        raise NumericalError(f"{what}[{bad}] is not positive definite") from None
    K = A.shape[-1]
    Linv = np.linalg.solve(L, np.broadcast_to(np.eye(K), A.shape))
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def first_non_pd(A):
    for i in range(A.shape[0]):
        try:
            np.linalg.cholesky(A[i])
        except np.linalg.LinAlgError:
            return i
    return -1


def is_pd(A) -> np.ndarray:
    """Per-matrix positive-definiteness flags for a stack."""
    try:
        np.linalg.cholesky(A)
        return np.ones(A.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        out = np.ones(A.shape[0], dtype=bool)
        for i in range(A.shape[0]):
            try:
                np.linalg.cholesky(A[i])
            except np.linalg.LinAlgError:
                out[i] = False
        return out
