"""Dense matrix helpers, a counter-based PRNG and a one-sided Jacobi SVD.

Matrices are plain 2-D ``numpy.float64`` arrays. The functions here add the
shape/finiteness contracts the rest of the package relies on.

PRNG
----
``Rng`` is SplitMix64 (Steele, Lea & Flood 2014). The k-th output (k = 1, 2,
...) for seed ``s`` is ``mix(s + k * 0x9E3779B97F4A7C15 mod 2**64)`` with::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniforms in [0, 1) take the top 53 bits: ``(x >> 11) * 2**-53``. Normals
use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.
Because the generator is counter based, every stream is vectorisable and
identical on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hydra_peft.errors import ContractError, NumericalError, ShapeError

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seedable SplitMix64 generator. Single owner; not thread safe."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(GOLDEN_GAMMA)
            return _mix(z)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, high: int, size: int) -> np.ndarray:
        """Uniform integers in ``[0, high)``."""
        if high < 1:
            raise ContractError(f"integers: high must be >= 1, got {high}")
        return np.floor(self.uniform(size) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, *keys: int) -> "Rng":
        """Derive an independent generator from this seed and integer keys.

        Does not advance this generator.
        """
        z = self.seed
        for key in keys:
            with np.errstate(over="ignore"):
                mixed = _mix(np.array([(z ^ (int(key) & _MASK64)) + GOLDEN_GAMMA & _MASK64], dtype=np.uint64))
            z = int(mixed[0])
        return Rng(z)


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm_sq(m) -> float:
    m = as_matrix(m)
    return float(np.sum(m * m))


def gaussian(rng: Rng, rows: int, cols: int, sigma: float) -> np.ndarray:
    """i.i.d. N(0, sigma^2) matrix drawn from ``rng`` via Box-Muller.

    The stream advances by the same amount whatever ``sigma`` is.
    """
    if sigma < 0:
        raise ContractError(f"gaussian: sigma must be >= 0, got {sigma}")
    z = rng.normal(rows * cols).reshape(rows, cols)
    return z * sigma


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint column pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns where ``good`` is False with an orthonormal completion."""
    rows = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    candidates = iter(np.eye(rows))
    for j in np.flatnonzero(~good):
        while True:
            v = next(candidates).copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-6:
                break
        v /= norm
        u[:, j] = v
        basis.append(v)
    return u


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int):
    rows, cols = a.shape
    work = a.copy()
    v = np.eye(cols)
    rounds = _round_robin(cols)
    residual = 0.0
    for _ in range(max_sweeps):
        residual = 0.0
        rotated = False
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(alpha * beta)
            rel = np.zeros_like(gamma)
            nz = denom > 0
            rel[nz] = np.abs(gamma[nz]) / denom[nz]
            hot = rel > tol
            if not hot.any():
                continue
            residual = max(residual, float(rel.max()))
            rotated = True
            p, q = p[hot], q[hot]
            alpha, beta, gamma = alpha[hot], beta[hot], gamma[hot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = work[:, p], work[:, q]
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalError(
            f"svd: Jacobi did not converge in {max_sweeps} sweeps (off-diagonal residual {residual:.3e})"
        )
    sv = np.sqrt(np.einsum("ij,ij->j", work, work))
    good = sv > 0
    u = np.zeros_like(work)
    u[:, good] = work[:, good] / sv[good]
    if not good.all():
        u = _complete_columns(u, good)
    return u, sv, v


def svd(m, tol: float = 1e-12, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Singular values are returned in non-increasing order, ties broken by the
    original column index. Each column of ``u`` is sign-flipped so that its
    largest-magnitude entry is positive (``vt`` rows follow).
    """
    a = as_matrix(m, "m")
    if min(a.shape) < 1:
        raise ContractError(f"svd: empty matrix of shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("svd: matrix contains non-finite entries")

    if a.shape[0] >= a.shape[1]:
        u, s, v = _jacobi_tall(a, tol, max_sweeps)
    else:
        ut, s, vt_t = _jacobi_tall(a.T, tol, max_sweeps)
        u, v = vt_t, ut

    order = np.argsort(-s, kind="stable")
    u, s, v = u[:, order], s[order], v[:, order]

    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    v = v * signs
    return SvdResult(u=u, s=s, vt=v.T)
