"""L1 recovery of sparse codes from dense codes.

Solves, per line,

    min over a of 0.5 * ||D a - x||^2 + lam * ||a||_1

with iterative soft-thresholding (ISTA) as the reference solver, plus a
fixed-depth unrolled variant whose parameters (W, S, theta) start at the
ISTA-consistent values W = step * D', S = I - step * D'D, theta =
lam * step, so the untrained unrolled network reproduces ISTA step for
step and can be verified against it before any training moves it.
"""

from dataclasses import dataclass

import numpy as np

from .encoding import SparseCode
from .errors import ConfigError, DimensionError, NumericError


@dataclass(frozen=True)
class RecoveryConfig:
    """Solver settings. step="auto" uses 1 / ||D'D||_2 from power iteration
    (with a 1% shrink so the estimate never exceeds the true bound)."""

    lam: float = 0.39
    max_iters: int = 2000
    tol: float = 1e-8
    step: object = "auto"
    check_descent: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be positive")
        if self.tol < 0:
            raise ConfigError("tol must be >= 0")
        if self.step != "auto" and not (isinstance(self.step, (int, float)) and self.step > 0):
            raise ConfigError(f"step must be positive or 'auto', got {self.step!r}")


def soft_threshold(v, t):
    """Elementwise shrinkage sign(v) * max(|v| - t, 0)."""
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def gram_spectral_norm(D, iters=50):
    """Largest eigenvalue of D'D by power iteration from a fixed start."""
    E = D.entries
    v = np.full(D.n, 1.0 / np.sqrt(D.n))
    lam = 0.0
    for _ in range(iters):
        w = E.T @ (E @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        lam = float(v @ (E.T @ (E @ v)))
    return lam


def resolve_step(D, cfg):
    if cfg.step != "auto":
        return float(cfg.step)
    lip = gram_spectral_norm(D)
    if lip <= 0.0:
        raise ConfigError("sensing matrix has zero spectral norm")
    return 1.0 / (lip * 1.01)


def _objective(E, A, X, lam):
    R = E @ A - X
    return 0.5 * np.sum(R * R, axis=0) + lam * np.sum(np.abs(A), axis=0)


def ista_recover_batch(X, D, cfg):
    """Run ISTA on each column of the m x K matrix X independently.

    Columns are frozen as soon as their relative update
    ||a+ - a||_inf / (1 + ||a||_inf) drops below cfg.tol, so a column's
    trajectory does not depend on what else is in the batch.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != D.m:
        raise DimensionError(f"expected ({D.m}, K) input, got {X.shape}")
    if not np.isfinite(X).all():
        raise NumericError("non-finite dense code")
    step = resolve_step(D, cfg)
    thr = cfg.lam * step
    E = D.entries
    A = np.zeros((D.n, X.shape[1]))
    active = np.arange(X.shape[1])
    Xa = X
    prev_obj = _objective(E, A, Xa, cfg.lam) if cfg.check_descent else None
    for _ in range(cfg.max_iters):
        Aa = A[:, active]
        grad = E.T @ (E @ Aa - Xa)
        Anew = soft_threshold(Aa - step * grad, thr)
        if cfg.check_descent:
            obj = _objective(E, Anew, Xa, cfg.lam)
            slack = 1e-9 * (1.0 + np.abs(prev_obj))
            if (obj > prev_obj + slack).any():
                raise ConfigError("objective increased; step size too large")
        rel = np.max(np.abs(Anew - Aa), axis=0) / (1.0 + np.max(np.abs(Aa), axis=0))
        A[:, active] = Anew
        keep = rel >= cfg.tol
        if not keep.any():
            break
        if not keep.all():
            active = active[keep]
            Xa = Xa[:, keep]
            if cfg.check_descent:
                prev_obj = obj[keep]
        elif cfg.check_descent:
            prev_obj = obj
    return A


def ista_recover(x, D, cfg):
    """ISTA solution for a single length-m dense code."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != D.m:
        raise DimensionError(f"expected length-{D.m} code, got {x.shape[0]}")
    return ista_recover_batch(x[:, None], D, cfg)[:, 0]


@dataclass(frozen=True)
class ListaParams:
    """Unrolled-solver parameters: a(t+1) = soft(W x + S a(t), theta(t)).

    theta may be a scalar shared by all T iterations, a (T,) vector of
    per-iteration scalars, or a (T, n) array of per-iteration per-entry
    thresholds.
    """

    W: np.ndarray
    S: np.ndarray
    theta: object
    T: int

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("unroll depth T must be >= 1")
        n, m = self.W.shape
        if self.S.shape != (n, n):
            raise DimensionError(f"S must be ({n}, {n}), got {self.S.shape}")

    def threshold_at(self, t):
        th = np.asarray(self.theta, dtype=np.float64)
        if th.ndim == 0:
            return th
        return th[t]

    @classmethod
    def ista_init(cls, D, cfg, T, per_iteration=False):
        """Parameters that make the T-step unroll equal T ISTA iterations."""
        step = resolve_step(D, cfg)
        W = step * D.entries.T
        S = np.eye(D.n) - step * (D.entries.T @ D.entries)
        theta = cfg.lam * step
        if per_iteration:
            theta = np.full(T, theta)
        return cls(W=W, S=S, theta=theta, T=int(T))


def lista_forward_batch(X, params, keep_trace=False):
    """T-step unroll on each column of the m x K matrix X from zero init.

    With keep_trace=True also returns the pre-threshold activations of
    every step, for reverse-mode differentiation through the unroll.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != params.W.shape[1]:
        raise DimensionError(f"expected ({params.W.shape[1]}, K) input, got {X.shape}")
    drive = params.W @ X
    A = np.zeros((params.W.shape[0], X.shape[1]))
    trace = []
    for t in range(params.T):
        pre = drive + params.S @ A
        if keep_trace:
            trace.append(pre)
        A = soft_threshold(pre, params.threshold_at(t))
    return (A, trace) if keep_trace else A


def lista_forward(x, params):
    """Unrolled recovery of a single length-m dense code."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return lista_forward_batch(x[:, None], params)[:, 0]


def recover_all_lines(x, D, cfg, lista_params=None):
    """Recover every line of a DenseCode independently.

    Uses ISTA unless lista_params is given. Lines that merely fail to
    converge within the budget keep their last iterate and do not affect
    other lines.
    """
    if D.m != x.per_line.shape[1]:
        raise DimensionError("dense code length does not match sensing matrix")
    X = x.per_line.T
    if lista_params is None:
        A = ista_recover_batch(X, D, cfg)
    else:
        A = lista_forward_batch(X, lista_params)
    return SparseCode(per_line=A.T, geometry=x.geometry)
