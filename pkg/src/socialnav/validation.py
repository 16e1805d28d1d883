"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .env import N_ACTIONS, N_CHANNELS, EgoObservation

ROW_SUM_TOL = 1e-6


def check_windows(X, view_size: int) -> np.ndarray:
    """Coerce observations to an ``(n, V, V)`` int64 array of channel codes.

    Accepts a single :class:`EgoObservation`, a sequence of them, or an
    integer array of shape ``(V, V)`` / ``(n, V, V)``.
    """
    if isinstance(X, EgoObservation):
        X = X.window[None]
    elif isinstance(X, (list, tuple)) and X and isinstance(X[0], EgoObservation):
        X = np.stack([o.window for o in X])
    arr = np.asarray(X)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (view_size, view_size):
        raise ValueError(f"expected windows of shape (n, {view_size}, {view_size}), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"windows must hold integer channel codes, got {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= N_CHANNELS):
        raise ValueError(f"channel codes must lie in [0, {N_CHANNELS})")
    return arr.astype(np.int64, copy=False)


def check_actions(a) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(a))
    if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("actions must be a 1-D integer array")
    if arr.size and (arr.min() < 0 or arr.max() >= N_ACTIONS):
        raise ValueError(f"action codes must lie in [0, {N_ACTIONS})")
    return arr.astype(np.int64, copy=False)


def check_beliefs(B, n_factors: int, n_values: int, tol: float = 1e-4) -> np.ndarray:
    """Validate a batch of beliefs ``(n, N, K)`` (flattened ``(n, N*K)`` is
    reshaped). Rows must be finite, non-negative and sum to one."""
    arr = np.asarray(B, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == n_factors * n_values:
        arr = arr.reshape(-1, n_factors, n_values)
    elif arr.ndim == 2 and arr.shape == (n_factors, n_values):
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (n_factors, n_values):
        raise ValueError(f"expected beliefs of shape (n, {n_factors}, {n_values}), got {arr.shape}")
    if not np.isfinite(arr).all() or (arr < 0).any():
        raise ValueError("beliefs must be finite and non-negative")
    if np.abs(arr.sum(-1) - 1.0).max(initial=0.0) > tol:
        raise ValueError("belief rows must sum to one")
    return arr


def is_row_stochastic(B, tol: float = ROW_SUM_TOL) -> bool:
    arr = np.asarray(B, dtype=np.float64)
    return bool(np.isfinite(arr).all() and (arr >= 0).all() and np.abs(arr.sum(-1) - 1.0).max() <= tol)
