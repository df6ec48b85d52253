"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from rcorl.exceptions import ContractError, InputShapeError


def check_dataset(dataset, discrete: bool | None = None, min_size: int = 1):
    from rcorl.datasets import OfflineDataset

    if not isinstance(dataset, OfflineDataset):
        raise ContractError(f"expected an OfflineDataset, got {type(dataset).__name__}")
    if len(dataset) < min_size:
        raise ContractError(f"dataset holds {len(dataset)} transitions, need at least {min_size}")
    if discrete is not None and dataset.discrete != discrete:
        kind = "discrete" if discrete else "continuous"
        raise ContractError(f"this estimator needs a {kind}-action dataset")
    return dataset


def check_observations(X, dim: int) -> tuple[np.ndarray, bool]:
    """Return ``(X as a 2-D float array, whether a single row was given)``."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != dim:
        raise InputShapeError(f"expected observations of width {dim}, got shape {np.shape(X)}")
    if not np.all(np.isfinite(X)):
        raise ContractError("observations must be finite")
    return X, single
