"""Central-difference gradient checks for the hand-written backprop."""

import logging
from dataclasses import dataclass, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from .encoders import EncoderParams, TrainConfig, crl_objective, feature_matrix
from .errors import ValidationError
from .objectives import BatchSample

logger = logging.getLogger(__name__)

MIN_STEP = 1e-7
MAX_STEP = 1e-3
SUBSET_COORDS = 256         # coordinates checked when the vector is large
FULL_CHECK_LIMIT = 2048     # vectors up to this size are checked exhaustively
ERROR_FLOOR = 1e-12         # denominator floor for the relative error


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    analytic_norm: float
    numeric_norm: float
    num_coords: int

    def to_dict(self) -> dict:
        return asdict(self)


def central_differences(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float,
                        coords: np.ndarray) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for each i in coords."""
    x = np.array(x, dtype=np.float64)
    numeric = np.zeros(len(coords))
    for k, i in enumerate(coords):
        saved = x[i]
        x[i] = saved + h
        upper = fn(x)
        x[i] = saved - h
        lower = fn(x)
        x[i] = saved
        numeric[k] = (upper - lower) / (2.0 * h)
    return numeric


def gradient_check(fn: Callable[[np.ndarray], float], analytic: np.ndarray, x: np.ndarray,
                   h: float = 1e-5, coords: Optional[np.ndarray] = None) -> GradCheckReport:
    """Compare an analytic gradient against central differences.

    The relative error is max|a - n| / max(max|a|, max|n|, floor) over the checked coordinates.
    """
    if not MIN_STEP <= h <= MAX_STEP:
        raise ValidationError(f"step h={h} outside [{MIN_STEP}, {MAX_STEP}]")
    x = np.asarray(x, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    coords = np.arange(x.size) if coords is None else np.asarray(coords)
    numeric = central_differences(fn, x, h, coords)
    picked = analytic[coords]
    abs_error = float(np.abs(picked - numeric).max(initial=0.0))
    scale = max(float(np.abs(picked).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), ERROR_FLOOR)
    return GradCheckReport(abs_error / scale, abs_error, float(np.linalg.norm(picked)),
                           float(np.linalg.norm(numeric)), len(coords))


def finite_diff_check(params: EncoderParams, batch: Sequence[BatchSample], h: float = 1e-5,
                      config: Optional[TrainConfig] = None, seed: int = 0) -> GradCheckReport:
    """Check the combined CRL gradient wrt every encoder parameter.

    Vectors longer than FULL_CHECK_LIMIT are checked on a seeded random subset.
    The log-temperature coordinate is always checked.
    """
    config = config or TrainConfig()
    features = feature_matrix(batch)
    flat = params.flatten()
    _, analytic = crl_objective(params, batch, features, config)

    def objective(x: np.ndarray) -> float:
        return crl_objective(params.unflatten(x), batch, features, config)[0].value

    coords = None
    if flat.size > FULL_CHECK_LIMIT:
        rng = np.random.default_rng(seed)
        subset = rng.choice(flat.size - 1, size=SUBSET_COORDS, replace=False)
        coords = np.sort(np.append(subset, flat.size - 1))
    report = gradient_check(objective, analytic, flat, h, coords)
    logger.debug("gradient check: rel=%.3e over %d coords", report.max_rel_error, report.num_coords)
    return report
