"""Parameter vectors on the transformed (estimation) scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODEL_GAUSSIAN = "gaussian"
MODEL_BROWN_RESNICK = "brown-resnick"
MODELS = (MODEL_GAUSSIAN, MODEL_BROWN_RESNICK)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """q-dimensional parameter on the estimation scale, with model tag.

    For the Gaussian model the coordinates are (log tau^2, log phi^2); for
    Brown-Resnick they are (log lambda, log{nu/(2-nu)}).
    """

    values: np.ndarray
    model: str

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter values must be finite")
        if self.model not in MODELS:
            raise ValueError(f"unknown model tag {self.model!r}")
        object.__setattr__(self, "values", v)

    @property
    def q(self) -> int:
        return self.values.size
