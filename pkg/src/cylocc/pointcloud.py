from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class PointCloud:
    """N points: ego-frame Cartesian positions plus C feature channels.

    ``features`` is a Tensor when it participates in the gradient tape and a
    plain array for raw sensor data.
    """

    positions: np.ndarray
    features: Tensor | np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not isinstance(self.features, Tensor):
            self.features = np.asarray(self.features, dtype=np.float64)
        n_feat = self.features.shape[0]
        if n_feat != len(self.positions):
            raise ValueError(f"PointCloud: {len(self.positions)} positions but {n_feat} feature rows")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("PointCloud: non-finite positions")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def channels(self) -> int:
        return self.features.shape[1] if len(self.features.shape) > 1 else 0

    def feature_tensor(self) -> Tensor:
        return self.features if isinstance(self.features, Tensor) else Tensor(np.asarray(self.features).reshape(len(self), -1))

    def feature_array(self) -> np.ndarray:
        return self.features.data if isinstance(self.features, Tensor) else np.asarray(self.features)
