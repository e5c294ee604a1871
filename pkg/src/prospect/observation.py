from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 64


@dataclass
class Observation:
    """One sensor snapshot.

    ``image`` is ``(H, W, 3)`` in [0, 1]; ``state`` is the normalised pose
    ``(x, y, theta/pi)``; ``gripper`` lies in (0, 1).
    """

    image: np.ndarray
    state: np.ndarray
    gripper: float

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.state = np.asarray(self.state, dtype=np.float32)
        self.gripper = float(np.float32(self.gripper))

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image scalars must lie in [0, 1]")
        if np.any(np.abs(self.state) > 1):
            raise ValueError("state coordinates must lie in [-1, 1]")
        if not 0 < self.gripper < 1:
            raise ValueError("gripper must lie in (0, 1)")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.state, other.state)
            and self.gripper == other.gripper
        )
