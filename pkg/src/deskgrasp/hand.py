"""Hand configuration record shared by the world, priors, and planner."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRASP_TYPES = ("basic", "wide", "pinch")


@dataclass
class HandConfig:
    """Palm position x (m), orientation quaternion q (unit, scalar first),
    and discrete grasp type g."""

    x: np.ndarray
    q: np.ndarray
    g: str

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64).reshape(3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        if self.g not in GRASP_TYPES:
            raise ValueError(f"unknown grasp type {self.g!r}, expected one of {GRASP_TYPES}")

    @property
    def g_index(self) -> int:
        return GRASP_TYPES.index(self.g)

    def to_dict(self) -> dict:
        return {"x": [float(v) for v in self.x], "q": [float(v) for v in self.q], "g": self.g}

    @staticmethod
    def from_dict(d: dict) -> "HandConfig":
        return HandConfig(np.array(d["x"], dtype=np.float64), np.array(d["q"], dtype=np.float64), str(d["g"]))
