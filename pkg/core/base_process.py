"""
Base Process Interface - every simulated diffusion implements this
"""
from abc import ABC, abstractmethod

import numpy as np


class BaseProcess(ABC):
    """Abstract base class for driftless diffusions dX = sigma(t, X) dW"""

    @abstractmethod
    def sigma(self, t: float, x: np.ndarray) -> np.ndarray:
        """
        Absolute diffusion coefficient

        Args:
            t: Current time
            x: Current states (vector)

        Returns:
            np.ndarray: sigma(t, x) in state units per sqrt(time)
        """
        pass

    @abstractmethod
    def get_info(self) -> dict:
        """
        Return process metadata

        Returns:
            dict: name, parameters, convention
        """
        pass

    def euler_step(self, t: float, x: np.ndarray, dt: float, z: np.ndarray) -> np.ndarray:
        return x + self.sigma(t, x) * np.sqrt(dt) * z
