"""Leaky integrate-and-fire neurons with hard reset."""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .tensor_core import DenseTensor, Shape, SpikeTensor


@dataclass(frozen=True)
class LifParams:
    """
    Membrane decay factor and firing threshold.

    Parameters:
    - tau (float): decay factor, strictly between 0 and 1.
    - v_th (float): firing threshold, positive.
    """

    tau: float = 0.5
    v_th: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise InvalidArgumentError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.v_th > 0.0:
            raise InvalidArgumentError(f"v_th must be positive, got {self.v_th}")


class LifState:
    """Membrane potentials of one neuron population, updated in place by each step."""

    def __init__(self, params: LifParams, shape: Union[Shape, Tuple[int, ...]], membrane=None):
        self.params = params
        dims = shape.dims if isinstance(shape, Shape) else Shape(tuple(shape)).dims
        if membrane is None:
            self.membrane = np.zeros(dims, dtype=np.float32)
        else:
            initial = np.array(membrane, dtype=np.float32)
            if initial.shape != dims:
                raise ShapeError(f"initial membrane {initial.shape} does not match {dims}")
            if not np.all(np.isfinite(initial)):
                raise InvalidArgumentError("initial membrane must be finite")
            self.membrane = initial
        self._tau = np.float32(params.tau)
        self._v_th = np.float32(params.v_th)

    @property
    def potential(self) -> DenseTensor:
        return DenseTensor(self.membrane)

    def step_array(self, current: np.ndarray) -> np.ndarray:
        """Raw kernel of lif_step on a float32 array; returns uint8 spikes."""
        if current.shape != self.membrane.shape:
            raise ShapeError(f"current {current.shape} does not match membrane {self.membrane.shape}")
        membrane = self.membrane
        np.multiply(membrane, self._tau, out=membrane)
        np.add(membrane, current.astype(np.float32, copy=False), out=membrane)
        # H(x) = 1 for x >= 0: a membrane exactly at threshold fires
        fired = membrane >= self._v_th
        membrane[fired] = 0.0
        return fired.astype(np.uint8)


def lif_step(state: LifState, current: DenseTensor) -> SpikeTensor:
    """
    One LIF update: integrate with leak, fire at or above threshold, hard reset.

    The state is mutated in place and the emitted spikes are returned.
    """
    return SpikeTensor(state.step_array(current.data), copy=False)


def lif_sequence_array(params: LifParams, currents: np.ndarray, state: Optional[LifState] = None) -> np.ndarray:
    """Run a fresh (or given) population over the leading time axis of a raw current array."""
    if currents.ndim < 1 or currents.shape[0] == 0:
        raise InvalidArgumentError("lif_sequence needs at least one timestep")
    if state is None:
        state = LifState(params, currents.shape[1:] if currents.ndim > 1 else (1,))
    steps = currents if currents.ndim > 1 else currents.reshape(-1, 1)
    spikes = np.empty(steps.shape, dtype=np.uint8)
    for t in range(steps.shape[0]):
        spikes[t] = state.step_array(steps[t])
    return spikes.reshape(currents.shape)


def lif_sequence(params: LifParams, currents: DenseTensor) -> SpikeTensor:
    """Spike trains [T, ...] of a population that starts at zero membrane."""
    return SpikeTensor(lif_sequence_array(params, currents.data), copy=False)
