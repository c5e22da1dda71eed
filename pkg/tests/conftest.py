import numpy as np
import pytest
import torch

torch.set_num_threads(1)


class ScriptedRng:
    """Stand-in generator that replays fixed uniform / integer draws."""

    def __init__(self, uniforms=(), integers=()):
        self.uniforms = list(uniforms)
        self.ints = list(integers)

    def uniform(self, low, high):
        return self.uniforms.pop(0)

    def integers(self, low, high=None):
        return self.ints.pop(0)


class RecordingRng:
    """Wraps a real generator and records every uniform draw with its bounds."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.draws = []

    def uniform(self, low, high):
        v = self.rng.uniform(low, high)
        self.draws.append((low, high, v))
        return v

    def integers(self, *args, **kw):
        return self.rng.integers(*args, **kw)


@pytest.fixture
def scripted():
    return ScriptedRng
