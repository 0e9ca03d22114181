import numpy as np
import pytest

from ckmerge import Checkpoint

LAYERS = ("attn.weight", "embed.weight", "mlp.weight", "norm.weight")


def random_checkpoint(seed, layers=LAYERS, shape=(4, 6), dtype=np.float32, scale=1.0):
    rng = np.random.default_rng(seed)
    tensors = {
        name: (scale * rng.standard_normal(shape)).astype(dtype) for name in layers
    }
    return Checkpoint(tensors=tensors)


def perturbed(ckpt, seed, scale=0.1, dtype=np.float32):
    rng = np.random.default_rng(seed)
    tensors = {
        name: (arr.astype(np.float64) + scale * rng.standard_normal(arr.shape)).astype(dtype)
        for name, arr in ckpt.tensors.items()
    }
    return Checkpoint(tensors=tensors)


@pytest.fixture
def base_ckpt():
    return random_checkpoint(seed=101)


@pytest.fixture
def tuned_ckpt(base_ckpt):
    return perturbed(base_ckpt, seed=202)
