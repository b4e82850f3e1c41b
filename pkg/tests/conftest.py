from __future__ import annotations

import numpy as np
import pytest

from memmixer import set_precision
from memmixer.model import ModelConfig, build_model
from memmixer.mru import ClipFeatures


@pytest.fixture(autouse=True)
def _reset_precision():
    set_precision(32)
    yield
    set_precision(32)


def toy_config(variant="mru_bid", scoring="both", **overrides) -> ModelConfig:
    base = dict(channels=8, s_audio=2, s_video=2, t_max=4, heads=2,
                variant=variant, scoring=scoring)
    base.update(overrides)
    return ModelConfig(**base)


def make_clips(rng, t, config):
    return [
        ClipFeatures.from_arrays(
            rng.standard_normal((config.s_audio, config.channels)),
            rng.standard_normal((config.s_video, config.channels)))
        for _ in range(t)
    ]


ZERO_KEY_PIECES = (
    ".w2", ".b2", ".w4", ".b4",            # second mixer layers
    ".w_down", ".b_down", ".w_up", ".b_up",  # bottlenecks
    "pe",                                   # every position table
    "cls_token", "initial_memory",
    "head.w",
)


def zero_model(params):
    """Zero second-layer mixer weights, bottlenecks, tokens, position tables
    and head weights; only the head bias can reach the output."""
    for name, p in params.named_parameters():
        if any(piece in name for piece in ZERO_KEY_PIECES):
            p.value.data[...] = 0.0
    return params


def build_toy(variant="mru_bid", scoring="both", seed=42, **overrides):
    return build_model(toy_config(variant, scoring, **overrides), seed=seed)


def fd_gradient(loss_fn, param, eps=1e-6):
    """Independent central-difference oracle over one parameter."""
    flat = param.value.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = loss_fn().item()
        flat[i] = saved - eps
        fm = loss_fn().item()
        flat[i] = saved
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(param.value.data.shape)


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
