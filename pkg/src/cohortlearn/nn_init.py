"""Deterministic parameter initialization from numpy generators.

Torch modules are initialized by overwriting every parameter from a named
numpy stream (sorted parameter order), so results never depend on torch's
global RNG or on construction order of unrelated modules.
"""

import numpy as np
import torch


def init_module(module: torch.nn.Module, rng: np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.ndim >= 2:
                fan_in = param.shape[-1]
                if fan_in == 0 or param.numel() == 0:
                    continue
                bound = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.as_tensor(values, dtype=param.dtype))
            else:
                param.zero_()


def zero_module(module: torch.nn.Module) -> None:
    for param in module.parameters():
        with torch.no_grad():
            param.zero_()
