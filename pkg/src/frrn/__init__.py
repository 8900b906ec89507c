"""Two-stream full-resolution segmentation networks on a numpy autodiff
engine: network builders, bootstrapped cross-entropy, checkpointed backprop,
gamma/translation augmentation, IoU and trimap evaluation, and a synthetic
desk-scale dataset.

Heavy imports are deferred so the CLI can configure BLAS threading first.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("autodiff", "layers", "network", "loss", "augmentation",
               "evaluation", "data", "checkpoint", "trainer", "gradcheck",
               "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module("." + name, __name__)
    raise AttributeError(f"module 'frrn' has no attribute '{name}'")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
