"""Learnable Gaussian uncertainty matching over correlation volumes.

Library layout (one module per subsystem):

- tensor: array validation, primitives, bit-exact .lgut serialization
- autodiff: reverse-mode tape, parameters, Adam, finite-difference oracle
- geometry: SE(3), pinhole reprojection, synthetic planar scenes
- correlation: volumes, 4-level pyramid, materialized/on-the-fly lookups
- gaussian: learnable 2D Gaussian uncertainty masks
- deformable: multi-scale offsets, variance gate, deformable lookup
- temporal: KAN-bias convolutional GRU update operator
- model: end-to-end matching pipeline
- training: losses, toy training loop, EPE evaluation
- config / cli: run configuration and the lguflow command

Submodules import lazily so the CLI can pin thread counts before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor", "autodiff", "geometry", "correlation", "gaussian", "deformable",
    "temporal", "model", "training", "config", "cli", "gradcheck",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
