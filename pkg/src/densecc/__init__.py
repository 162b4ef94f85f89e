"""Relation extraction at the entity-pair level with criss-cross attention reasoning.

Imports are deferred so the command-line entry point can configure
threading environment variables before numpy loads.
"""

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "RelationExtractor"]

__version__ = "0.1.0"

_LOCATIONS = {
    "Tensor": "densecc.autodiff",
    "backward": "densecc.autodiff",
    "grad_check": "densecc.autodiff",
    "no_grad": "densecc.autodiff",
    "RelationExtractor": "densecc.model",
}


def __getattr__(name):
    if name in _LOCATIONS:
        import importlib

        return getattr(importlib.import_module(_LOCATIONS[name]), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
