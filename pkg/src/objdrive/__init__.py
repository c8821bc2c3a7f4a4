"""Object-centric driving policies on a numpy autodiff core."""

__version__ = "0.1.0"
