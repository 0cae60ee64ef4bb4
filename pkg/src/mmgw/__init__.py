"""Multi-marginal Gromov-Wasserstein transport on discrete mm-spaces."""

from ._accel import HAVE_COMPILED

__version__ = "0.1.0"

__all__ = ["HAVE_COMPILED", "__version__"]
