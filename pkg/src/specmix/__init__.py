"""specmix: hyperspectral pixel unmixing with a spatial-attention Dirichlet VAE."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401
