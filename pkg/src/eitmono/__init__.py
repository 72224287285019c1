"""Monotonicity-based reconstruction of indefinite inclusions in 2D EIT.

Modules: ``geometry`` (pixel grids, shapes, phantoms), ``mesh`` (graded disk
meshes), ``forward`` (CEM finite elements, derivative tensors),
``measurement`` (current patterns, noise, file format), ``monotonicity``
(test matrices), ``peeling`` (the reconstruction loop), ``render`` (rasters)
and ``cli`` (command-line driver).
"""
__version__ = "0.1.0"

from .errors import ConfigError, EitMonoError, FormatError, NumericalError, ParameterError

__all__ = ["__version__", "ConfigError", "EitMonoError", "FormatError", "NumericalError",
           "ParameterError"]
