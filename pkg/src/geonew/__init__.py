"""Geo-NeW: geometry-conditioned learned Whitney-form solvers.

Modules, bottom to top: :mod:`linalg`, :mod:`mesh`, :mod:`feec`,
:mod:`geofeat`, :mod:`autodiff`, :mod:`nn`, :mod:`reduced`, :mod:`flux`,
:mod:`solver`, :mod:`model`, :mod:`data`, :mod:`train`, :mod:`cli`.
"""

__version__ = "0.1.0"
