"""Moderately interacting particle simulation of shattering reaction-diffusion systems.

Submodules: ``material`` (species tables), ``kernels`` (scaled kernels and
empirical convolutions), ``particles`` (the microscopic system), ``pde``
(the macroscopic solver), ``observables`` and ``harness``.
"""

__version__ = "0.1.0"
