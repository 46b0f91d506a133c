"""Deterministic federated-learning simulator.

Subpackages: ``numkit`` (streams, samplers, oracles), ``models``
(differentiable classifiers), ``datakit`` (datasets and partitioning),
``fedcore`` (federated strategies), ``simcli`` (experiments and CLI),
``kernels`` (compiled/NumPy hot paths).
"""

__version__ = "0.1.0"
