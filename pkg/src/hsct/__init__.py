"""Hierarchical synthesis CNN reconstruction for sparse-view and phase tomography.

Modules: dataio (HSCT tensor files), phantom, tomo (Radon / FBP), phase
(propagation and single-material retrieval), bands, nncore (numpy CNN),
hsnet (two-stage network), metrics, tvbase (TV baseline), pipeline and cli.
"""

__version__ = "0.1.0"
