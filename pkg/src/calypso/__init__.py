"""Differentiable metapopulation SIRS engine.

Submodules:

- ``core``       graph, parameters, aggregation, metrics
- ``autodiff``   reverse-mode tape used to train through the simulator
- ``sim``        the weekly SIRS metapopulation simulator
- ``calib``      neural parameter calibration trained end to end
- ``adapter``    residual recurrent corrector for forecasts
- ``eakf``       ensemble adjustment Kalman filter baseline
- ``analysis``   counterfactual, allocation, and sensitivity studies
- ``synth``      synthetic data generator with known ground truth
- ``io``         CSV/JSON readers and writers
- ``cli``        batch command-line front end
"""

from . import adapter, analysis, autodiff, calib, core, eakf, errors, io, seeding, sim, synth

__all__ = [
    "adapter",
    "analysis",
    "autodiff",
    "calib",
    "core",
    "eakf",
    "errors",
    "io",
    "seeding",
    "sim",
    "synth",
]

__version__ = "0.1.0"
