"""Ball trajectory prediction with a trajectory variational auto-encoder and a physics baseline.

Modules: ``trajkit`` (data model, resampling, corruption, JSONL I/O), ``ballsim``
(flight simulator and polynomial-fit baseline), ``neuralkit`` (MLP with manual
gradients, Adam, parameter files), ``tvae`` (model, objective, training,
inference), ``evalkit`` (error curves, ablation, latency) and ``cli``.
"""

__version__ = "0.1.0"
