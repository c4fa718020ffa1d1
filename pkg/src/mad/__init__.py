"""Multi-alignment MEG-to-text decoding at desk scale.

Submodules: ``tensors`` (autodiff), ``signal`` (preprocessing), ``brain``
(Brain Module), ``seq2seq`` (toy speech model), ``align`` (losses),
``metrics``, ``data`` (synthetic benchmark) and ``harness`` (training,
evaluation, ablations).
"""
__version__ = "0.1.0"
