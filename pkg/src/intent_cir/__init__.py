"""Noise-robust composed image retrieval on synthetic triplets.

Submodules: ``fourier`` (amplitude-mix counterfactuals and baseline
perturbations), ``data`` (synthetic triplets with injected noise), ``composer``
(toy attention composer with manual gradients), ``objectives`` (consistency,
robust contrastive and loyalty losses), ``training``, ``evaluation``,
``gradcheck`` and ``cli``.
"""

__version__ = "0.1.0"
