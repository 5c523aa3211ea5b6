"""Desk-scale streaming latent-video generation testbed.

Library layout:

- ``autograd``: float64 tensors with tape-based reverse-mode differentiation
  and an explicit gradient-severing ``detach``.
- ``attention``: rotary embedding, sink+window KV cache, cached causal attention.
- ``generator``: chunked few-step denoiser over latent frames.
- ``fusion``: frozen 3D-feature extractor and zero-conv fusion into text tokens.
- ``losses``: forward diffusion, distribution-matching gradient, feature-cosine
  loss, weighted totals.
- ``training``: masked conditional training loop, detach-wall reporting, drift
  experiment.
- ``streaming``: alternating long/short-context infinite rollout driver.
- ``cli``: the ``ew`` command (train / rollout / verify / bench / config).
"""

from .autograd import Tensor, Tape, no_grad, record  # noqa: F401

__version__ = "0.1.0"
