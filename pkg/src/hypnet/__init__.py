"""Cross-spectral patch descriptors with hypernetwork-modulated convolutions.

Submodules: ``tensor`` and ``functional`` (autograd and layers), ``model``,
``loss``, ``train``, ``evaluate``, ``extract`` (patch extraction and
splits), ``corpus``, ``weights_io``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
