"""Speech enhancement toolkit for pathological and neurotypical speech.

Modules: :mod:`signal_core` (STFT, compression), :mod:`dataio` (manifests,
mixtures, fold plans), :mod:`models` (MM, CR), :mod:`diffusion` (SGMSE+, SB),
:mod:`metrics`, :mod:`training` and :mod:`cli`.
"""

__version__ = "0.1.0"
