"""FM synthesizer parameter estimation workbench.

Recover the synthesizer preset that best restores a rendered audio sample:
a deterministic phase-modulation synth engine, multi-modal audio features,
a prime-dilated-convolution estimator trained on generated datasets, and
classical search baselines, all behind one CLI (``synthmatch``).
"""

__version__ = "0.1.0"
