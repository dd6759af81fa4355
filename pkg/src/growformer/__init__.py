"""Grow a trained transformer into a wider/deeper one and keep training it.

Modules: ``numerics`` (kernels, seeded RNG), ``transformer`` (encoder/decoder
runtime with hand-written backward), ``expansion`` (FPI, AKI, depth stacking,
baselines), ``training`` (two-stage pre-training), ``checkpoint`` (``.grwf``
files) and ``cli``.
"""

__version__ = "0.1.0"
