"""Desk-scale laboratory for tensorized Fourier neural operators.

Generates transient porous-flow training data with a reference finite
volume solver, trains Fourier neural operators with tensor-train spectral
weights, an operator power, and a Sobolev-H1 + reconstruction loss, and
evaluates accuracy, compression, speedup, and loss-landscape geometry.
"""

__version__ = "0.1.0"
