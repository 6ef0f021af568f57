"""Wavelet-feature ECoG decoders trained on synthetic motor-imagery data.

The hand-crafted pipeline (fixed complex Morlet filterbank, modulus, 0.1 s
average pooling, batch norm) is compared with end-to-end variants whose
temporal kernels are trained jointly with an MLP or CNN+LSTM decoder.
"""
__version__ = "0.1.0"
