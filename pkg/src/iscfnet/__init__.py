"""Efficient-attention U-shaped segmentation network with inter-scale fusion.

The package layers up from a minimal autodiff engine (`autodiff`), through
attention and patch/block primitives (`attention`, `blocks`), the fusion
skip module (`iscf`), the assembled network (`model`), and the training and
evaluation pipeline (`pipeline`), to data handling (`data_io`), benchmarks
(`bench`), verification (`verify`), and the CLI (`cli`).
"""

__version__ = "0.1.0"
