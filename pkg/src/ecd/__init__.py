"""Environmental change detection against an uncurated reference database:
top-K retrieval, sliding-window patch alignment, cross-attention aggregation,
and pixel-wise change mask prediction."""

from .kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND"]
__version__ = "0.1.0"
