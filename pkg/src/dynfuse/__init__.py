"""dynfuse: two-stream convolution with dynamic kernel-space fusion.

The package provides four interchangeable feature-extraction layer
families for paired RGB / thermal streams, a Mult-Adds cost model, a
small trainable classification network, and a synthetic tracking
harness for exercising the whole stack at desk scale.
"""

__version__ = "0.1.0"

from .tensor_ops import ShapeError

__all__ = ["ShapeError", "__version__"]
