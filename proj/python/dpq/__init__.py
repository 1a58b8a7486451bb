"""Two-level INT4/FP8 post-training weight quantization toolkit.

The heavy lifting lives in the `_dpq` extension module; this package
re-exports its surface.
"""

from ._dpq import (  # noqa: F401
    DpqIoError,
    DpqNumericalError,
    DpqValidationError,
    QuantizedLayer,
    __version__,
    activation_scale,
    enumerate_grid,
    evaluate,
    hessian_from_activations,
    pack_nibbles,
    quantize,
    read_container,
    round_to_bf16,
    round_to_fp8,
    unpack_nibbles,
    write_container,
)

__all__ = [
    "DpqIoError",
    "DpqNumericalError",
    "DpqValidationError",
    "QuantizedLayer",
    "__version__",
    "activation_scale",
    "enumerate_grid",
    "evaluate",
    "hessian_from_activations",
    "pack_nibbles",
    "quantize",
    "read_container",
    "round_to_bf16",
    "round_to_fp8",
    "unpack_nibbles",
    "write_container",
]
