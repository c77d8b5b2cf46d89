"""Progressive image codec with residual vector quantization."""

from .bitstream import BitstreamHeader, bpp, deserialize, packetize, reassemble, serialize
from .errors import (AutogradError, FormatError, NumericalError, PacketGapError, PgicError, ShapeError,
                     TruncatedError)
from .model import Model, ModelConfig, load_model, save_model
from .pipeline import decode_stream, encode_image
from .rvq import Codebook, RVQStack, rvq_decode, rvq_encode
from .tensor import Tensor, no_grad

__all__ = [
    "AutogradError", "BitstreamHeader", "Codebook", "FormatError", "Model", "ModelConfig", "NumericalError",
    "PacketGapError", "PgicError", "RVQStack", "ShapeError", "Tensor", "TruncatedError", "bpp",
    "decode_stream", "deserialize", "encode_image", "load_model", "no_grad", "packetize", "reassemble",
    "rvq_decode", "rvq_encode", "save_model", "serialize",
]
