"""Integer-only post-training quantization kernels for transformer inference."""
from .errors import ArithmeticOverflow, CalibrationError, ContractViolation, DimensionError, FormatError
from .model import EncoderConfig, FloatEncoder, QuantizedEncoderModel, init_float_model
from .ptf import PTFParams, LayerNormAffine, calibrate_ptf, integer_layernorm, quantize_ptf
from .quantizers import QuantParams, calibrate_minmax, dequantize_uniform, quantize_uniform
from .softmax import IExpConstants, LogAttnCodes, i_exp, i_log2, log_int_softmax
from .tensor import IntTensor, ScaledInt, arithmetic_trace

__version__ = "0.1.0"
