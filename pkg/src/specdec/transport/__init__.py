from .netsim import BUILTIN_PROFILES, Channel, EventLoop, NetworkProfile
from .session import SessionMetrics, run_session
from .wire import (
    MSG_ACK,
    MSG_BOOTSTRAP,
    MSG_DRAFT,
    MSG_VERIFY,
    QuantizedTensor,
    decode_bootstrap,
    decode_draft,
    decode_verify,
    dequantize8,
    encode_ack,
    encode_bootstrap,
    encode_draft,
    encode_verify,
    expected_verify_elements,
    quantize8,
)

__all__ = [
    "BUILTIN_PROFILES",
    "Channel",
    "EventLoop",
    "NetworkProfile",
    "SessionMetrics",
    "run_session",
    "MSG_ACK",
    "MSG_BOOTSTRAP",
    "MSG_DRAFT",
    "MSG_VERIFY",
    "QuantizedTensor",
    "decode_bootstrap",
    "decode_draft",
    "decode_verify",
    "dequantize8",
    "encode_ack",
    "encode_bootstrap",
    "encode_draft",
    "encode_verify",
    "expected_verify_elements",
    "quantize8",
]
