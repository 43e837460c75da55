"""Binary framing for host <-> node traffic.

Every message travels as one self-delimiting frame (all integers big-endian)::

    +-------+---------+------+---------+----------+-----------+
    | magic | version | kind | call_id | body_len | body      |
    | HCL1  | u8      | u8   | u64     | u32      | body_len  |
    +-------+---------+------+---------+----------+-----------+

Body layouts per kind:

* ApiCallRequest / ApiCallResponse: ``str function_name, u32 nargs,
  nargs * TypedValue, u32 nrefs, nrefs * (u64 buffer_id, u8 direction)``
* DeviceIdResponse: ``u32 n, n * (u32 local_index, u8 device_type, f64 throughput)``
* DataTransfer: ``u64 buffer_id, u64 offset, u64 total_len, payload...``
* DataAck: ``u64 buffer_id, u64 final_offset, u64 total_len``
* ErrorReply: ``str code, str message``
* DeviceIdRequest, Ping, Pong, Shutdown: empty

``str`` is a u32 length followed by UTF-8 bytes. A TypedValue is a u8 tag
followed by a fixed-width payload, or a u32-length-prefixed one for
``bytes`` and ``string``.
"""

from __future__ import annotations

import numbers
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Optional, Union

from .errors import (
    EncodingOverflowError,
    IncompleteFrame,
    MalformedMessageError,
    ProtocolMismatchError,
    VersionError,
    WireError,
)

MAGIC = b"HCL1"
PROTOCOL_VERSION = 1
HEADER = struct.Struct(">4sBBQI")
HEADER_SIZE = HEADER.size  # 18
MAX_BODY = 2**32 - 1
DEFAULT_CHUNK_SIZE = 1 << 20

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_F64 = struct.Struct(">d")


class Kind(IntEnum):
    API_CALL_REQUEST = 1
    API_CALL_RESPONSE = 2
    DEVICE_ID_REQUEST = 3
    DEVICE_ID_RESPONSE = 4
    DATA_TRANSFER = 5
    DATA_ACK = 6
    ERROR_REPLY = 7
    PING = 8
    PONG = 9
    SHUTDOWN = 10


# Legal response kinds for each request kind. ErrorReply may answer any of them.
RESPONSE_KINDS = {
    Kind.API_CALL_REQUEST: Kind.API_CALL_RESPONSE,
    Kind.DEVICE_ID_REQUEST: Kind.DEVICE_ID_RESPONSE,
    Kind.DATA_TRANSFER: Kind.DATA_ACK,
    Kind.PING: Kind.PONG,
}
REQUEST_KINDS = frozenset(RESPONSE_KINDS) | {Kind.SHUTDOWN}


class Direction(IntEnum):
    IN = 0
    OUT = 1
    INOUT = 2


class DeviceType(IntEnum):
    CPU = 0
    GPU = 1
    FPGA = 2

    @classmethod
    def parse(cls, name: str) -> "DeviceType":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown device type {name!r}") from None

    def __str__(self):
        return self.name.lower()


class Tag(IntEnum):
    I32 = 0
    I64 = 1
    F32 = 2
    F64 = 3
    BYTES = 4
    STRING = 5
    HANDLE = 6


_FIXED = {
    Tag.I32: struct.Struct(">i"),
    Tag.I64: struct.Struct(">q"),
    Tag.F32: struct.Struct(">f"),
    Tag.F64: _F64,
    Tag.HANDLE: _U64,
}


@dataclass(frozen=True)
class TypedValue:
    """A tagged argument value holding its canonical payload bytes."""

    tag: Tag
    payload: bytes

    def __post_init__(self):
        fixed = _FIXED.get(self.tag)
        if fixed is not None and len(self.payload) != fixed.size:
            raise ValueError(f"{self.tag.name} payload must be {fixed.size} bytes")

    @classmethod
    def i32(cls, v: int) -> "TypedValue":
        return cls(Tag.I32, _FIXED[Tag.I32].pack(v))

    @classmethod
    def i64(cls, v: int) -> "TypedValue":
        return cls(Tag.I64, _FIXED[Tag.I64].pack(v))

    @classmethod
    def f32(cls, v: float) -> "TypedValue":
        return cls(Tag.F32, _FIXED[Tag.F32].pack(v))

    @classmethod
    def f64(cls, v: float) -> "TypedValue":
        return cls(Tag.F64, _F64.pack(v))

    @classmethod
    def bytes_(cls, v: bytes) -> "TypedValue":
        return cls(Tag.BYTES, bytes(v))

    @classmethod
    def string(cls, v: str) -> "TypedValue":
        return cls(Tag.STRING, v.encode("utf-8"))

    @classmethod
    def handle(cls, v: int) -> "TypedValue":
        return cls(Tag.HANDLE, _U64.pack(v))

    @property
    def value(self):
        fixed = _FIXED.get(self.tag)
        if fixed is not None:
            return fixed.unpack(self.payload)[0]
        if self.tag == Tag.STRING:
            return self.payload.decode("utf-8")
        return self.payload

    @classmethod
    def from_python(cls, v) -> "TypedValue":
        """Default mapping for plain Python scalars (bool/int -> i64, float -> f64)."""
        if isinstance(v, TypedValue):
            return v
        if isinstance(v, numbers.Integral):
            return cls.i64(int(v))
        if isinstance(v, numbers.Real):
            return cls.f64(float(v))
        if isinstance(v, str):
            return cls.string(v)
        if isinstance(v, (bytes, bytearray, memoryview)):
            return cls.bytes_(bytes(v))
        raise TypeError(f"cannot encode {type(v).__name__} as a TypedValue")


@dataclass(frozen=True)
class ApiCallBody:
    function_name: str
    args: tuple = ()
    buffer_refs: tuple = ()  # (buffer_id, Direction) pairs

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))
        refs = tuple((int(b), Direction(d)) for b, d in self.buffer_refs)
        object.__setattr__(self, "buffer_refs", refs)
        ids = [b for b, _ in refs]
        if len(set(ids)) != len(ids):
            raise ValueError("buffer_id referenced more than once")


@dataclass(frozen=True)
class DeviceDescriptor:
    local_index: int
    device_type: DeviceType
    relative_throughput: float


@dataclass(frozen=True)
class DeviceList:
    devices: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))


@dataclass(frozen=True)
class DataPackage:
    buffer_id: int
    offset: int
    total_len: int
    payload: bytes = b""

    def __post_init__(self):
        if self.offset < 0 or self.offset + len(self.payload) > self.total_len:
            raise ValueError(
                f"chunk [{self.offset}, {self.offset + len(self.payload)}) "
                f"exceeds total_len {self.total_len}"
            )


@dataclass(frozen=True)
class DataAck:
    buffer_id: int
    final_offset: int
    total_len: int


@dataclass(frozen=True)
class ErrorBody:
    code: str
    message: str = ""


Body = Union[None, ApiCallBody, DeviceList, DataPackage, DataAck, ErrorBody]

_BODY_TYPES = {
    Kind.API_CALL_REQUEST: ApiCallBody,
    Kind.API_CALL_RESPONSE: ApiCallBody,
    Kind.DEVICE_ID_RESPONSE: DeviceList,
    Kind.DATA_TRANSFER: DataPackage,
    Kind.DATA_ACK: DataAck,
    Kind.ERROR_REPLY: ErrorBody,
}


@dataclass(frozen=True)
class Message:
    kind: Kind
    call_id: int = 0
    body: Body = None
    version: int = field(default=PROTOCOL_VERSION)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        expected = _BODY_TYPES.get(self.kind)
        if expected is None:
            if self.body is not None:
                raise ValueError(f"{self.kind.name} carries no body")
        elif not isinstance(self.body, expected):
            raise ValueError(f"{self.kind.name} needs a {expected.__name__} body")
        if not 0 <= self.call_id < 2**64:
            raise ValueError("call_id out of u64 range")

    @property
    def is_request(self) -> bool:
        return self.kind in REQUEST_KINDS

    def reply(self, kind: Kind, body: Body = None) -> "Message":
        return Message(kind, self.call_id, body)

    def error(self, code: str, message: str = "") -> "Message":
        return Message(Kind.ERROR_REPLY, self.call_id, ErrorBody(code, message))


def pack_global_size(extents) -> bytes:
    """Index-space extents (1 to 3 dims) as big-endian u64s."""
    return struct.pack(f">{len(extents)}Q", *extents)


def unpack_global_size(raw: bytes) -> tuple:
    if len(raw) % 8 or not 1 <= len(raw) // 8 <= 3:
        raise MalformedMessageError("global size must hold 1 to 3 u64 extents")
    return struct.unpack(f">{len(raw) // 8}Q", raw)


def ping(call_id=0):
    return Message(Kind.PING, call_id)


def api_call(name, args=(), buffer_refs=(), call_id=0):
    return Message(Kind.API_CALL_REQUEST, call_id, ApiCallBody(name, args, buffer_refs))


def api_response(request: Message, results=(), buffer_refs=()):
    return request.reply(
        Kind.API_CALL_RESPONSE,
        ApiCallBody(request.body.function_name, results, buffer_refs),
    )


# -- encoding -----------------------------------------------------------------

def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _typed(v: TypedValue) -> bytes:
    if v.tag in _FIXED:
        return _U8.pack(v.tag) + v.payload
    return _U8.pack(v.tag) + _U32.pack(len(v.payload)) + v.payload


def _encode_body(msg: Message) -> bytes:
    b = msg.body
    if b is None:
        return b""
    if isinstance(b, ApiCallBody):
        parts = [_str(b.function_name), _U32.pack(len(b.args))]
        parts.extend(_typed(a) for a in b.args)
        parts.append(_U32.pack(len(b.buffer_refs)))
        parts.extend(_U64.pack(bid) + _U8.pack(d) for bid, d in b.buffer_refs)
        return b"".join(parts)
    if isinstance(b, DeviceList):
        parts = [_U32.pack(len(b.devices))]
        for d in b.devices:
            parts.append(struct.pack(">IBd", d.local_index, d.device_type, d.relative_throughput))
        return b"".join(parts)
    if isinstance(b, DataPackage):
        return struct.pack(">QQQ", b.buffer_id, b.offset, b.total_len) + b.payload
    if isinstance(b, DataAck):
        return struct.pack(">QQQ", b.buffer_id, b.final_offset, b.total_len)
    if isinstance(b, ErrorBody):
        return _str(b.code) + _str(b.message)
    raise TypeError(f"unsupported body {type(b).__name__}")


def encode(msg: Message) -> bytes:
    """Encode one message as a complete frame."""
    body = _encode_body(msg)
    if len(body) > MAX_BODY:
        raise EncodingOverflowError(f"body of {len(body)} bytes exceeds the u32 length field")
    return HEADER.pack(MAGIC, msg.version, msg.kind, msg.call_id, len(body)) + body


# -- decoding -----------------------------------------------------------------

class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise MalformedMessageError("body truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def string(self):
        (n,) = self.unpack(_U32)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedMessageError(f"invalid utf-8: {exc}") from None

    def typed(self):
        (raw_tag,) = self.unpack(_U8)
        try:
            tag = Tag(raw_tag)
        except ValueError:
            raise MalformedMessageError(f"unknown value tag {raw_tag}") from None
        fixed = _FIXED.get(tag)
        if fixed is not None:
            return TypedValue(tag, self.take(fixed.size))
        (n,) = self.unpack(_U32)
        payload = self.take(n)
        if tag == Tag.STRING:
            try:
                payload.decode("utf-8")
            except UnicodeDecodeError:
                raise MalformedMessageError("string value is not utf-8") from None
        return TypedValue(tag, payload)

    def rest(self):
        out = bytes(self.buf[self.pos:])
        self.pos = len(self.buf)
        return out


def _decode_body(kind: Kind, raw) -> Body:
    r = _Reader(raw)
    try:
        if kind in (Kind.API_CALL_REQUEST, Kind.API_CALL_RESPONSE):
            name = r.string()
            (nargs,) = r.unpack(_U32)
            args = [r.typed() for _ in range(nargs)]
            (nrefs,) = r.unpack(_U32)
            refs = []
            for _ in range(nrefs):
                (bid,) = r.unpack(_U64)
                (d,) = r.unpack(_U8)
                refs.append((bid, Direction(d)))
            body = ApiCallBody(name, args, refs)
        elif kind == Kind.DEVICE_ID_RESPONSE:
            (n,) = r.unpack(_U32)
            devs = []
            for _ in range(n):
                idx, dt, thr = r.unpack(struct.Struct(">IBd"))
                devs.append(DeviceDescriptor(idx, DeviceType(dt), thr))
            body = DeviceList(devs)
        elif kind == Kind.DATA_TRANSFER:
            bid, off, total = r.unpack(struct.Struct(">QQQ"))
            body = DataPackage(bid, off, total, r.rest())
        elif kind == Kind.DATA_ACK:
            body = DataAck(*r.unpack(struct.Struct(">QQQ")))
        elif kind == Kind.ERROR_REPLY:
            body = ErrorBody(r.string(), r.string())
        else:
            body = None
    except ValueError as exc:
        if isinstance(exc, MalformedMessageError):
            raise
        raise MalformedMessageError(str(exc)) from None
    if r.pos != len(raw):
        raise MalformedMessageError(f"{len(raw) - r.pos} trailing bytes in {kind.name} body")
    return body


def _resync_offset(buf) -> int:
    """Bytes to drop after a bad magic so the next candidate frame starts the buffer."""
    nxt = bytes(buf).find(MAGIC, 1)
    if nxt >= 0:
        return nxt
    # keep a tail that could be the start of a magic split across reads
    for keep in range(min(len(MAGIC) - 1, len(buf) - 1), 0, -1):
        if MAGIC.startswith(bytes(buf[-keep:])):
            return len(buf) - keep
    return len(buf)


def decode(buf) -> tuple[Message, int]:
    """Decode the frame at the start of ``buf``; return ``(message, consumed)``.

    Raises :class:`IncompleteFrame` when ``buf`` holds only part of a frame.
    Errors carry a ``skip`` count for stream resynchronisation.
    """
    n = len(buf)
    head = bytes(buf[:4])
    if head != MAGIC[: len(head)]:
        raise ProtocolMismatchError(f"bad magic {head!r}", skip=_resync_offset(buf))
    if n < HEADER_SIZE:
        raise IncompleteFrame(HEADER_SIZE - n)
    _, version, raw_kind, call_id, body_len = HEADER.unpack_from(bytes(buf[:HEADER_SIZE]))
    frame_len = HEADER_SIZE + body_len
    if version != PROTOCOL_VERSION:
        raise VersionError(f"unsupported protocol version {version}", skip=frame_len)
    try:
        kind = Kind(raw_kind)
    except ValueError:
        raise MalformedMessageError(f"unknown kind byte {raw_kind}", skip=frame_len) from None
    if n < frame_len:
        raise IncompleteFrame(frame_len - n)
    try:
        body = _decode_body(kind, memoryview(buf)[HEADER_SIZE:frame_len])
    except MalformedMessageError as exc:
        exc.skip = frame_len
        raise
    return Message(kind, call_id, body, version), frame_len


def header_call_id(buf) -> Optional[int]:
    """Best-effort call_id of a frame whose header is intact."""
    if len(buf) >= HEADER_SIZE and bytes(buf[:4]) == MAGIC:
        return HEADER.unpack_from(bytes(buf[:HEADER_SIZE]))[3]
    return None


def decode_all(buf) -> Iterator[Message]:
    """Decode a byte string holding only whole frames."""
    pos = 0
    view = memoryview(buf)
    while pos < len(buf):
        msg, used = decode(view[pos:])
        pos += used
        yield msg


class FrameBuffer:
    """Accumulates stream bytes and yields whole messages as they complete."""

    def __init__(self):
        self._buf = bytearray()
        self._discard = 0  # bytes of a rejected frame still to arrive

    def feed(self, data) -> None:
        if self._discard:
            drop = min(self._discard, len(data))
            self._discard -= drop
            data = data[drop:]
        self._buf.extend(data)

    def __len__(self):
        return len(self._buf)

    def peek_call_id(self) -> Optional[int]:
        return header_call_id(self._buf[:HEADER_SIZE])

    def next(self) -> Optional[Message]:
        """Pop one message, or ``None`` if the next frame is incomplete.

        Decode errors propagate after the offending bytes are dropped, so the
        following call starts on the next frame boundary.
        """
        try:
            msg, used = decode(self._buf)
        except IncompleteFrame:
            return None
        except WireError as exc:
            skip = exc.skip
            if skip > len(self._buf):
                self._discard = skip - len(self._buf)
                skip = len(self._buf)
            del self._buf[:skip]
            raise
        del self._buf[:used]
        return msg


def chunk_buffer(buffer_id: int, data, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[DataPackage]:
    """Split ``data`` into ascending-offset packages of at most ``chunk_size`` bytes."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    data = bytes(data)
    total = len(data)
    if total == 0:
        return [DataPackage(buffer_id, 0, 0, b"")]
    return [
        DataPackage(buffer_id, off, total, data[off:off + chunk_size])
        for off in range(0, total, chunk_size)
    ]
