"""Exception hierarchy shared by every layer of the runtime."""


class HaoclError(Exception):
    """Base class for all runtime errors."""


# -- wire level ---------------------------------------------------------------

class WireError(HaoclError):
    """A frame could not be encoded or decoded.

    ``skip`` is the number of bytes a stream reader should discard to
    resynchronise on the next frame boundary (0 when unknown).
    """

    code = "malformed"

    def __init__(self, message, skip=0):
        super().__init__(message)
        self.skip = skip


class EncodingOverflowError(WireError):
    code = "encoding-overflow"


class ProtocolMismatchError(WireError):
    code = "protocol-mismatch"


class VersionError(WireError):
    code = "version"


class MalformedMessageError(WireError):
    code = "malformed"


class IncompleteFrame(WireError):
    """Not enough bytes for a whole frame yet; nothing was consumed."""

    code = "incomplete"

    def __init__(self, needed):
        super().__init__(f"incomplete frame: need {needed} more bytes")
        self.needed = needed


# -- transport ----------------------------------------------------------------

class TransportError(HaoclError):
    """The connection to a peer failed. The message names the endpoint."""

    def __init__(self, message, endpoint=None):
        super().__init__(message)
        self.endpoint = endpoint


class ConnectError(TransportError):
    pass


class HandshakeError(TransportError):
    pass


class RequestTimeout(TransportError):
    pass


class ProtocolError(TransportError):
    """The peer answered with something that violates request/response pairing."""


class StartupError(HaoclError):
    pass


class RemoteError(HaoclError):
    """The peer answered with an ErrorReply."""

    def __init__(self, code, message, endpoint=None):
        where = f" from {endpoint}" if endpoint else ""
        super().__init__(f"[{code}]{where} {message}")
        self.code = code
        self.remote_message = message
        self.endpoint = endpoint


class BusyError(RemoteError):
    """A non-shared device is leased to a different user."""


class AggregateError(HaoclError):
    """Some channels of a broadcast failed; ``results`` keeps the successes."""

    def __init__(self, failures, results):
        names = ", ".join(str(ep) for ep, _ in failures)
        super().__init__(f"broadcast failed for: {names}")
        self.failures = failures
        self.results = results

    @property
    def endpoints(self):
        return [ep for ep, _ in self.failures]


# -- host API -----------------------------------------------------------------

class ConfigError(HaoclError):
    pass


class InitError(HaoclError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class SizeError(HaoclError):
    pass


class UnknownNameError(HaoclError):
    def __init__(self, message, available=()):
        super().__init__(message)
        self.available = list(available)


class ArgumentError(HaoclError):
    pass


class ReleasedHandleError(HaoclError):
    pass


class PolicyError(HaoclError):
    pass


# -- scheduler ----------------------------------------------------------------

class RegistrationError(HaoclError):
    pass


class MappingError(HaoclError):
    pass


class UnknownDeviceError(HaoclError):
    pass


# -- kernels ------------------------------------------------------------------

class KernelArgumentError(ArgumentError):
    code = "argument"


class ContractError(HaoclError):
    pass


class PreconditionError(HaoclError):
    code = "precondition"
