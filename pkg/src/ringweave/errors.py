"""Exception hierarchy shared by every ringweave module."""


class RingweaveError(Exception):
    pass


class ConfigurationError(RingweaveError):
    """Missing or malformed RINGWEAVE_* environment variables."""


class RendezvousError(RingweaveError):
    def __init__(self, message, peer_rank=None):
        super().__init__(message)
        self.peer_rank = peer_rank


class TransportError(RingweaveError):
    def __init__(self, message, peer_rank=None):
        super().__init__(message)
        self.peer_rank = peer_rank


class ProtocolError(RingweaveError):
    """A frame arrived that does not match what the receiver expected."""


class ContextClosedError(RingweaveError):
    pass


class UsageError(RingweaveError, ValueError):
    pass


class ContractError(RingweaveError, ValueError):
    """Violated precondition on an in-memory operation (e.g. length mismatch)."""


class UnsupportedOperationError(RingweaveError, TypeError):
    pass


class TimelineError(RingweaveError):
    pass
