"""Process identity and ring rendezvous.

Every rank listens on its own endpoint and dials only its successor; the
predecessor link is whatever connection the listener accepts. A handshake
frame carrying the sender's rank verifies both links before any traffic.
"""
from __future__ import annotations

import os
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

from .errors import ConfigurationError, ContextClosedError, ProtocolError, RendezvousError, RingweaveError
from .transport import Frame, Link, MsgType

PROTOCOL_VERSION = 1
_HANDSHAKE = struct.Struct("<IHI")  # claimed_rank, protocol_version, size

DEFAULT_TIMEOUT_SECS = 30.0
DEFAULT_FUSION_BYTES = 64 * 1024 * 1024
DEFAULT_CYCLE_MS = 5.0
BYE_TIMEOUT_SECS = 5.0

ENV_RANK = "RINGWEAVE_RANK"
ENV_SIZE = "RINGWEAVE_SIZE"
ENV_LOCAL_RANK = "RINGWEAVE_LOCAL_RANK"
ENV_ADDRS = "RINGWEAVE_ADDRS"
ENV_TIMEOUT = "RINGWEAVE_TIMEOUT_SECS"
ENV_TIMELINE = "RINGWEAVE_TIMELINE"
ENV_FUSION_BYTES = "RINGWEAVE_FUSION_BYTES"
ENV_CYCLE_MS = "RINGWEAVE_CYCLE_MS"


@dataclass(frozen=True)
class RuntimeConfig:
    rank: int
    size: int
    local_rank: int
    peer_addresses: tuple[tuple[str, int], ...]
    timeout: float = DEFAULT_TIMEOUT_SECS
    timeline_path: str | None = None
    fusion_bytes: int = DEFAULT_FUSION_BYTES
    cycle_ms: float = DEFAULT_CYCLE_MS


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.strip().rpartition(":")
    if not sep or not host:
        raise ConfigurationError(f"malformed endpoint {text!r}, expected host:port")
    try:
        port_num = int(port)
    except ValueError:
        raise ConfigurationError(f"malformed port in endpoint {text!r}") from None
    if not 0 < port_num < 65536:
        raise ConfigurationError(f"port out of range in endpoint {text!r}")
    return host, port_num


def _env_int(env: Mapping[str, str], key: str, default=None) -> int:
    raw = env.get(key)
    if raw is None or raw == "":
        if default is None:
            raise ConfigurationError(f"missing required environment variable {key}")
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{key}={raw!r} is not an integer") from None


def _env_float(env: Mapping[str, str], key: str, default: float) -> float:
    raw = env.get(key)
    if raw is None or raw == "":
        return default
    try:
        value = float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}={raw!r} is not a number") from None
    if value < 0:
        raise ConfigurationError(f"{key} must be non-negative")
    return value


def config_from_env(env: Mapping[str, str] | None = None) -> RuntimeConfig:
    env = os.environ if env is None else env
    rank = _env_int(env, ENV_RANK)
    size = _env_int(env, ENV_SIZE)
    local_rank = _env_int(env, ENV_LOCAL_RANK)
    if size < 1:
        raise ConfigurationError(f"{ENV_SIZE} must be >= 1, got {size}")
    if not 0 <= rank < size:
        raise ConfigurationError(f"{ENV_RANK}={rank} outside [0, {size})")
    if local_rank < 0:
        raise ConfigurationError(f"{ENV_LOCAL_RANK} must be >= 0")
    raw_addrs = env.get(ENV_ADDRS)
    if not raw_addrs:
        raise ConfigurationError(f"missing required environment variable {ENV_ADDRS}")
    addrs = tuple(parse_endpoint(a) for a in raw_addrs.split(","))
    if len(addrs) != size:
        raise ConfigurationError(f"{ENV_ADDRS} lists {len(addrs)} endpoints but {ENV_SIZE}={size}")
    fusion_bytes = _env_int(env, ENV_FUSION_BYTES, DEFAULT_FUSION_BYTES)
    if fusion_bytes < 0:
        raise ConfigurationError(f"{ENV_FUSION_BYTES} must be non-negative")
    return RuntimeConfig(
        rank=rank,
        size=size,
        local_rank=local_rank,
        peer_addresses=addrs,
        timeout=_env_float(env, ENV_TIMEOUT, DEFAULT_TIMEOUT_SECS),
        timeline_path=env.get(ENV_TIMELINE) or None,
        fusion_bytes=fusion_bytes,
        cycle_ms=_env_float(env, ENV_CYCLE_MS, DEFAULT_CYCLE_MS),
    )


@dataclass(eq=False)
class RingContext:
    config: RuntimeConfig
    send_link: Link
    recv_link: Link
    closed: bool = False
    # Single worker so queued sends on send_link stay in FIFO order.
    sender: ThreadPoolExecutor = field(default_factory=lambda: ThreadPoolExecutor(1, "ringweave-send"))
    _next_id: int = 1

    @property
    def rank(self) -> int:
        return self.config.rank

    @property
    def size(self) -> int:
        return self.config.size

    @property
    def local_rank(self) -> int:
        return self.config.local_rank

    @property
    def peer_addresses(self):
        return self.config.peer_addresses

    @property
    def successor(self) -> int:
        return (self.rank + 1) % self.size

    @property
    def predecessor(self) -> int:
        return (self.rank - 1) % self.size

    def next_collective_id(self) -> int:
        cid = self._next_id
        self._next_id += 1
        return cid

    def check_open(self) -> None:
        if self.closed:
            raise ContextClosedError("ring context has been shut down")


def rank(ctx: RingContext) -> int:
    return ctx.rank


def size(ctx: RingContext) -> int:
    return ctx.size


def local_rank(ctx: RingContext) -> int:
    return ctx.local_rank


def _handshake_frame(cfg: RuntimeConfig) -> Frame:
    return Frame(MsgType.HANDSHAKE, payload=_HANDSHAKE.pack(cfg.rank, PROTOCOL_VERSION, cfg.size))


def _check_handshake(frame: Frame, expected_rank: int, cfg: RuntimeConfig) -> None:
    if frame.msg_type != MsgType.HANDSHAKE or frame.payload_len != _HANDSHAKE.size:
        raise ProtocolError(f"expected handshake from rank {expected_rank}, got {frame.msg_type.name}")
    claimed, version, peer_size = _HANDSHAKE.unpack(frame.payload)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"rank {claimed} speaks protocol v{version}, this build is v{PROTOCOL_VERSION}")
    if peer_size != cfg.size:
        raise ProtocolError(f"rank {claimed} believes the job has {peer_size} ranks, expected {cfg.size}")
    if claimed != expected_rank:
        raise ProtocolError(f"expected rank {expected_rank} on this link, peer claims rank {claimed}")


def _accept_predecessor(listener: socket.socket, cfg: RuntimeConfig, deadline: float, out: dict) -> None:
    pred = (cfg.rank - 1) % cfg.size
    try:
        listener.settimeout(max(deadline - time.monotonic(), 0.001))
        try:
            sock, _ = listener.accept()
        except socket.timeout:
            raise RendezvousError(f"rank {pred} never connected (timeout)", pred) from None
        sock.settimeout(max(deadline - time.monotonic(), 0.001))
        link = Link(sock, pred)
        _check_handshake(link.recv_frame(), pred, cfg)
        link.send_frame(_handshake_frame(cfg))
        out["link"] = link
    except RingweaveError as exc:
        out["error"] = exc
    except OSError as exc:
        out["error"] = RendezvousError(f"accepting rank {pred} failed: {exc}", pred)


def _dial_successor(cfg: RuntimeConfig, deadline: float) -> Link:
    succ = (cfg.rank + 1) % cfg.size
    host, port = cfg.peer_addresses[succ]
    last_error = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=max(deadline - time.monotonic(), 0.001))
            break
        except OSError as exc:
            last_error = exc
            time.sleep(0.02)
    else:
        raise RendezvousError(f"could not reach rank {succ} at {host}:{port}: {last_error}", succ)
    sock.settimeout(max(deadline - time.monotonic(), 0.001))
    link = Link(sock, succ)
    link.send_frame(_handshake_frame(cfg))
    try:
        _check_handshake(link.recv_frame(), succ, cfg)
    except RingweaveError as exc:
        link.close()
        if isinstance(exc, ProtocolError):
            raise
        raise RendezvousError(f"handshake with rank {succ} failed: {exc}", succ) from exc
    return link


def init(env: Mapping[str, str] | None = None, timeout: float | None = None) -> RingContext:
    """Connect this process into the ring described by ``env``.

    Blocks until both neighbour links are up and verified, or raises
    :class:`RendezvousError` naming the rank that could not be reached.
    """
    cfg = config_from_env(env)
    if timeout is not None:
        cfg = RuntimeConfig(**{**vars(cfg), "timeout": timeout})
    deadline = time.monotonic() + cfg.timeout
    host, port = cfg.peer_addresses[cfg.rank]
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind((host, port))
    except OSError as exc:
        listener.close()
        raise RendezvousError(f"rank {cfg.rank} cannot listen on {host}:{port}: {exc}", cfg.rank) from exc
    listener.listen(8)

    accepted: dict = {}
    acceptor = threading.Thread(target=_accept_predecessor, args=(listener, cfg, deadline, accepted),
                                name="ringweave-accept", daemon=True)
    acceptor.start()
    try:
        send_link = _dial_successor(cfg, deadline)
    except BaseException:
        listener.close()
        acceptor.join()
        if "link" in accepted:
            accepted["link"].close()
        raise
    acceptor.join()
    listener.close()
    if "error" in accepted:
        send_link.close()
        raise accepted["error"]
    recv_link = accepted["link"]
    for link in (send_link, recv_link):
        link.sock.settimeout(None)
    return RingContext(cfg, send_link, recv_link)


def shutdown(ctx: RingContext) -> None:
    """Exchange BYE with both neighbours and close the links. Idempotent."""
    if ctx.closed:
        return
    ctx.closed = True
    try:
        ctx.send_link.send_frame(Frame(MsgType.BYE))
    except RingweaveError:
        pass
    ctx.recv_link.sock.settimeout(BYE_TIMEOUT_SECS)
    try:
        while ctx.recv_link.recv_frame().msg_type != MsgType.BYE:
            pass
    except (RingweaveError, OSError):
        pass
    ctx.send_link.close()
    ctx.recv_link.close()
    ctx.sender.shutdown(wait=True)
