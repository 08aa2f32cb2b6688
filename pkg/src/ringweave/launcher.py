"""``ringrun``: mpirun-style launcher for ringweave jobs.

    ringrun -np 4 [-H host:slots,...] [--base-port P] [--timeline DIR] -- prog args...

Ranks fill hosts in order, block-contiguously; rank r listens on
``host:(base_port + r)``. Only hosts that resolve to this machine can be
executed (no remote shells), but placement is computed for any host list.
"""
from __future__ import annotations

import argparse
import ipaddress
import logging
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import runtime
from .errors import RingweaveError, UsageError
from .timeline import merge_rank_traces

log = logging.getLogger(__name__)

DEFAULT_BASE_PORT = 29500
GRACE_PERIOD_SECS = 5.0


class LaunchError(RingweaveError):
    pass


@dataclass(frozen=True)
class HostSpec:
    entries: tuple[tuple[str, int], ...]

    @classmethod
    def parse(cls, text: str) -> "HostSpec":
        entries = []
        for token in text.split(","):
            host, sep, slots = token.strip().rpartition(":")
            if not sep or not host:
                raise UsageError(f"malformed host entry {token!r}, expected host:slots")
            try:
                n = int(slots)
            except ValueError:
                raise UsageError(f"malformed slot count in host entry {token!r}") from None
            if n < 1:
                raise UsageError(f"host entry {token!r} must have at least one slot")
            entries.append((host, n))
        return cls(tuple(entries))

    @property
    def total_slots(self) -> int:
        return sum(slots for _, slots in self.entries)


@dataclass(frozen=True)
class LaunchConfig:
    np: int
    hostspec: HostSpec
    program: str
    program_args: tuple[str, ...] = ()
    base_port: int = DEFAULT_BASE_PORT
    timeline_dir: str | None = None
    grace: float = GRACE_PERIOD_SECS


@dataclass(frozen=True)
class Placement:
    rank: int
    host: str
    local_rank: int
    endpoint: str


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ringrun", description="Launch a ringweave job on local processes.")
    p.add_argument("-np", dest="np", type=int, required=True, help="number of processes")
    p.add_argument("-H", dest="hosts", help="host:slots[,host:slots...] (default localhost:NP)")
    p.add_argument("--base-port", type=int, default=DEFAULT_BASE_PORT)
    p.add_argument("--timeline", dest="timeline_dir", help="directory for per-rank and merged traces")
    p.add_argument("--grace", type=float, default=GRACE_PERIOD_SECS,
                   help="seconds between SIGTERM and SIGKILL on teardown")
    p.add_argument("command", nargs=argparse.REMAINDER)
    return p


def parse_args(argv: list[str]) -> LaunchConfig:
    argv = list(argv)
    if "--" in argv:
        cut = argv.index("--")
        flags, command = argv[:cut], argv[cut + 1:]
        ns = _parser().parse_args(flags)
        if ns.command:
            raise UsageError(f"unexpected arguments before '--': {ns.command}")
    else:
        ns = _parser().parse_args(argv)
        command = ns.command
    if not command:
        raise UsageError("no program given")
    if ns.np < 1:
        raise UsageError(f"-np must be >= 1, got {ns.np}")
    hostspec = HostSpec.parse(ns.hosts) if ns.hosts else HostSpec((("localhost", ns.np),))
    if ns.np > hostspec.total_slots:
        raise UsageError(f"-np {ns.np} exceeds the {hostspec.total_slots} slots given by -H")
    if not 0 < ns.base_port or ns.base_port + ns.np > 65536:
        raise UsageError(f"--base-port {ns.base_port} leaves no room for {ns.np} ports")
    return LaunchConfig(ns.np, hostspec, command[0], tuple(command[1:]), ns.base_port, ns.timeline_dir, ns.grace)


def assign_placement(config: LaunchConfig) -> list[Placement]:
    placement = []
    rank = 0
    for host, slots in config.hostspec.entries:
        for local in range(slots):
            if rank == config.np:
                return placement
            placement.append(Placement(rank, host, local, f"{host}:{config.base_port + rank}"))
            rank += 1
    return placement


def rank_env(config: LaunchConfig, placement: list[Placement], rank: int,
             timeline_path: str | None = None) -> dict[str, str]:
    p = placement[rank]
    env = {
        runtime.ENV_RANK: str(rank),
        runtime.ENV_SIZE: str(config.np),
        runtime.ENV_LOCAL_RANK: str(p.local_rank),
        runtime.ENV_ADDRS: ",".join(q.endpoint for q in placement),
    }
    if timeline_path:
        env[runtime.ENV_TIMELINE] = timeline_path
    return env


def is_local_host(host: str) -> bool:
    try:
        addr = socket.gethostbyname(host)
    except OSError:
        return False
    if ipaddress.ip_address(addr).is_loopback:
        return True
    try:
        local = {socket.gethostbyname(socket.gethostname())}
    except OSError:
        local = set()
    return addr in local


def _timeline_paths(config: LaunchConfig, env: dict) -> tuple[str | None, list[str]]:
    if config.timeline_dir:
        out_dir = Path(config.timeline_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        merged = out_dir / "timeline.json"
        return str(merged), [str(out_dir / f"timeline.rank{r}.json") for r in range(config.np)]
    target = env.get(runtime.ENV_TIMELINE)
    if target:
        return target, [f"{target}.rank{r}" for r in range(config.np)]
    return None, []


def _teardown(procs: list[subprocess.Popen], grace: float) -> None:
    live = [p for p in procs if p.poll() is None]
    for p in live:
        try:
            p.terminate()
        except OSError:
            pass
    deadline = time.monotonic() + grace
    for p in live:
        try:
            p.wait(max(deadline - time.monotonic(), 0))
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait()


def _exit_code(code: int) -> int:
    return 128 - code if code < 0 else code


def launch(config: LaunchConfig, env: dict | None = None) -> int:
    """Spawn every rank locally, supervise them and return the job's exit status.

    The first child to exit nonzero tears down the rest (SIGTERM, then
    SIGKILL after the grace period) and its status becomes the result.
    """
    base_env = dict(os.environ if env is None else env)
    placement = assign_placement(config)
    remote = sorted({p.host for p in placement if not is_local_host(p.host)})
    if remote:
        raise LaunchError(f"remote execution is not supported; hosts not local: {', '.join(remote)}")
    merged_path, rank_paths = _timeline_paths(config, base_env)
    procs: list[subprocess.Popen] = []
    try:
        for p in placement:
            child_env = {**base_env, **rank_env(config, placement, p.rank,
                                                rank_paths[p.rank] if rank_paths else None)}
            try:
                procs.append(subprocess.Popen([config.program, *config.program_args], env=child_env))
            except OSError as exc:
                raise LaunchError(f"failed to start rank {p.rank} ({config.program}): {exc}") from exc
        status = 0
        while True:
            codes = [p.poll() for p in procs]
            failed = [(r, c) for r, c in enumerate(codes) if c not in (None, 0)]
            if failed:
                rank, code = failed[0]
                log.error("rank %d exited with status %d; terminating the job", rank, code)
                status = _exit_code(code)
                break
            if all(c == 0 for c in codes):
                break
            time.sleep(0.05)
    except BaseException:
        _teardown(procs, config.grace)
        raise
    _teardown(procs, config.grace)
    if status == 0 and merged_path:
        present = [p for p in rank_paths if Path(p).exists()]
        if present:
            merge_rank_traces(present, merged_path)
    return status


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="ringrun: %(message)s")
    try:
        config = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"ringrun: {exc}", file=sys.stderr)
        _parser().print_usage(sys.stderr)
        return 2
    try:
        return launch(config)
    except LaunchError as exc:
        print(f"ringrun: {exc}", file=sys.stderr)
        return 127
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
