"""Run an N-rank job as forked local processes and collect return values.

Used by the test-suite and the benchmark; ``ringrun`` is the path for
launching arbitrary programs.
"""
from __future__ import annotations

import multiprocessing as mp
import os
import random
import socket
import time
import traceback
from multiprocessing.connection import wait

from .errors import RingweaveError
from .runtime import ENV_ADDRS, ENV_LOCAL_RANK, ENV_RANK, ENV_SIZE


class LocalJobError(RingweaveError):
    pass


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def free_port_block(n: int, hosts: tuple[str, ...] = ("127.0.0.1",)) -> int:
    """A base port such that base..base+n-1 are currently bindable on every host."""
    for _ in range(200):
        base = random.randint(20000, 60000 - n)
        socks = []
        try:
            for host in hosts:
                for port in range(base, base + n):
                    s = socket.socket()
                    socks.append(s)
                    s.bind((host, port))
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise LocalJobError(f"no block of {n} free ports found")


def ring_env(rank: int, size: int, ports: list[int], host: str = "127.0.0.1", **extra) -> dict[str, str]:
    env = {
        ENV_RANK: str(rank),
        ENV_SIZE: str(size),
        ENV_LOCAL_RANK: str(rank),
        ENV_ADDRS: ",".join(f"{host}:{p}" for p in ports),
    }
    env.update({k: str(v) for k, v in extra.items()})
    return env


def _child(fn, env, args, conn):
    os.environ.update(env)
    try:
        conn.send(("ok", fn(*args)))
    except BaseException:  # noqa: BLE001
        conn.send(("error", traceback.format_exc()))
    finally:
        conn.close()


def run_local(n: int, fn, *args, timeout: float = 60.0, env: dict | None = None) -> list:
    """Fork ``n`` ranks that each call ``fn(*args)``; return results by rank.

    ``fn`` reads its identity from the RINGWEAVE_* variables, exactly as
    under the launcher. Any rank raising, or the job outliving ``timeout``
    seconds, kills the remaining ranks and raises :class:`LocalJobError`.
    """
    ctx = mp.get_context("fork")
    ports = free_ports(n)
    procs, conns = [], {}
    for rank in range(n):
        parent, child = ctx.Pipe(duplex=False)
        p = ctx.Process(target=_child, args=(fn, ring_env(rank, n, ports, **(env or {})), args, child),
                        name=f"ringweave-rank{rank}", daemon=True)
        p.start()
        child.close()
        procs.append(p)
        conns[parent] = rank
    results: dict[int, object] = {}
    failures = []
    deadline = time.monotonic() + timeout
    try:
        while conns:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise LocalJobError(f"watchdog: ranks {sorted(conns.values())} still running after {timeout:.0f}s")
            for conn in wait(list(conns), timeout=min(remaining, 1.0)):
                rank = conns.pop(conn)
                try:
                    status, value = conn.recv()
                except EOFError:
                    status, value = "error", f"rank {rank} exited without reporting"
                if status == "ok":
                    results[rank] = value
                else:
                    failures.append((rank, value))
            if failures:
                rank, tb = failures[0]
                raise LocalJobError(f"rank {rank} failed:\n{tb}")
    finally:
        for p in procs:
            p.join(timeout=0 if failures or conns else 5)
            if p.is_alive():
                p.kill()
                p.join()
    return [results[r] for r in range(n)]
