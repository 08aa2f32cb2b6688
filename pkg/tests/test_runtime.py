import socket
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from ringweave import runtime
from ringweave.collectives import ring_allreduce
from ringweave.errors import ConfigurationError, ContextClosedError, ProtocolError, RendezvousError
from ringweave.launcher import launch, parse_args
from ringweave.local import free_port_block, free_ports, ring_env, run_local
from ringweave.transport import Frame, Link, MsgType


def single_env(**extra):
    return ring_env(0, 1, free_ports(1), **extra)


def test_config_defaults():
    cfg = runtime.config_from_env(single_env())
    assert cfg.timeout == 30
    assert cfg.fusion_bytes == 67_108_864
    assert cfg.cycle_ms == 5
    assert cfg.timeline_path is None


@pytest.mark.parametrize("mutate", [
    lambda e: e.pop("RINGWEAVE_RANK"),
    lambda e: e.pop("RINGWEAVE_ADDRS"),
    lambda e: e.update(RINGWEAVE_SIZE="two"),
    lambda e: e.update(RINGWEAVE_RANK="3"),
    lambda e: e.update(RINGWEAVE_SIZE="2"),
    lambda e: e.update(RINGWEAVE_ADDRS="localhost"),
    lambda e: e.update(RINGWEAVE_TIMEOUT_SECS="soon"),
])
def test_config_errors(mutate):
    env = single_env()
    mutate(env)
    with pytest.raises(ConfigurationError):
        runtime.init(env)


def test_single_rank_self_loop():
    ctx = runtime.init(single_env())
    try:
        assert (runtime.rank(ctx), runtime.size(ctx), runtime.local_rank(ctx)) == (0, 1, 0)
        assert ctx.send_link.peer_rank == ctx.recv_link.peer_rank == 0
        ctx.send_link.send_frame(Frame(MsgType.PLAN, payload=b"loop"))
        assert ctx.recv_link.recv_frame().payload == b"loop"
    finally:
        runtime.shutdown(ctx)


def test_shutdown_idempotent_and_closes():
    ctx = runtime.init(single_env())
    runtime.shutdown(ctx)
    runtime.shutdown(ctx)
    with pytest.raises(ContextClosedError):
        ring_allreduce(ctx, np.zeros(3))


def _neighbours():
    ctx = runtime.init()
    out = (ctx.rank, ctx.size, ctx.send_link.peer_rank, ctx.recv_link.peer_rank,
           ctx.send_link.snapshot_stats(MsgType.CHUNK).frames_sent)
    runtime.shutdown(ctx)
    return out


def test_four_rank_ring_neighbours():
    got = run_local(4, _neighbours)
    assert [g[0] for g in got] == [0, 1, 2, 3]
    for rank, size, succ, pred, chunks in got:
        assert size == 4
        assert succ == (rank + 1) % 4 and pred == (rank - 1) % 4
        assert chunks == 0


def test_rendezvous_timeout_names_missing_rank():
    ports = free_ports(2)
    t0 = time.monotonic()
    with pytest.raises(RendezvousError) as info:
        runtime.init(ring_env(0, 2, ports), timeout=0.5)
    assert info.value.peer_rank == 1
    assert "rank 1" in str(info.value)
    assert time.monotonic() - t0 < 5


def test_handshake_rejects_wrong_version():
    ports = free_ports(2)
    env = ring_env(1, 2, ports)
    listener = socket.create_server(("127.0.0.1", ports[0]))

    def impostor():
        sock, _ = listener.accept()
        link = Link(sock)
        link.recv_frame()
        link.send_frame(Frame(MsgType.HANDSHAKE, payload=runtime._HANDSHAKE.pack(0, 99, 2)))

    import threading
    th = threading.Thread(target=impostor, daemon=True)
    th.start()
    try:
        with pytest.raises(ProtocolError, match="protocol v99"):
            runtime.init(env, timeout=3)
    finally:
        th.join(2)
        listener.close()


def test_concurrent_shutdown_all_ranks():
    def work():
        ctx = runtime.init()
        runtime.shutdown(ctx)
        return ctx.closed

    assert run_local(4, work) == [True] * 4


REPORT = textwrap.dedent("""
    import os, sys
    from ringweave import runtime
    ctx = runtime.init()
    with open(os.path.join(sys.argv[1], f"rank{ctx.rank}"), "w") as fh:
        fh.write(f"{ctx.rank} {ctx.size} {ctx.local_rank} {ctx.config.peer_addresses[ctx.rank][0]}")
    runtime.shutdown(ctx)
""")


def test_sixteen_rank_four_host_launch(tmp_path):
    hosts = ("127.0.0.1", "127.0.0.2", "127.0.0.3", "127.0.0.4")
    base = free_port_block(16, hosts)
    argv = ["-np", "16", "-H", ",".join(f"{h}:4" for h in hosts), "--base-port", str(base),
            "--", sys.executable, "-c", REPORT, str(tmp_path)]
    assert launch(parse_args(argv)) == 0
    rows = [tuple((tmp_path / f"rank{r}").read_text().split()) for r in range(16)]
    assert sorted(int(r[0]) for r in rows) == list(range(16))
    assert all(int(r[1]) == 16 for r in rows)
    for local in range(4):
        assert sum(int(r[2]) == local for r in rows) == 4
    for rank, _, local, host in rows:
        assert host == hosts[int(rank) // 4]
        assert int(local) == int(rank) % 4
