import json
import sys
import textwrap
import time

import pytest

from ringweave.launcher import (HostSpec, LaunchConfig, LaunchError, assign_placement, launch, main, parse_args,
                                rank_env)
from ringweave.local import free_port_block

PAPER_LINE = "-np 16 -H server1:4,server2:4,server3:4,server4:4 -- python train.py".split()


def test_parse_paper_launch_line():
    cfg = parse_args(PAPER_LINE)
    assert cfg.np == 16
    assert cfg.hostspec.entries == (("server1", 4), ("server2", 4), ("server3", 4), ("server4", 4))
    assert (cfg.program, cfg.program_args, cfg.base_port) == ("python", ("train.py",), 29500)


def test_parse_defaults_to_localhost():
    cfg = parse_args(["-np", "1", "--", "prog"])
    assert cfg.hostspec == HostSpec((("localhost", 1),))


def test_parse_without_separator():
    cfg = parse_args(["-np", "2", "--base-port", "4000", "prog", "--flag"])
    assert (cfg.program, cfg.program_args, cfg.base_port) == ("prog", ("--flag",), 4000)


@pytest.mark.parametrize("argv,needle", [
    ("-np 5 -H a:2,b:2 -- x", "exceeds"),
    ("-np 2 -H a:2,b -- x", "'b'"),
    ("-np 2 -H a:zero -- x", "a:zero"),
    ("-np 2 -H a:0 -- x", "a:0"),
    ("-np 0 -- x", "-np"),
    ("-np 2", "no program"),
    ("-H a:2 -- x", "-np"),
])
def test_parse_errors(argv, needle):
    with pytest.raises(ValueError, match=needle):
        parse_args(argv.split())


def test_main_reports_usage_error(capsys):
    assert main(["-np", "5", "-H", "a:2,b:2", "--", "x"]) == 2
    assert "exceeds" in capsys.readouterr().err


def test_sixteen_rank_placement():
    placement = assign_placement(parse_args(PAPER_LINE))
    assert [p.rank for p in placement] == list(range(16))
    for p in placement:
        assert p.host == f"server{p.rank // 4 + 1}"
        assert p.local_rank == p.rank % 4
        assert p.endpoint == f"{p.host}:{29500 + p.rank}"
    server2 = [(p.rank, p.local_rank) for p in placement if p.host == "server2"]
    assert server2 == [(4, 0), (5, 1), (6, 2), (7, 3)]


def test_single_rank_placement():
    (p,) = assign_placement(parse_args(["-np", "1", "--", "prog"]))
    assert (p.rank, p.host, p.local_rank, p.endpoint) == (0, "localhost", 0, "localhost:29500")


def test_partial_last_host():
    placement = assign_placement(parse_args(["-np", "3", "-H", "a:2,b:2", "--", "x"]))
    assert [(p.host, p.local_rank) for p in placement] == [("a", 0), ("a", 1), ("b", 0)]


def test_placement_is_pure_and_addresses_identical():
    cfg = parse_args(PAPER_LINE)
    assert assign_placement(cfg) == assign_placement(parse_args(PAPER_LINE))
    placement = assign_placement(cfg)
    envs = [rank_env(cfg, placement, r) for r in range(16)]
    assert len({e["RINGWEAVE_ADDRS"] for e in envs}) == 1
    addrs = envs[0]["RINGWEAVE_ADDRS"].split(",")
    assert all(addrs[p.rank] == p.endpoint for p in placement)


def local_config(np_, code, *args, timeline_dir=None):
    base = free_port_block(np_)
    return LaunchConfig(np_, HostSpec((("127.0.0.1", np_),)), sys.executable, ("-c", code, *args), base,
                        timeline_dir)


def test_launch_all_succeed():
    assert launch(local_config(4, "import sys; sys.exit(0)")) == 0


def test_local_ranks_on_single_host(tmp_path):
    code = textwrap.dedent("""
        import os, sys
        open(os.path.join(sys.argv[1], os.environ["RINGWEAVE_RANK"]), "w").write(os.environ["RINGWEAVE_LOCAL_RANK"])
    """)
    assert launch(local_config(4, code, str(tmp_path))) == 0
    assert [(tmp_path / str(r)).read_text() for r in range(4)] == ["0", "1", "2", "3"]


def test_failing_child_tears_down_peers(tmp_path):
    code = textwrap.dedent("""
        import os, sys, time
        if os.environ["RINGWEAVE_RANK"] == "1":
            time.sleep(0.3)
            sys.exit(3)
        time.sleep(60)
        open(os.path.join(sys.argv[1], "survivor"), "w").write("x")
    """)
    t0 = time.monotonic()
    status = launch(local_config(4, code, str(tmp_path)))
    elapsed = time.monotonic() - t0
    assert status == 3
    assert elapsed < 10
    assert not (tmp_path / "survivor").exists()


def test_spawn_failure():
    cfg = LaunchConfig(2, HostSpec((("127.0.0.1", 2),)), "/nonexistent/program", (), free_port_block(2))
    with pytest.raises(LaunchError, match="rank 0"):
        launch(cfg)


def test_remote_hosts_refused():
    with pytest.raises(LaunchError, match="not local"):
        launch(parse_args(["-np", "1", "-H", "no-such-host.invalid:1", "--", "true"]))


TIMELINE_WORKER = textwrap.dedent("""
    import numpy as np
    import ringweave as rw
    comm = rw.init(cycle_ms=1)
    for step in range(3):
        comm.allreduce(np.ones(16), name=f"grad{step}")
    comm.shutdown()
""")


def test_timeline_merge_via_env(tmp_path, monkeypatch):
    target = tmp_path / "trace.json"
    monkeypatch.setenv("RINGWEAVE_TIMELINE", str(target))
    assert launch(local_config(4, TIMELINE_WORKER)) == 0
    events = json.loads(target.read_text())
    assert {e["pid"] for e in events} == {0, 1, 2, 3}
    for pid in range(4):
        assert sum(e["pid"] == pid and e["cat"] == "COMMUNICATE" and e["ph"] == "B" for e in events) == 3


def test_timeline_dir_flag(tmp_path):
    assert launch(local_config(2, TIMELINE_WORKER, timeline_dir=str(tmp_path))) == 0
    assert (tmp_path / "timeline.json").exists()
    assert (tmp_path / "timeline.rank0.json").exists() and (tmp_path / "timeline.rank1.json").exists()
