import errno
import json
import multiprocessing as mp
import threading

import pytest

from supmae import runlog


def test_three_records_roundtrip(tmp_path):
    rl = runlog.RunLog(tmp_path, "abc")
    for step in range(3):
        rl.record("pretrain", 0, step, 1e-3 * step, 1.5, 1.2, 2.3, None, 10.0)
    rl.close()
    rows = runlog.metric_rows(tmp_path / "run.log")
    assert [r["step"] for r in rows] == [0, 1, 2]
    assert rows[1]["lr"] == 1e-3 and rows[2]["loss_cls"] == 2.3 and rows[0]["fingerprint"] == "abc"
    assert "timestamp" not in rows[0]
    timing = runlog.read(tmp_path / "timing.log")
    assert len(timing) == 3 and all("timestamp" in t for t in timing)


def test_nan_written_as_null(tmp_path):
    with runlog.LineSink(tmp_path / "x.log") as s:
        s.write({"v": float("nan")})
    assert json.loads((tmp_path / "x.log").read_text()) == {"v": None}


def test_monotone_enforced(tmp_path):
    rl = runlog.RunLog(tmp_path, "f")
    rl.record("pretrain", 1, 10, 0.1, 1, 1, 1)
    with pytest.raises(ValueError):
        rl.record("pretrain", 1, 9, 0.1, 1, 1, 1)
    rl.close()


def test_threads_never_tear_lines(tmp_path):
    path = tmp_path / "shared.log"
    sink = runlog.LineSink(path)
    pad = "x" * 3000

    def worker(tag):
        for i in range(200):
            sink.write({"tag": tag, "i": i, "pad": pad})

    ts = [threading.Thread(target=worker, args=(t,)) for t in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    sink.close()
    rows = runlog.read(path)
    assert len(rows) == 800
    for tag in range(4):
        assert [r["i"] for r in rows if r["tag"] == tag] == list(range(200))


def _proc(path, tag):
    with runlog.LineSink(path) as s:
        for i in range(100):
            s.write({"tag": tag, "i": i, "pad": "y" * 2000})


def test_processes_never_tear_lines(tmp_path):
    path = tmp_path / "shared.log"
    ctx = mp.get_context("fork")
    ps = [ctx.Process(target=_proc, args=(str(path), t)) for t in range(3)]
    for p in ps:
        p.start()
    for p in ps:
        p.join()
    lines = path.read_text().splitlines()
    assert len(lines) == 300
    assert all(json.loads(line)["pad"] == "y" * 2000 for line in lines)


def _flaky(fails):
    import os
    state = {"left": fails}

    def write(fd, data):
        if state["left"]:
            state["left"] -= 1
            raise OSError(errno.ENOSPC, "No space left on device")
        return os.write(fd, data)

    return write


def test_disk_full_retries_then_succeeds(tmp_path):
    waits = []
    s = runlog.LineSink(tmp_path / "a.log", retries=3, backoff=0.01, writer=_flaky(2), sleep=waits.append)
    s.write({"ok": 1})
    s.close()
    assert waits == [0.01, 0.02]
    assert runlog.read(tmp_path / "a.log") == [{"ok": 1}]


def test_disk_full_gives_up(tmp_path):
    waits = []
    s = runlog.LineSink(tmp_path / "a.log", retries=2, backoff=0.01, writer=_flaky(99), sleep=waits.append)
    with pytest.raises(runlog.DiskFull):
        s.write({"ok": 1})
    assert len(waits) == 2


def test_other_os_errors_propagate(tmp_path):
    def bad(fd, data):
        raise OSError(errno.EBADF, "bad")

    s = runlog.LineSink(tmp_path / "a.log", writer=bad)
    with pytest.raises(OSError) as info:
        s.write({})
    assert not isinstance(info.value, runlog.DiskFull)
