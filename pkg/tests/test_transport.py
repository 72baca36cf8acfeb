import threading

import numpy as np
import pytest

from hybridgcn.quant import decode_rows, encode_fp32, encode_rows, payload_bytes
from hybridgcn.transport import (ByteLedger, CollectiveTimeout, Direction, InProcHub,
                                 PeerDisconnected, Tag, TagMismatch, TcpTransport,
                                 TransportError, free_local_hosts, rank_from_env, read_hosts)


def run_ranks(endpoints, fn):
    """Call ``fn(endpoint)`` on each endpoint in its own thread; re-raise the first error."""
    out, errs = [None] * len(endpoints), []

    def body(r):
        try:
            out[r] = fn(endpoints[r])
        except BaseException as exc:  # noqa: BLE001
            errs.append(exc)

    threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(len(endpoints))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(20)
    if errs:
        raise errs[0]
    return out


def tcp_endpoints(p, timeout=10.0):
    hosts = free_local_hosts(p)
    ledger = ByteLedger()
    return [TcpTransport(r, hosts, timeout, ledger) for r in range(p)], ledger


@pytest.fixture(params=["inproc", "tcp"])
def mesh(request):
    def make(p, timeout=10.0):
        if request.param == "inproc":
            hub = InProcHub(p, timeout)
            return hub.endpoints(), hub.ledger
        return tcp_endpoints(p, timeout)
    made = []

    def factory(p, timeout=10.0):
        eps, ledger = make(p, timeout)
        made.extend(eps)
        return eps, ledger
    yield factory
    for e in made:
        e.close()


def random_schedule(rng, p):
    return {(s, d): encode_fp32(rng.standard_normal((int(rng.integers(0, 6)), 3)))
            for s in range(p) for d in range(p) if s != d and rng.random() < 0.7}


class TestAllToAllv:
    def test_two_ranks_swap_rows(self, mesh):
        eps, _ = mesh(2)
        rows = [np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])]
        got = run_ranks(eps, lambda e: e.all_to_allv({1 - e.rank: encode_fp32(rows[e.rank])}))
        np.testing.assert_array_equal(decode_rows(got[0][1]), rows[1])
        np.testing.assert_array_equal(decode_rows(got[1][0]), rows[0])

    def test_empty_schedules(self, mesh):
        eps, ledger = mesh(4)
        got = run_ranks(eps, lambda e: e.all_to_allv({}))
        assert all(v == b"" for g in got for v in g.values())
        assert all(c.total == 0 and c.messages == 0 for c in ledger.totals().values())

    def test_random_schedules_accounted(self, mesh, rng):
        p = 4
        eps, ledger = mesh(p)
        scheds = [random_schedule(rng, p) for _ in range(3)]

        def fn(e):
            out = []
            for ep, sched in enumerate(scheds):
                mine = {d: buf for (s, d), buf in sched.items() if s == e.rank}
                out.append(e.all_to_allv(mine, epoch=ep, layer=0))
            return out

        got = run_ranks(eps, fn)
        for ep, sched in enumerate(scheds):
            for (s, d), buf in sched.items():
                assert got[d][ep][s] == buf
            sent = ledger.totals("sent", epoch=ep)
            recv = ledger.totals("received", epoch=ep)
            for (s, d), buf in sched.items():
                rows = decode_rows(buf).shape[0]
                want = payload_bytes(rows, 3, 32)
                assert sent[(s, d)].data_bytes == want["data"]
                assert recv[(s, d)].data_bytes == want["data"]
                assert sent[(s, d)].param_bytes == 0
            assert {k: v.total for k, v in sent.items()} == {k: v.total for k, v in recv.items()}

    def test_self_send_rejected(self):
        e = InProcHub(2).endpoints()[0]
        with pytest.raises(TransportError):
            e.all_to_allv({0: b"x"})
        with pytest.raises(TransportError):
            e.all_to_allv({5: b"x"})

    def test_epoch_backwards_rejected(self):
        e = InProcHub(1).endpoints()[0]
        e.all_to_allv({}, epoch=3)
        with pytest.raises(TransportError):
            e.all_to_allv({}, epoch=2)

    def test_single_rank_is_noop(self):
        e = InProcHub(1).endpoints()[0]
        assert e.all_to_allv({}) == {}


class TestErrors:
    def test_tag_mismatch(self, mesh):
        eps, _ = mesh(2, timeout=5.0)
        with pytest.raises(TagMismatch):
            run_ranks(eps, lambda e: e.all_to_allv({}, layer=e.rank))

    def test_timeout_inproc(self):
        eps = InProcHub(2, timeout=0.2).endpoints()
        with pytest.raises(CollectiveTimeout):
            eps[0].all_to_allv({1: b""})

    def test_tcp_peer_gone(self):
        eps, _ = tcp_endpoints(2, timeout=3.0)
        run_ranks(eps, lambda e: e.all_to_allv({}))
        eps[1].close()
        with pytest.raises((PeerDisconnected, CollectiveTimeout)):
            eps[0].all_to_allv({1: encode_fp32(np.ones((2, 2)))}, epoch=1)
        eps[0].close()

    def test_tcp_unreachable(self):
        hosts = free_local_hosts(2)
        e = TcpTransport(0, hosts, timeout=0.5)
        try:
            with pytest.raises(CollectiveTimeout):
                e.all_to_allv({})
        finally:
            e.close()


class TestLedger:
    def test_int2_block_sizes(self, rng):
        eps = InProcHub(2).endpoints()
        x = rng.standard_normal((1000, 256)).astype(np.float32)
        run_ranks(eps, lambda e: e.all_to_allv({1 - e.rank: encode_rows(x, 2, seed=e.rank)},
                                               direction=Direction.FORWARD))
        for pair, c in eps[0].byte_ledger().totals("sent").items():
            assert (c.data_bytes, c.param_bytes, c.messages) == (64_000, 8_000, 1), pair

    def test_fp32_has_no_params(self, rng):
        eps = InProcHub(2).endpoints()
        run_ranks(eps, lambda e: e.all_to_allv({1 - e.rank: encode_fp32(np.ones((10, 4)))}))
        for c in eps[0].ledger.totals().values():
            assert c.param_bytes == 0 and c.data_bytes == 160

    def test_empty_ledger(self):
        assert ByteLedger().totals() == {}
        assert ByteLedger().epochs() == []

    def test_direction_filter_and_reset(self):
        eps = InProcHub(2).endpoints()
        buf = encode_fp32(np.ones((1, 2)))

        def fn(e):
            e.all_to_allv({1 - e.rank: buf}, 0, 0, Direction.FORWARD)
            e.all_to_allv({1 - e.rank: buf}, 0, 0, Direction.BACKWARD)
            e.all_to_allv({1 - e.rank: buf}, 1, 0, Direction.FORWARD)
        run_ranks(eps, fn)
        led = eps[0].ledger
        assert led.totals(directions=[Direction.FORWARD])[(0, 1)].messages == 2
        assert led.totals(epoch=0)[(0, 1)].messages == 2
        assert led.epochs() == [0, 1]
        led.reset()
        assert led.totals() == {}


def test_backends_deliver_identical_bytes(rng):
    p = 3
    scheds = [{(s, d): encode_rows(rng.standard_normal((4, 5)), 4, seed=s * 7 + d)
               for s in range(p) for d in range(p) if s != d} for _ in range(2)]

    def fn(e):
        res = []
        for ep, sched in enumerate(scheds):
            res.append(e.all_to_allv({d: b for (s, d), b in sched.items() if s == e.rank}, ep))
        return res

    a = run_ranks(InProcHub(p).endpoints(), fn)
    eps, _ = tcp_endpoints(p)
    try:
        b = run_ranks(eps, fn)
    finally:
        for e in eps:
            e.close()
    assert a == b


def test_tag_encoding_orders_fields():
    t = Tag(epoch=2, seq=5, layer=1, direction=Direction.BACKWARD)
    assert t.encode() != Tag(2, 5, 1, Direction.FORWARD).encode()
    assert Tag(1, 0, 0, 0) < Tag(1, 1, 0, 0) < Tag(2, 0, 0, 0)


def test_read_hosts(tmp_path, monkeypatch):
    f = tmp_path / "hosts.txt"
    f.write_text("# rendezvous\n127.0.0.1:5000\nnode2:5001  # second\n\n")
    assert read_hosts(f) == [("127.0.0.1", 5000), ("node2", 5001)]
    f.write_text("nohost\n")
    with pytest.raises(ValueError):
        read_hosts(f)
    monkeypatch.setenv("HYBRIDGCN_RANK", "3")
    assert rank_from_env() == 3
    monkeypatch.delenv("HYBRIDGCN_RANK")
    assert rank_from_env(1) == 1
