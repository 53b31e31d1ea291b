import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qkdnet.keycore import BitString, SecurityParams
from qkdnet.linksim import PHASE_LINK, POLARIZATION_LINK
from qkdnet.netnode import (InsufficientKeyMaterialError, LinkKeyStore, Network, NodeId,
                            PathNotFoundError, RelayPath, generate_network_key, network_epsilon,
                            secret_key_rate)
from qkdnet.pipeline import LinkPipeline


def chain(n=3, bits=4096, seed=0):
    net = Network(np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for i in range(1, n):
        net.add_link(f"n{i}", f"n{i + 1}")
        net.deposit(f"n{i}", f"n{i + 1}", BitString.random(bits, rng))
    return net


class TestKeys:
    def test_network_key(self):
        k = generate_network_key(256, 7)
        assert k.length == 256
        assert generate_network_key(256, 7) == k
        assert generate_network_key(256, 8) != k
        with pytest.raises(ValueError):
            generate_network_key(0, 1)

    def test_rate(self):
        assert secret_key_rate(0, 5.0) == 0
        assert secret_key_rate(20000, 1000.0) == 20.0
        assert secret_key_rate(100, 1.0) == 100.0
        with pytest.raises(ValueError):
            secret_key_rate(10, 0.0)

    def test_epsilon(self):
        p = SecurityParams()
        three = network_epsilon(p, RelayPath(("a", "b", "c")))
        assert three.eps_qkdnet < 5e-11
        two = network_epsilon(p, RelayPath(("a", "b")))
        assert two.eps_qkdnet == two.eps_qkd + p.eps_auth
        eleven = network_epsilon(p, RelayPath(tuple(range(11))))
        assert eleven.eps_qkdnet == pytest.approx(2.46e-10, rel=2e-3)


class TestStore:
    def test_conservation_and_audit(self, rng):
        s = LinkKeyStore(NodeId("a"), (NodeId("a"), NodeId("b")))
        s.deposit(BitString.random(100, rng))
        bits, start = s.take(30)
        assert start == 0 and bits.length == 30
        _, start = s.take(30)
        assert start == 30
        assert s.produced - s.consumed == s.remaining == 40
        assert s.audit()
        with pytest.raises(InsufficientKeyMaterialError):
            s.take(41)


class TestRelay:
    def test_single_hop(self):
        net = chain(2)
        k = generate_network_key(256, 1)
        rec = net.relay_key(k, RelayPath(("n1", "n2")))
        assert rec.ok and rec.delivered == k
        assert rec.trust_events == []

    def test_three_nodes(self):
        net = chain(3)
        k = generate_network_key(256, 2)
        rec = net.relay_key(k, RelayPath(("n1", "n2", "n3")))
        assert rec.delivered == k
        assert [e.node for e in rec.trust_events] == [NodeId("n2")]
        assert rec.hops[0].ciphertext != rec.hops[1].ciphertext
        for a, b in (("n1", "n2"), ("n2", "n3")):
            assert net.store(a, b).consumed == net.store(b, a).consumed == 256

    def test_relay_frames_on_the_wire(self):
        net = chain(3)
        k = generate_network_key(64, 3)
        net.relay_key(k, RelayPath(("n1", "n2", "n3")))
        frame = net.link("n2", "n3").channel.a.sent.bytes
        assert frame[4:6] == bytes([0x01, 0x40])
        assert frame[6:8] == (1).to_bytes(2, "big")
        assert frame[8:12] == (64).to_bytes(4, "big")
        assert len(frame) == 6 + 2 + 4 + 8
        assert net.authenticate_links()

    def test_atomic_when_later_hop_short(self):
        net = chain(3, bits=256)
        net.link("n2", "n3").stores[NodeId("n2")].take(1)
        net.link("n2", "n3").stores[NodeId("n3")].take(1)
        with pytest.raises(InsufficientKeyMaterialError):
            net.relay_key(generate_network_key(256, 4), RelayPath(("n1", "n2", "n3")))
        assert net.store("n1", "n2").consumed == 0 == net.store("n2", "n1").consumed

    @settings(max_examples=25)
    @given(st.integers(2, 6), st.integers(1, 300), st.integers(0, 2 ** 32))
    def test_any_chain_delivers(self, n, length, seed):
        net = chain(n, bits=length, seed=seed % 1000)
        path = RelayPath(tuple(f"n{i}" for i in range(1, n + 1)))
        k = generate_network_key(length, seed)
        assert net.relay_key(k, path).delivered == k
        assert len(net.trust_log) == n - 2

    def test_path_errors(self):
        net = chain(3)
        net.add_link("x", "y")
        with pytest.raises(PathNotFoundError):
            net.find_path("n1", "y")
        with pytest.raises(PathNotFoundError):
            net.find_path("n1", "zz")
        assert net.find_path("n3", "n1").nodes == tuple(NodeId(x) for x in ("n3", "n2", "n1"))
        with pytest.raises(ValueError):
            RelayPath(("a",))

    def test_pads_from_different_link_types(self):
        # pads from a polarization-type and a phase-type link relay alike
        net = Network(np.random.default_rng(0))
        net.add_link("node1", "node2")
        net.add_link("node2", "node3")
        for (a, b), params in ((("node1", "node2"), POLARIZATION_LINK),
                               (("node2", "node3"), PHASE_LINK)):
            pipe = LinkPipeline(params, seed=11, keep_keys=True)
            stats = pipe.run(300.0)
            for blk in stats.secret_blocks:
                net.deposit(a, b, blk.bits)
        path = RelayPath(("node1", "node2", "node3"))
        for i in range(20):
            k = generate_network_key(256, i)
            assert net.relay_key(k, path).delivered == k


class TestRenewal:
    def make(self, r12, r23):
        net = Network(np.random.default_rng(5))
        net.add_link(1, 2, rate_bps=r12)
        net.add_link(2, 3, rate_bps=r23)
        return net

    def test_bottleneck_wait(self):
        net = self.make(20.0, 100.0)
        waits = [net.request_renewal_key((1, 3))[1] for _ in range(20)]
        assert np.mean(waits) == pytest.approx(12.8, abs=0.05)

    def test_single_fast_link(self):
        net = Network(np.random.default_rng(5))
        net.add_link(2, 3, rate_bps=100.0)
        waits = [net.request_renewal_key((2, 3))[1] for _ in range(10)]
        assert np.mean(waits) == pytest.approx(2.56, abs=0.01)

    def test_prefilled_pool(self):
        net = self.make(20.0, 100.0)
        net.advance(60.0)
        key, wait = net.request_renewal_key((1, 3))
        assert wait == 0.0 and key.length == 256

    def test_throughput_bounded_by_slowest_hop(self):
        net = self.make(35.0, 90.0)
        for _ in range(5):
            net.request_renewal_key((1, 3))
        t0 = net.now
        n = 50
        for _ in range(n):
            net.request_renewal_key((1, 3))
        throughput = n * 256 / (net.now - t0)
        assert throughput <= 35.0 * 1.05

    def test_no_path(self):
        net = self.make(20.0, 20.0)
        with pytest.raises(PathNotFoundError):
            net.request_renewal_key((1, 9))
