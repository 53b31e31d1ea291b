import numpy as np
import pytest

from qkdnet.authchan import Direction, flip_byte_tamper
from qkdnet.linksim import POLARIZATION_LINK, LinkParams
from qkdnet.pipeline import FAILURE_RUN_ABORT, LinkPipeline, LinkStatus, run_link
from qkdnet.reconcile import frame_key_bits


def small_link(**kw):
    base = dict(loss_db=7.0, mu=0.03, sifted_rate=200.0, qber_mean=0.03, qber_jitter=0.005,
                name="t")
    base.update(kw)
    return LinkParams(**base)


def test_short_campaign_accounting():
    pipe = LinkPipeline(small_link(), seed=4, block_bits=30000, keep_keys=True)
    st = pipe.run(600.0)
    assert st.status is LinkStatus.OK
    assert st.sifted_bits == 120000
    k = frame_key_bits()
    assert st.frames == 120000 // k
    assert st.reconciled_bits == (st.frames - st.failed_frames) * k
    assert st.verified_bits == st.reconciled_bits
    assert st.blocks == len(st.block_log) == st.auth_rounds >= 3
    assert st.secret_bits == sum(b.l_sec_final for b in st.block_log)
    assert st.reserved_bits == 80 * st.blocks
    # every hashed bit went either to the key or to the MAC pool
    for blk in st.secret_blocks:
        assert blk.l_sec_raw == blk.bits.length + blk.reserved.length
    pool = pipe.channel.a.pool
    assert pool.consumed == 80 * st.auth_rounds
    assert pool.remaining == 1024
    assert len(st.windows) == 10


def test_seed_replay():
    a = run_link(small_link(), 300.0, seed=9)
    b = run_link(small_link(), 300.0, seed=9)
    c = run_link(small_link(), 300.0, seed=10)
    assert a.block_log == b.block_log and a.windows == b.windows
    assert a.windows != c.windows


def test_zero_duration():
    st = run_link(small_link(), 0.0, seed=1)
    assert st.status is LinkStatus.OK and st.windows == [] and st.secret_bits == 0


def test_high_qber_aborts():
    st = run_link(small_link(qber_mean=0.12, qber_jitter=0.0), 120.0, seed=2)
    assert st.status is LinkStatus.ABORTED
    assert "critical" in st.reason
    assert st.secret_bits == 0


def test_unreconcilable_link_aborts():
    st = run_link(small_link(qber_mean=0.3, qber_jitter=0.0), 300.0, seed=2)
    assert st.status is LinkStatus.ABORTED
    assert st.failed_frames == FAILURE_RUN_ABORT


def test_tampering_quarantines_key():
    tamper = flip_byte_tamper(Direction.B_TO_A, frame_index=2, byte_offset=1)
    st = LinkPipeline(small_link(), seed=3, tamper=tamper).run(120.0)
    assert st.status is LinkStatus.AUTH_FAILED
    assert st.secret_bits == 0


def test_rate_sits_near_reference():
    st = run_link(POLARIZATION_LINK, 600.0, seed=1)
    assert 20 / 3 <= st.secret_rate <= 60
