import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disconet.channel import (HEADER_SIZE, ChannelLog, WireFormatError, bandwidth_report, broadcast_round,
                              message_wire_size, pack_message, tradeoff_csv, unpack_message)
from disconet.evaluation import EvalReport
from disconet.geometry import Pose
from disconet.graph import NeuralMessage
from disconet.tensor import Tensor


def _msg(sender=0, shape=(16, 32, 32), seed=0, pose=Pose(1.5, -2.0, 0.25)):
    data = np.random.default_rng(seed).standard_normal(shape).astype(np.float32).astype(np.float64)
    return NeuralMessage(sender, pose, Tensor(data))


def _report(ap50, ap70=0.0):
    return EvalReport("x", ap50, ap70, 0, 0, 0, 0, 0, 0)


class TestWireFormat:
    def test_size(self):
        assert HEADER_SIZE == 19
        assert len(pack_message(_msg())) == 19 + 65_536
        assert message_wire_size(16, 32) == 19 + 65_536

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), c=st.integers(1, 8), k=st.integers(1, 6), sender=st.integers(0, 65535))
    def test_round_trip_bit_identical(self, seed, c, k, sender):
        m = _msg(sender, (c, k, k), seed)
        back = unpack_message(pack_message(m))
        assert back.sender == sender
        assert back.payload.data.tobytes() == m.payload.data.tobytes()
        assert pack_message(back) == pack_message(m)

    def test_pose_at_float32(self):
        back = unpack_message(pack_message(_msg(pose=Pose(0.1, 0.2, 0.3))))
        assert back.pose.x == float(np.float32(0.1))

    def test_version_byte(self):
        buf = bytearray(pack_message(_msg(shape=(1, 2, 2))))
        buf[HEADER_SIZE - 1] = 9
        with pytest.raises(WireFormatError, match="format version") as err:
            unpack_message(bytes(buf))
        assert err.value.field == "format version"

    def test_truncated_offset(self):
        buf = pack_message(_msg(shape=(2, 2, 2)))
        with pytest.raises(WireFormatError) as err:
            unpack_message(buf[:-3])
        assert err.value.offset == len(buf) - 3
        with pytest.raises(WireFormatError):
            unpack_message(buf[:10])


class TestBroadcast:
    def test_three_agents(self):
        msgs = [_msg(i, (2, 4, 4), i) for i in range(3)]
        inboxes, log = broadcast_round(msgs)
        assert [len(b) for b in inboxes] == [2, 2, 2]
        assert [sorted(m.sender for m in b) for b in inboxes] == [[1, 2], [0, 2], [0, 1]]
        assert len(log.entries) == 3 and all(e.receivers == 2 for e in log.entries)
        np.testing.assert_array_equal(inboxes[0][0].payload.data, msgs[1].payload.data)

    def test_single_agent_silent(self):
        inboxes, log = broadcast_round([_msg()])
        assert inboxes == [[]]
        assert log.total_wire_bytes == 0 and log.entries == []

    def test_two_agents_ratio_16(self):
        _, log = broadcast_round([_msg(0), _msg(1, seed=1)])
        assert log.total_wire_bytes == 131_110
        assert log.per_agent() == {0: 65_555, 1: 65_555}
        assert log.payload_per_frame_per_agent() == 65_536

    def test_totals_are_entry_sums(self):
        log = ChannelLog()
        for r in range(3):
            broadcast_round([_msg(i, (1 + r, 2, 2), i) for i in range(2 + r)], log)
        assert log.rounds == 3
        assert sum(log.per_round().values()) == log.total_wire_bytes
        assert sum(log.per_agent().values()) == log.total_wire_bytes

    def test_gradient_passes_through(self):
        from disconet.tensor import backward, tsum

        a = Tensor(np.ones((1, 2, 2)), requires_grad=True)
        msgs = [NeuralMessage(0, Pose(), a), _msg(1, (1, 2, 2))]
        inboxes, _ = broadcast_round(msgs)
        backward(tsum(inboxes[1][0].payload * 3.0))
        np.testing.assert_array_equal(a.grad, 3.0)


class TestBandwidthReport:
    def _logs(self, channels):
        log = ChannelLog()
        broadcast_round([_msg(i, (channels, 32, 32), i) for i in range(2)], log)
        return log

    def test_rows_sorted_and_exact(self, tmp_path):
        runs = [{"run_id": "r1", "method": "disco", "ratio": 1, "log": self._logs(256)},
                {"run_id": "r64", "method": "disco", "ratio": 64, "log": self._logs(4)},
                {"run_id": "none", "method": "no_collaboration", "ratio": 0, "log": None}]
        reports = {"r1": _report(0.6), "r64": _report(0.5), "none": _report(0.3)}
        rows = bandwidth_report(runs, reports, tmp_path / "t.csv")
        assert [r["run_id"] if "run_id" in r else r["ratio"] for r in rows] == [0, 64, 1]
        assert rows[0]["bytes_per_frame_per_agent"] == 0
        assert rows[2]["bytes_per_frame_per_agent"] == 1_048_576
        assert rows[2]["bytes_per_frame_per_agent"] == 64 * rows[1]["bytes_per_frame_per_agent"]
        text = (tmp_path / "t.csv").read_text().splitlines()
        assert text[0] == "method,ratio,bytes_per_frame_per_agent,ap50,ap70"
        assert text[1].startswith("no_collaboration,0,0,")

    def test_mismatched_ids(self):
        with pytest.raises(KeyError):
            bandwidth_report([{"run_id": "a", "method": "m", "log": None}], {"b": _report(0.1)})

    def test_csv_formatting(self):
        text = tradeoff_csv([{"method": "m", "ratio": 4, "bytes_per_frame_per_agent": 1.5, "ap50": 0.25, "ap70": 0.0}])
        assert text.splitlines()[1] == "m,4,1.500,0.250000,0.000000"
