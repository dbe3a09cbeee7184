import os
import struct
import sys

import pytest

from flowsentry import synth

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def golden(name):
    return os.path.join(GOLDEN, name)


def pcap_bytes(records, magic=0xA1B2C3D4, linktype=1, endian="<"):
    """Hand-rolled classic PCAP: records are (sec, frac, frame_bytes[, declared_len])."""
    out = [struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)]
    for rec in records:
        sec, frac, frame = rec[:3]
        declared = rec[3] if len(rec) > 3 else len(frame)
        out.append(struct.pack(endian + "IIII", sec, frac, declared, declared))
        out.append(frame)
    return b"".join(out)


@pytest.fixture
def write_bytes(tmp_path):
    def _write(data, name="x.pcap"):
        path = tmp_path / name
        path.write_bytes(data)
        return str(path)
    return _write


@pytest.fixture
def three_tcp():
    t0 = 1546300800.0
    return [
        synth.tcp_packet(t0, "10.0.0.1", "10.0.0.2", 4321, 80, synth.SYN, win=64240),
        synth.tcp_packet(t0 + 0.25, "10.0.0.2", "10.0.0.1", 80, 4321, synth.SYN | synth.ACK,
                         win=65160, ack=1001),
        synth.tcp_packet(t0 + 0.5, "10.0.0.1", "10.0.0.2", 4321, 80, synth.PSH | synth.ACK, 120,
                         ack=5001),
    ]


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
