import socket
import struct
from dataclasses import replace

import dpkt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import golden, pcap_bytes
from flowsentry import pcap, synth
from flowsentry.errors import (
    BadMagic,
    MalformedHeader,
    NegativeRelativeTime,
    TruncatedRecord,
    UnsupportedLinkType,
)
from flowsentry.pcap import FEATURE_NAMES, extract_features, parse_packet


def dissect(frame):
    """Field values as the dpkt reference dissector sees them."""
    eth = dpkt.ethernet.Ethernet(frame)
    ip = eth.data
    out = {
        "src_ip": socket.inet_ntoa(ip.src),
        "dst_ip": socket.inet_ntoa(ip.dst),
        "ip_proto": ip.p,
        "ip_total_len": ip.len,
        "ip_flags": (ip.rf << 2) | (ip.df << 1) | ip.mf,
    }
    seg = ip.data
    if isinstance(seg, dpkt.tcp.TCP):
        out.update(src_port=seg.sport, dst_port=seg.dport, tcp_flags=seg.flags, tcp_win=seg.win,
                   tcp_ack=seg.ack, tcp_payload_len=len(seg.data))
    elif isinstance(seg, dpkt.udp.UDP):
        out.update(src_port=seg.sport, dst_port=seg.dport, udp_payload_len=len(seg.data))
    elif isinstance(seg, dpkt.icmp.ICMP):
        out.update(icmp_type=seg.type)
    return out


def test_three_tcp_records_match_reference_dissector(tmp_path, three_tcp):
    path = str(tmp_path / "three.pcap")
    synth.write_pcap(three_tcp, path)
    got = list(pcap.read_capture(path))
    assert [p.ts for p in got] == [p.ts for p in three_tcp]

    with open(path, "rb") as f:
        ref = [(ts, dissect(buf)) for ts, buf in dpkt.pcap.Reader(f)]
    assert len(ref) == 3
    for p, (ts, fields) in zip(got, ref):
        assert p.ts == pytest.approx(ts, abs=1e-6)
        for name, value in fields.items():
            assert getattr(p, name) == value, name


def test_bad_magic(write_bytes):
    with pytest.raises(BadMagic):
        pcap.read_capture(write_bytes(b"\x00" * 24))
    with pytest.raises(BadMagic):
        pcap.read_capture(write_bytes(b""))


def test_truncated_record_body(write_bytes, three_tcp):
    frame = synth.encode_packet(three_tcp[0])[:10]
    path = write_bytes(pcap_bytes([(1, 0, frame, 60)]))
    with pytest.raises(TruncatedRecord):
        list(pcap.read_capture(path))


def test_truncated_record_header(write_bytes):
    path = write_bytes(pcap_bytes([]) + b"\x01\x02\x03")
    with pytest.raises(TruncatedRecord):
        list(pcap.read_capture(path))


def test_unsupported_link_type(write_bytes):
    with pytest.raises(UnsupportedLinkType):
        pcap.read_capture(write_bytes(pcap_bytes([], linktype=105)))


@pytest.mark.parametrize("endian", ["<", ">"])
@pytest.mark.parametrize("magic,frac,expect_us", [(0xA1B2C3D4, 250_000, 250_000),
                                                   (0xA1B23C4D, 250_000_999, 250_000)])
def test_magic_variants(write_bytes, three_tcp, endian, magic, frac, expect_us):
    frame = synth.encode_packet(three_tcp[0])
    path = write_bytes(pcap_bytes([(100, frac, frame)], magic=magic, endian=endian))
    (p,) = list(pcap.read_capture(path))
    assert p.ts == pcap.ts_from_parts(100, expect_us)
    assert p.tcp_win == 64240


def test_raw_ip_linktype(write_bytes, three_tcp):
    frame = synth.encode_packet(three_tcp[2])[14:]
    path = write_bytes(pcap_bytes([(5, 0, frame)], linktype=pcap.LINKTYPE_RAW))
    (p,) = list(pcap.read_capture(path))
    assert p.tcp_payload_len == 120
    assert p.highest_layer == pcap.LAYER_HTTP


def test_parse_syn_segment():
    pkt = synth.tcp_packet(0.0, "10.0.0.1", "10.0.0.2", 4321, 80, synth.SYN, win=64240)
    frame = synth.encode_packet(pkt)
    p = parse_packet(frame, pcap.LINKTYPE_ETHERNET)
    assert (p.tcp_flags, p.tcp_win, p.udp_payload_len, p.icmp_type) == (0x02, 64240, 0, 0)
    assert dissect(frame)["tcp_flags"] == 0x02


def test_parse_icmp_echo():
    frame = synth.encode_packet(synth.icmp_packet(0.0, "10.0.0.5", "10.0.0.6"))
    p = parse_packet(frame, pcap.LINKTYPE_ETHERNET)
    assert p.icmp_type == 8
    assert (p.tcp_flags, p.tcp_win, p.tcp_ack, p.tcp_payload_len, p.udp_payload_len) == (0,) * 5
    assert (p.src_port, p.dst_port, p.highest_layer) == (0, 0, pcap.LAYER_ICMP)


def _arp_frame():
    return b"\xff" * 6 + b"\x02" * 6 + b"\x08\x06" + bytes(28)


def _ipv6_frame():
    return b"\xff" * 6 + b"\x02" * 6 + b"\x86\xdd" + b"\x60" + bytes(39)


def test_parse_arp_is_skipped():
    assert parse_packet(_arp_frame(), pcap.LINKTYPE_ETHERNET) is None


def test_parse_vlan_tagged_frame():
    frame = synth.encode_packet(synth.udp_packet(0.0, "10.0.0.1", "10.0.0.2", 5000, 53, 40))
    tagged = frame[:12] + b"\x81\x00\x00\x05" + frame[12:]
    p = parse_packet(tagged, pcap.LINKTYPE_ETHERNET)
    assert p.udp_payload_len == 40
    assert p.highest_layer == pcap.LAYER_DNS


def test_malformed_ihl():
    frame = bytearray(synth.encode_packet(synth.udp_packet(0.0, "1.1.1.1", "2.2.2.2", 1, 2, 0)))
    frame[14] = 0x4F  # 60-byte IP header, only 28 bytes present
    with pytest.raises(MalformedHeader):
        parse_packet(bytes(frame), pcap.LINKTYPE_ETHERNET)


def test_skip_accounting(write_bytes, three_tcp):
    frames = [synth.encode_packet(three_tcp[0]), _arp_frame(), _ipv6_frame(),
              synth.encode_packet(three_tcp[1])]
    bad = bytearray(frames[0])
    bad[14] = 0x4F
    frames.append(bytes(bad))
    reader = pcap.read_capture(write_bytes(pcap_bytes([(1, i, f) for i, f in enumerate(frames)])))
    packets = list(reader)
    assert len(packets) == reader.packets_emitted == 2
    assert reader.packets_skipped == 3
    assert reader.records == reader.packets_emitted + reader.packets_skipped


def test_highest_layer_vocabulary():
    code = pcap.highest_layer_code
    assert code(pcap.PROTO_UDP, 53000, 53) == pcap.LAYER_DNS
    assert code(pcap.PROTO_UDP, 5000, 5001) == pcap.LAYER_UDP
    assert code(pcap.PROTO_TCP, 8080, 40000) == pcap.LAYER_HTTP
    assert code(pcap.PROTO_TCP, 40000, 443) == pcap.LAYER_TLS
    assert code(pcap.PROTO_TCP, 40000, 22) == pcap.LAYER_TCP
    assert code(pcap.PROTO_ICMP) == pcap.LAYER_ICMP
    assert code(47) == pcap.LAYER_OTHER


def test_feature_order_golden():
    with open(golden("feature_order.txt")) as f:
        assert tuple(f.read().split()) == FEATURE_NAMES
    assert len(FEATURE_NAMES) == 11


def test_extract_features_identity_case(three_tcp):
    p = three_tcp[2]
    row = extract_features(p, p.ts)
    assert len(row) == 11
    assert row[0] == 0.0
    assert row[1:] == (p.ip_total_len, p.highest_layer, p.ip_flags, p.ip_proto,
                       p.tcp_payload_len, p.tcp_ack, p.tcp_flags, p.tcp_win,
                       p.udp_payload_len, p.icmp_type)


def test_extract_features_udp_zeroes_tcp_fields():
    p = synth.udp_packet(10.0, "10.0.0.1", "10.0.0.2", 5000, 9999, 128)
    row = dict(zip(FEATURE_NAMES, extract_features(p, 10.0)))
    assert row["udp_payload_len"] == 128
    assert row["tcp_payload_len"] == row["tcp_ack"] == row["tcp_flags"] == row["tcp_win"] == 0


def test_extract_features_syn_flood_fixture(tmp_path):
    spec = synth.SynthSpec(seed=3, benign_flows=0, attack_flows=1, attack_pps=10, duration=5,
                           attack_start_spread=0.0)
    path = str(tmp_path / "syn.pcap")
    synth.write_pcap(synth.generate(spec)[0], path)
    packets = list(pcap.read_capture(path))
    window_start = packets[0].ts
    p = replace(packets[7], ts=window_start + 2.5)
    row = extract_features(p, window_start)
    assert row[0] == pytest.approx(2.5, abs=1e-9)
    assert row[FEATURE_NAMES.index("tcp_flags")] == 2


def test_negative_relative_time(three_tcp):
    with pytest.raises(NegativeRelativeTime):
        extract_features(three_tcp[0], three_tcp[0].ts + 1.0)


ipv4 = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))
port = st.integers(0, 65535)


@st.composite
def raw_packets(draw):
    kind = draw(st.sampled_from(["tcp", "udp", "icmp"]))
    src, dst = draw(ipv4), draw(ipv4)
    if kind == "tcp":
        return synth.tcp_packet(0.0, src, dst, draw(port), draw(port), draw(st.integers(0, 255)),
                                draw(st.integers(0, 1400)), win=draw(port),
                                ack=draw(st.integers(0, 2**32 - 1)),
                                ip_flags=draw(st.integers(0, 7)))
    if kind == "udp":
        return synth.udp_packet(0.0, src, dst, draw(port), draw(port), draw(st.integers(0, 1400)),
                                ip_flags=draw(st.integers(0, 7)))
    return synth.icmp_packet(0.0, src, dst, draw(st.integers(0, 255)), draw(st.integers(0, 200)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(raw_packets(), st.integers(0, 3_000_000)), max_size=30))
def test_round_trip_property(tmp_path_factory, items):
    us = 1_546_300_800_000_000
    packets = []
    for p, gap in items:
        us += gap
        packets.append(replace(p, ts=pcap.ts_from_parts(*divmod(us, 1_000_000))))
    path = str(tmp_path_factory.mktemp("rt") / "rt.pcap")
    synth.write_pcap(packets, path)
    reader = pcap.read_capture(path)
    back = list(reader)
    assert back == packets
    assert reader.records == len(packets) and reader.packets_skipped == 0


def test_fragment_without_transport_is_skipped():
    frame = bytearray(synth.encode_packet(synth.udp_packet(0.0, "1.1.1.1", "2.2.2.2", 1, 2, 8)))
    struct.pack_into("!H", frame, 14 + 6, 100)  # fragment offset 100
    assert parse_packet(bytes(frame), pcap.LINKTYPE_ETHERNET) is None
