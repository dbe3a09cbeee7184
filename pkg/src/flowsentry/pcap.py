"""Classic PCAP reading and per-packet header decoding.

Only Ethernet (linktype 1) and raw IPv4 (linktype 101) captures are
understood. Anything that is not IPv4 carrying TCP, UDP or ICMP is counted
and skipped rather than raised, since real captures are full of ARP, IPv6
and friends.
"""

import logging
import socket
import struct
from dataclasses import dataclass

from .errors import (
    BadMagic,
    MalformedHeader,
    NegativeRelativeTime,
    TruncatedRecord,
    UnsupportedLinkType,
)

log = logging.getLogger(__name__)

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = (0x8100, 0x88A8)

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

# highest_layer vocabulary
LAYER_OTHER = 0
LAYER_ICMP = 1
LAYER_UDP = 2
LAYER_TCP = 3
LAYER_DNS = 4
LAYER_HTTP = 5
LAYER_TLS = 6

# Public contract: column order of every feature matrix in the pipeline.
FEATURE_NAMES = (
    "rel_ts",
    "ip_total_len",
    "highest_layer",
    "ip_flags",
    "ip_proto",
    "tcp_payload_len",
    "tcp_ack",
    "tcp_flags",
    "tcp_win",
    "udp_payload_len",
    "icmp_type",
)
N_FEATURES = len(FEATURE_NAMES)


@dataclass(frozen=True, slots=True)
class RawPacket:
    ts: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    ip_proto: int
    ip_total_len: int
    ip_flags: int = 0
    tcp_flags: int = 0
    tcp_win: int = 0
    tcp_ack: int = 0
    tcp_payload_len: int = 0
    udp_payload_len: int = 0
    icmp_type: int = 0
    highest_layer: int = LAYER_OTHER


def highest_layer_code(proto, src_port=0, dst_port=0):
    """Port-based guess of the innermost protocol, see LAYER_* constants."""
    if proto == PROTO_ICMP:
        return LAYER_ICMP
    ports = (src_port, dst_port)
    if proto == PROTO_UDP:
        return LAYER_DNS if 53 in ports else LAYER_UDP
    if proto == PROTO_TCP:
        if 80 in ports or 8080 in ports:
            return LAYER_HTTP
        if 443 in ports:
            return LAYER_TLS
        return LAYER_TCP
    return LAYER_OTHER


def ts_from_parts(sec, usec):
    # Single conversion path so writers and readers agree bit-for-bit.
    return (sec * 1_000_000 + usec) / 1e6


def ts_to_parts(ts):
    us = round(ts * 1e6)
    return divmod(us, 1_000_000)


def parse_packet(data, link_type, ts=0.0):
    """Decode one record body. Returns None for frames we do not model."""
    if link_type == LINKTYPE_ETHERNET:
        if len(data) < 14:
            return None
        (ethertype,) = struct.unpack_from("!H", data, 12)
        off = 14
        while ethertype in ETHERTYPE_VLAN:
            if len(data) < off + 4:
                return None
            (ethertype,) = struct.unpack_from("!H", data, off + 2)
            off += 4
        if ethertype != ETHERTYPE_IPV4:
            return None
        ip = data[off:]
    elif link_type == LINKTYPE_RAW:
        ip = data
    else:
        raise UnsupportedLinkType(f"link type {link_type}")

    if len(ip) < 1 or ip[0] >> 4 != 4:
        return None
    ihl = (ip[0] & 0x0F) * 4
    if ihl < 20 or len(ip) < ihl:
        raise MalformedHeader(f"IPv4 header length {ihl} with {len(ip)} bytes available")
    total_len, flags_frag, proto = struct.unpack_from("!H2xH1xB", ip, 2)
    if total_len < ihl:
        raise MalformedHeader(f"IPv4 total length {total_len} shorter than header {ihl}")
    if flags_frag & 0x1FFF:
        # non-first fragment: no transport header to read
        return None
    src_ip = socket.inet_ntoa(ip[12:16])
    dst_ip = socket.inet_ntoa(ip[16:20])
    seg = ip[ihl:]
    ip_flags = flags_frag >> 13

    if proto == PROTO_TCP:
        if len(seg) < 20:
            raise MalformedHeader("TCP header truncated")
        sport, dport, ack, off_flags, win = struct.unpack_from("!HH4xIHH", seg)
        thl = (off_flags >> 12) * 4
        if thl < 20:
            raise MalformedHeader(f"TCP data offset {thl}")
        return RawPacket(
            ts, src_ip, dst_ip, sport, dport, proto, total_len, ip_flags,
            tcp_flags=off_flags & 0xFF,
            tcp_win=win,
            tcp_ack=ack,
            tcp_payload_len=max(total_len - ihl - thl, 0),
            highest_layer=highest_layer_code(proto, sport, dport),
        )
    if proto == PROTO_UDP:
        if len(seg) < 8:
            raise MalformedHeader("UDP header truncated")
        sport, dport = struct.unpack_from("!HH", seg)
        return RawPacket(
            ts, src_ip, dst_ip, sport, dport, proto, total_len, ip_flags,
            udp_payload_len=max(total_len - ihl - 8, 0),
            highest_layer=highest_layer_code(proto, sport, dport),
        )
    if proto == PROTO_ICMP:
        if len(seg) < 1:
            raise MalformedHeader("ICMP header truncated")
        return RawPacket(
            ts, src_ip, dst_ip, 0, 0, proto, total_len, ip_flags,
            icmp_type=seg[0],
            highest_layer=LAYER_ICMP,
        )
    return None


class PcapReader:
    """Iterate RawPackets from a classic PCAP file.

    Counters are filled in as iteration proceeds::

        reader = PcapReader("trace.pcap")
        packets = list(reader)
        reader.records == reader.packets_emitted + reader.packets_skipped
    """

    def __init__(self, path):
        self.path = path
        self.records = 0
        self.packets_emitted = 0
        self.packets_skipped = 0
        self.malformed = 0
        with open(path, "rb") as f:
            header = f.read(GLOBAL_HEADER_LEN)
        if len(header) < 4:
            raise BadMagic(f"{path}: file too short for a PCAP header")
        magic_le = struct.unpack_from("<I", header)[0]
        magic_be = struct.unpack_from(">I", header)[0]
        if magic_le in (MAGIC_USEC, MAGIC_NSEC):
            self.endian = "<"
            magic = magic_le
        elif magic_be in (MAGIC_USEC, MAGIC_NSEC):
            self.endian = ">"
            magic = magic_be
        else:
            raise BadMagic(f"{path}: unrecognized magic 0x{magic_le:08x}")
        if len(header) < GLOBAL_HEADER_LEN:
            raise TruncatedRecord(f"{path}: global header is {len(header)} bytes")
        self.nanosecond = magic == MAGIC_NSEC
        self.version = struct.unpack_from(self.endian + "HH", header, 4)
        self.link_type = struct.unpack_from(self.endian + "I", header, 20)[0] & 0x0FFFFFFF
        if self.link_type not in (LINKTYPE_ETHERNET, LINKTYPE_RAW):
            raise UnsupportedLinkType(f"{path}: link type {self.link_type}")

    def __iter__(self):
        rec_fmt = self.endian + "IIII"
        with open(self.path, "rb") as f:
            f.seek(GLOBAL_HEADER_LEN)
            while True:
                hdr = f.read(RECORD_HEADER_LEN)
                if not hdr:
                    break
                if len(hdr) < RECORD_HEADER_LEN:
                    raise TruncatedRecord(
                        f"record {self.records}: header has {len(hdr)} of 16 bytes")
                sec, frac, incl_len, _orig_len = struct.unpack(rec_fmt, hdr)
                body = f.read(incl_len)
                if len(body) < incl_len:
                    raise TruncatedRecord(
                        f"record {self.records}: declared {incl_len} bytes, found {len(body)}")
                self.records += 1
                if self.nanosecond:
                    frac //= 1000
                try:
                    pkt = parse_packet(body, self.link_type, ts_from_parts(sec, frac))
                except MalformedHeader as exc:
                    log.debug("record %d skipped: %s", self.records - 1, exc)
                    self.malformed += 1
                    pkt = None
                if pkt is None:
                    self.packets_skipped += 1
                    continue
                self.packets_emitted += 1
                yield pkt


def read_capture(path):
    """Open a capture for streaming; see PcapReader for the skip counters."""
    return PcapReader(path)


def extract_features(p, window_start):
    """The 11-value feature row of one packet, ordered as FEATURE_NAMES."""
    rel = p.ts - window_start
    if rel < 0:
        raise NegativeRelativeTime(f"packet at {p.ts} precedes window start {window_start}")
    return (
        rel,
        float(p.ip_total_len),
        float(p.highest_layer),
        float(p.ip_flags),
        float(p.ip_proto),
        float(p.tcp_payload_len),
        float(p.tcp_ack),
        float(p.tcp_flags),
        float(p.tcp_win),
        float(p.udp_payload_len),
        float(p.icmp_type),
    )
