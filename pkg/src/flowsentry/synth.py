"""Deterministic benign/DDoS traffic generator and PCAP writer.

Benign traffic is a mix of short HTTP/TLS conversations and DNS lookups at a
low, jittered packet rate.  Attack flows run for the whole capture at a
fixed high rate from a small pool of source addresses toward one victim.
"""

import itertools
import json
import socket
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidSpec, UnsortedPackets
from .flows import LabelRule, canonical_flow_key, write_label_map
from .pcap import (
    LINKTYPE_ETHERNET,
    MAGIC_USEC,
    PROTO_ICMP,
    PROTO_TCP,
    PROTO_UDP,
    RawPacket,
    highest_layer_code,
    ts_from_parts,
    ts_to_parts,
)

ATTACK_TYPES = ("syn", "udp", "http", "mixed")

SYN, ACK, PSH, FIN = 0x02, 0x10, 0x08, 0x01
DF = 0x2

VICTIM = "192.168.50.1"
_OS_WINDOWS = (64240, 65535, 29200, 5840)
_SRC_MAC = bytes.fromhex("020000000001")
_DST_MAC = bytes.fromhex("020000000002")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 7
    duration: float = 60.0
    benign_flows: int = 300
    attack_flows: int = 300
    attack_type: str = "syn"
    benign_pps: float = 2.0
    benign_payload: tuple = (40, 1400)
    attack_pps: float = 20.0
    source_pool: int = 50
    benign_failed: float = 0.1  # share of benign flows that are unanswered SYN retries
    attack_start_spread: float = 0.5  # attack flows start uniformly in [0, spread*duration)
    start_time: float = 1546300800.0

    def validate(self):
        if self.attack_type not in ATTACK_TYPES:
            raise InvalidSpec(f"attack_type must be one of {ATTACK_TYPES}, got {self.attack_type!r}")
        if self.benign_flows < 0 or self.attack_flows < 0:
            raise InvalidSpec("flow counts must be >= 0")
        if not self.duration > 0:
            raise InvalidSpec("duration must be > 0")
        if not (self.benign_pps > 0 and self.attack_pps > 0):
            raise InvalidSpec("packet rates must be > 0")
        if self.source_pool < 1:
            raise InvalidSpec("source_pool must be >= 1")
        if not (0.0 <= self.benign_failed <= 1.0 and 0.0 <= self.attack_start_spread < 1.0):
            raise InvalidSpec("benign_failed must be in [0, 1] and attack_start_spread in [0, 1)")
        lo, hi = self.benign_payload
        if not 0 <= lo <= hi <= 1460:
            raise InvalidSpec(f"benign payload range {self.benign_payload} outside 0..1460")


def tcp_packet(ts, src, dst, sport, dport, flags, payload=0, win=64240, ack=0, ip_flags=DF):
    return RawPacket(ts, src, dst, sport, dport, PROTO_TCP, 40 + payload, ip_flags,
                     tcp_flags=flags, tcp_win=win, tcp_ack=ack if flags & ACK else 0,
                     tcp_payload_len=payload,
                     highest_layer=highest_layer_code(PROTO_TCP, sport, dport))


def udp_packet(ts, src, dst, sport, dport, payload, ip_flags=0):
    return RawPacket(ts, src, dst, sport, dport, PROTO_UDP, 28 + payload, ip_flags,
                     udp_payload_len=payload,
                     highest_layer=highest_layer_code(PROTO_UDP, sport, dport))


def icmp_packet(ts, src, dst, icmp_type=8, payload=56):
    return RawPacket(ts, src, dst, 0, 0, PROTO_ICMP, 28 + payload, 0, icmp_type=icmp_type,
                     highest_layer=highest_layer_code(PROTO_ICMP))


class _Flow:
    """One flow's packets as (microsecond, creation order, builder, args, kwargs)."""

    def __init__(self, gen, label):
        self.gen = gen
        self.label = label
        self.events = []

    def add(self, us, build, *args, **kw):
        self.events.append((us, next(self.gen.order), build, args, kw))


class _Generator:
    def __init__(self, spec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.base_us = round(spec.start_time * 1e6)
        self.span_us = round(spec.duration * 1e6)
        self.used = set()
        self.order = itertools.count()
        self.flows = []

    def port(self):
        return int(self.rng.integers(1024, 65536))

    def unique_endpoint(self, src, dst, dport, proto):
        while True:
            sport = self.port()
            k = (src, sport, dst, dport, proto)
            if k not in self.used:
                self.used.add(k)
                return sport

    def seq(self):
        return int(self.rng.integers(0, 2**32))

    def jittered_times(self, start_us, end_us, pps):
        # exponential gaps, always at least one packet
        times, now = [], start_us
        while now < end_us or not times:
            times.append(now)
            now += max(1, int(self.rng.exponential(1e6 / pps)))
        return times

    def paced_times(self, start_us, count, pps):
        slot = 1e6 / pps
        offsets = self.rng.uniform(0.0, 0.9, size=count)
        return [min(start_us + int((i + o) * slot), self.span_us - 1)
                for i, o in enumerate(offsets)]

    # -- benign ---------------------------------------------------------------

    def benign(self, i):
        spec = self.spec
        client = f"192.168.{10 + (i // 250) % 40}.{1 + i % 250}"
        start = int(self.rng.uniform(0, 0.9) * self.span_us)
        life = int(self.rng.uniform(0.05, 0.6) * self.span_us)
        end = min(start + life, self.span_us - 1)
        times = self.jittered_times(start, end, spec.benign_pps)
        lo, hi = spec.benign_payload
        flow = _Flow(self, 0)
        kind = self.rng.choice(["http", "tls", "dns"], p=[0.45, 0.3, 0.25])
        if self.rng.random() < spec.benign_failed:
            # connection attempt to a dead server: SYN plus backed-off retries
            server = f"172.16.2.{1 + int(self.rng.integers(0, 20))}"
            dport = 80 if kind == "http" else 443
            sport = self.unique_endpoint(client, server, dport, PROTO_TCP)
            win = int(self.rng.choice(_OS_WINDOWS))
            gap, us = 1_000_000, start
            for _ in range(int(self.rng.integers(1, 5))):
                if us >= self.span_us:
                    break
                flow.add(us, tcp_packet, client, server, sport, dport, SYN, 0, win=win)
                us += gap
                gap *= 2
        elif kind == "dns":
            server = f"172.16.0.{53 + int(self.rng.integers(0, 3))}"
            sport = self.unique_endpoint(client, server, 53, PROTO_UDP)
            for j, us in enumerate(times):
                if j % 2 == 0:
                    flow.add(us, udp_packet, client, server, sport, 53, int(self.rng.integers(28, 64)))
                else:
                    flow.add(us, udp_packet, server, client, 53, sport,
                             int(self.rng.integers(60, min(hi, 512) + 1)), ip_flags=DF)
        else:
            dport = 80 if kind == "http" else 443
            server = f"172.16.1.{1 + int(self.rng.integers(0, 20))}"
            sport = self.unique_endpoint(client, server, dport, PROTO_TCP)
            cseq, sseq = self.seq(), self.seq()
            win_c = int(self.rng.choice([64240, 65535, 29200]))
            script = [("c", SYN, 0), ("s", SYN | ACK, 0), ("c", ACK, 0)]
            while len(script) < len(times) - 2:
                script.append(("c", PSH | ACK, int(self.rng.integers(lo, min(hi, 600) + 1))))
                script.append(("s", PSH | ACK, int(self.rng.integers(lo, hi + 1))))
            script += [("c", FIN | ACK, 0), ("s", FIN | ACK, 0)]
            if len(times) < len(script):
                step = max(1, (end - start) // len(script))
                times = [start + k * step for k in range(len(script))]
            for us, (side, flags, payload) in zip(times, script):
                if side == "c":
                    flow.add(us, tcp_packet, client, server, sport, dport, flags, payload,
                             win=win_c, ack=sseq)
                    cseq = (cseq + payload + (1 if flags & (SYN | FIN) else 0)) % 2**32
                else:
                    flow.add(us, tcp_packet, server, client, dport, sport, flags, payload,
                             win=65160, ack=cseq)
                    sseq = (sseq + payload + (1 if flags & (SYN | FIN) else 0)) % 2**32
        self.flows.append(flow)

    # -- attacks --------------------------------------------------------------

    def attack(self, kind):
        spec = self.spec
        pick = int(self.rng.integers(0, spec.source_pool))
        src = f"10.{66 + pick // 62500 % 4}.{pick // 250 % 250}.{1 + pick % 250}"
        start = int(self.rng.uniform(0.0, spec.attack_start_spread) * self.span_us)
        count = max(1, round(spec.attack_pps * (self.span_us - start) / 1e6))
        times = self.paced_times(start, count, spec.attack_pps)
        flow = _Flow(self, 1)
        if kind == "syn":
            sport = self.unique_endpoint(src, VICTIM, 80, PROTO_TCP)
            win = int(self.rng.choice(_OS_WINDOWS + (512, 1024, 2048)))
            ip_flags = int(self.rng.choice([0, DF]))
            for us in times:
                flow.add(us, tcp_packet, src, VICTIM, sport, 80, SYN, 0, win=win,
                         ip_flags=ip_flags)
        elif kind == "udp":
            dport = int(self.rng.integers(1, 65536))
            sport = self.unique_endpoint(src, VICTIM, dport, PROTO_UDP)
            size = int(self.rng.choice([512, 1024, 1400]))
            for us in times:
                flow.add(us, udp_packet, src, VICTIM, sport, dport, size)
        else:
            sport = self.unique_endpoint(src, VICTIM, 80, PROTO_TCP)
            cseq, sseq = self.seq(), self.seq()
            script = [("c", SYN), ("s", SYN | ACK), ("c", ACK)]
            script += [("c", PSH | ACK)] * max(0, count - 3)
            for us, (side, flags) in zip(times, script):
                if side == "c":
                    payload = int(self.rng.integers(60, 121)) if flags & PSH else 0
                    flow.add(us, tcp_packet, src, VICTIM, sport, 80, flags, payload, win=8192,
                             ack=sseq)
                    cseq = (cseq + payload + (1 if flags & SYN else 0)) % 2**32
                else:
                    flow.add(us, tcp_packet, VICTIM, src, 80, sport, flags, 0, win=65160,
                             ack=cseq)
                    sseq = (sseq + 1) % 2**32
        self.flows.append(flow)

    def run(self):
        spec = self.spec
        for i in range(spec.benign_flows):
            self.benign(i)
        kinds = ("syn", "udp", "http")
        for _ in range(spec.attack_flows):
            kind = spec.attack_type
            if kind == "mixed":
                kind = kinds[int(self.rng.integers(0, 3))]
            self.attack(kind)

        events = sorted(e for flow in self.flows for e in flow.events)
        labels = {}
        packets = []
        for us, _, build, args, kw in events:
            ts = ts_from_parts(*divmod(self.base_us + us, 1_000_000))
            packets.append(build(ts, *args, **kw))
        for flow in self.flows:
            _, _, build, args, kw = flow.events[0]
            key = canonical_flow_key(build(0.0, *args, **kw))
            labels[key] = flow.label
        return packets, labels


def generate(spec):
    """Packets (time-sorted RawPackets) and a {FlowKey: label} map for a spec."""
    spec.validate()
    return _Generator(spec).run()


def label_rules(labels):
    return [LabelRule.exact(key, label) for key, label in labels.items()]


def encode_packet(p):
    """Ethernet/IPv4 frame bytes for a RawPacket; checksums left at zero."""
    if p.ip_proto == PROTO_TCP:
        seg = struct.pack("!HHIIHHHH", p.src_port, p.dst_port, 0, p.tcp_ack,
                          (5 << 12) | p.tcp_flags, p.tcp_win, 0, 0)
    elif p.ip_proto == PROTO_UDP:
        seg = struct.pack("!HHHH", p.src_port, p.dst_port, p.ip_total_len - 20, 0)
    elif p.ip_proto == PROTO_ICMP:
        seg = struct.pack("!BBHI", p.icmp_type, 0, 0, 0)
    else:
        seg = b""
    payload = p.ip_total_len - 20 - len(seg)
    if payload < 0:
        raise ValueError(f"ip_total_len {p.ip_total_len} too small for protocol {p.ip_proto}")
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, p.ip_total_len, 0, p.ip_flags << 13, 64,
                     p.ip_proto, 0, socket.inet_aton(p.src_ip), socket.inet_aton(p.dst_ip))
    return _DST_MAC + _SRC_MAC + b"\x08\x00" + ip + seg + bytes(payload)


def write_pcap(packets, path):
    prev = None
    for i, p in enumerate(packets):
        if prev is not None and p.ts < prev:
            raise UnsortedPackets(f"packet {i} at {p.ts} precedes previous at {prev}")
        prev = p.ts
    with open(path, "wb") as f:
        f.write(struct.pack("<IHHiIII", MAGIC_USEC, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        for p in packets:
            frame = encode_packet(p)
            sec, usec = ts_to_parts(p.ts)
            f.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
            f.write(frame)


def write_labels(labels, path):
    """Label CSV with one exact rule per flow key."""
    write_label_map(label_rules(labels), path)


def write_spec(spec, path):
    with open(path, "w") as f:
        json.dump(asdict(spec), f, indent=1, sort_keys=True)
        f.write("\n")
