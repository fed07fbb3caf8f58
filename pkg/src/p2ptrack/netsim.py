"""Deterministic discrete-event network substrate.

Hosts (optionally behind NAT middleboxes) exchange UDP/TCP packets over
links with seeded latency jitter.  Every packet carries a 16-bit IP-ID
drawn from its sender's generator; NATs rewrite addresses and ports but
never touch the IP-ID.  Capture taps record traffic at host edges or at
a NAT's public side, with addresses as seen at that point.

The loop is single threaded: events run in (time, insertion) order, so a
given (topology, seed) always produces byte-identical traces.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Callable, Optional

IPID_MOD = 1 << 16

IPID_SEQUENTIAL_GLOBAL = "sequential_global"
IPID_SEQUENTIAL_PER_FLOW = "sequential_per_flow"
IPID_RANDOM = "random"
IPID_MODELS = (IPID_SEQUENTIAL_GLOBAL, IPID_SEQUENTIAL_PER_FLOW, IPID_RANDOM)


class NetsimError(Exception):
    pass


def ip_str(ip: int) -> str:
    return f"{ip >> 24 & 255}.{ip >> 16 & 255}.{ip >> 8 & 255}.{ip & 255}"


def parse_ip(text: str) -> int:
    parts = text.strip().split(".")
    if len(parts) != 4:
        raise NetsimError(f"bad IPv4 address {text!r}")
    value = 0
    for p in parts:
        try:
            octet = int(p)
        except ValueError:
            raise NetsimError(f"bad IPv4 address {text!r}") from None
        if not 0 <= octet <= 255:
            raise NetsimError(f"bad IPv4 address {text!r}")
        value = (value << 8) | octet
    return value


@dataclass(frozen=True, slots=True)
class SimPacket:
    """One captured datagram, addresses as seen at the capture point."""

    t_send: float
    t_recv: float
    src_ip: int
    src_port: int
    dst_ip: int
    dst_port: int
    proto: str  # "TCP" | "UDP"
    tcp_flags: frozenset
    size: int
    ip_id: int


@dataclass(slots=True)
class SimClock:
    now: float = 0.0


@dataclass(frozen=True, slots=True)
class Event:
    t: float
    kind: str  # "deliver" | "drop" | "send"
    detail: str
    packet: Optional[SimPacket] = None


class Host:
    """A network endpoint with its own IP-ID generator and packet handler.

    An explicit ipid_start fixes the counter (and, for the per-flow model,
    every flow's initial value); by default counters start at seeded
    random offsets, per flow for the per-flow model, the way real stacks
    behave."""

    __slots__ = (
        "host_id", "ip", "nat", "ipid_model", "os_label", "handler",
        "port_handlers", "egress_filters", "ingress_filters",
        "_counter", "_flow_counters", "_flow_start", "_rng",
    )

    def __init__(self, host_id: str, ip: int, nat: Optional[str],
                 ipid_model: str, ipid_start: Optional[int],
                 os_label: str, seed):
        if ipid_model not in IPID_MODELS:
            raise NetsimError(f"unknown ipid model {ipid_model!r}")
        self.host_id = host_id
        self.ip = ip
        self.nat = nat
        self.ipid_model = ipid_model
        self.os_label = os_label
        self.handler: Optional[Callable] = None
        self.port_handlers: dict = {}
        self.egress_filters: list = []
        self.ingress_filters: list = []
        self._rng = random.Random(f"{seed}:ipid:{host_id}")
        self._flow_start = ipid_start   # None: random offset per flow
        if ipid_start is None:
            ipid_start = self._rng.randrange(IPID_MOD)
        self._counter = ipid_start % IPID_MOD
        self._flow_counters: dict = {}

    def next_ipid(self, flow_key) -> int:
        if self.ipid_model == IPID_SEQUENTIAL_GLOBAL:
            value = self._counter
            self._counter = (self._counter + 1) % IPID_MOD
            return value
        if self.ipid_model == IPID_SEQUENTIAL_PER_FLOW:
            value = self._flow_counters.get(flow_key)
            if value is None:
                value = self._flow_start if self._flow_start is not None \
                    else self._rng.randrange(IPID_MOD)
                value %= IPID_MOD
            self._flow_counters[flow_key] = (value + 1) % IPID_MOD
            return value
        return self._rng.randrange(IPID_MOD)


class NatBox:
    """Port-translating middlebox.  Bindings never expire within a scenario
    and the IP-ID field passes through untouched."""

    __slots__ = ("nat_id", "public_ip", "accepts_unsolicited_inbound",
                 "port_map", "reverse", "remotes", "_next_port")

    def __init__(self, nat_id: str, public_ip: int,
                 accepts_unsolicited_inbound: bool = False,
                 port_base: int = 40000):
        self.nat_id = nat_id
        self.public_ip = public_ip
        self.accepts_unsolicited_inbound = accepts_unsolicited_inbound
        self.port_map: dict = {}   # (priv_ip, priv_port, proto) -> pub_port
        self.reverse: dict = {}    # (pub_port, proto) -> (priv_ip, priv_port)
        self.remotes: dict = {}    # (pub_port, proto) -> set of contacted ips
        self._next_port = port_base

    def bind(self, priv_ip: int, priv_port: int, proto: str) -> int:
        key = (priv_ip, priv_port, proto)
        pub = self.port_map.get(key)
        if pub is None:
            pub = self._alloc_port(proto)
            self.port_map[key] = pub
            self.reverse[(pub, proto)] = (priv_ip, priv_port)
            self.remotes[(pub, proto)] = set()
        return pub

    def forward(self, priv_ip: int, priv_port: int, proto: str,
                public_port: Optional[int] = None) -> int:
        """Static UPnP-style mapping created at configuration time."""
        key = (priv_ip, priv_port, proto)
        if key in self.port_map:
            return self.port_map[key]
        if public_port is None:
            public_port = priv_port if (priv_port, proto) not in self.reverse \
                else self._alloc_port(proto)
        elif (public_port, proto) in self.reverse:
            raise NetsimError(
                f"NAT {self.nat_id}: public port {public_port}/{proto} taken")
        self.port_map[key] = public_port
        self.reverse[(public_port, proto)] = (priv_ip, priv_port)
        self.remotes[(public_port, proto)] = set()
        return public_port

    def public_endpoint(self, priv_ip: int, priv_port: int,
                        proto: str) -> Optional[tuple]:
        pub = self.port_map.get((priv_ip, priv_port, proto))
        if pub is None:
            return None
        return (self.public_ip, pub)

    def _alloc_port(self, proto: str) -> int:
        while (self._next_port, proto) in self.reverse:
            self._next_port += 1
        port = self._next_port
        self._next_port += 1
        return port


class CaptureTap:
    """Ordered packet capture at one attach point."""

    __slots__ = ("attach", "_entries", "_sorted")

    def __init__(self, attach: str):
        self.attach = attach
        self._entries: list = []   # (obs_t, src_ip, src_port, emit_seq, pkt)
        self._sorted = True

    def record(self, obs_t: float, emit_seq: int, pkt: SimPacket) -> None:
        if self._entries and obs_t < self._entries[-1][0]:
            self._sorted = False
        self._entries.append((obs_t, pkt.src_ip, pkt.src_port, emit_seq, pkt))

    def trace(self) -> list:
        """Packets ordered by observation time, ties by (src ip, src port,
        emission sequence)."""
        if not self._sorted:
            self._entries.sort(key=lambda e: e[:4])
            self._sorted = True
        return [e[4] for e in self._entries]

    def entries(self) -> list:
        if not self._sorted:
            self._entries.sort(key=lambda e: e[:4])
            self._sorted = True
        return list(self._entries)

    def clear(self) -> None:
        self._entries.clear()
        self._sorted = True

    def __len__(self) -> int:
        return len(self._entries)


class Simulator:
    """Single-threaded deterministic event loop."""

    def __init__(self, seed=0, default_latency: float = 0.05,
                 default_jitter: float = 0.01):
        self.seed = seed
        self.clock = SimClock()
        self.default_latency = default_latency
        self.default_jitter = default_jitter
        self.hosts: dict = {}
        self.nats: dict = {}
        self.drops: list = []
        self._heap: list = []
        self._evseq = 0
        self._emit_seq = 0
        self._ip_host: dict = {}       # public ip -> host_id
        self._ip_nat: dict = {}        # public ip -> nat_id
        self._nat_members: dict = {}   # nat_id -> {priv_ip: host_id}
        self._taps: dict = {}          # attach key -> CaptureTap
        self._links: dict = {}         # frozenset({a, b}) -> (latency, jitter)
        self._jitter_rng = random.Random(f"{seed}:netsim:jitter")

    @property
    def now(self) -> float:
        return self.clock.now

    # -- topology ---------------------------------------------------------

    def add_nat(self, nat_id: str, public_ip, accepts_unsolicited_inbound=False,
                port_base: int = 40000) -> NatBox:
        if isinstance(public_ip, str):
            public_ip = parse_ip(public_ip)
        if nat_id in self.nats:
            raise NetsimError(f"duplicate NAT id {nat_id!r}")
        if public_ip in self._ip_nat or public_ip in self._ip_host:
            raise NetsimError(f"public IP {ip_str(public_ip)} already in use")
        box = NatBox(nat_id, public_ip, accepts_unsolicited_inbound, port_base)
        self.nats[nat_id] = box
        self._ip_nat[public_ip] = nat_id
        self._nat_members[nat_id] = {}
        return box

    def add_host(self, host_id: str, ip, nat: Optional[str] = None,
                 ipid_model: str = IPID_SEQUENTIAL_GLOBAL,
                 ipid_start: Optional[int] = None,
                 os_label: str = "windows7") -> Host:
        if isinstance(ip, str):
            ip = parse_ip(ip)
        if host_id in self.hosts:
            raise NetsimError(f"duplicate host id {host_id!r}")
        if nat is None:
            if ip in self._ip_host or ip in self._ip_nat:
                raise NetsimError(f"public IP {ip_str(ip)} already in use")
        else:
            if nat not in self.nats:
                raise NetsimError(f"unknown NAT {nat!r}")
            members = self._nat_members[nat]
            if ip in members:
                raise NetsimError(
                    f"private IP {ip_str(ip)} duplicated behind NAT {nat}")
        host = Host(host_id, ip, nat, ipid_model, ipid_start, os_label,
                    self.seed)
        self.hosts[host_id] = host
        if nat is None:
            self._ip_host[ip] = host_id
        else:
            self._nat_members[nat][ip] = host_id
        return host

    def set_link(self, a: str, b: str, latency: float, jitter: float = 0.0):
        self._links[frozenset((a, b))] = (latency, jitter)

    def set_handler(self, host_id: str, handler: Callable) -> None:
        self.hosts[host_id].handler = handler

    def set_port_handler(self, host_id: str, port: int,
                         handler: Callable) -> None:
        self.hosts[host_id].port_handlers[port] = handler

    def public_ip_of(self, host_id: str) -> int:
        host = self.hosts[host_id]
        if host.nat is None:
            return host.ip
        return self.nats[host.nat].public_ip

    def tap(self, host_id: str) -> CaptureTap:
        if host_id not in self.hosts:
            raise NetsimError(f"unknown host {host_id!r}")
        key = ("host", host_id)
        if key not in self._taps:
            self._taps[key] = CaptureTap(host_id)
        return self._taps[key]

    def tap_nat(self, nat_id: str) -> CaptureTap:
        if nat_id not in self.nats:
            raise NetsimError(f"unknown NAT {nat_id!r}")
        key = ("nat", nat_id)
        if key not in self._taps:
            self._taps[key] = CaptureTap(nat_id)
        return self._taps[key]

    # -- scheduling -------------------------------------------------------

    def schedule(self, at: float, fn: Callable) -> int:
        if at < self.clock.now:
            raise NetsimError(
                f"cannot schedule at {at} before now {self.clock.now}")
        self._evseq += 1
        heapq.heappush(self._heap, (at, self._evseq, fn))
        return self._evseq

    def schedule_send(self, src: str, dst_ip, dst_port: int, proto: str,
                      size: int, flags=(), at: Optional[float] = None,
                      src_port: int = 0, payload: Optional[bytes] = None) -> int:
        if src not in self.hosts:
            raise NetsimError(f"unknown host {src!r}")
        if isinstance(dst_ip, str):
            dst_ip = parse_ip(dst_ip)
        if at is None:
            at = self.clock.now
        fl = frozenset(flags)
        return self.schedule(
            at, lambda: self._emit(src, src_port, dst_ip, dst_port, proto,
                                   size, fl, payload))

    def advance(self, until: float, collect: bool = False) -> list:
        """Run all events with time <= until; returns executed-event records
        when collect is set (kept off in bulk runs to avoid huge lists)."""
        if until < self.clock.now:
            raise NetsimError(
                f"cannot advance to {until} before now {self.clock.now}")
        events = [] if collect else None
        self._collect = events
        while self._heap and self._heap[0][0] <= until:
            t, _, fn = heapq.heappop(self._heap)
            self.clock.now = t
            fn()
        self.clock.now = until
        self._collect = None
        return events if events is not None else []

    # -- datapath ---------------------------------------------------------

    def _note(self, kind: str, detail: str, pkt: Optional[SimPacket]) -> None:
        collect = getattr(self, "_collect", None)
        if collect is not None:
            collect.append(Event(self.clock.now, kind, detail, pkt))

    def _drop(self, reason: str, pkt: SimPacket) -> None:
        self.drops.append((self.clock.now, reason, pkt))
        self._note("drop", reason, pkt)

    def _link_params(self, src_id: str, dst_end: str) -> tuple:
        link = self._links.get(frozenset((src_id, dst_end)))
        if link is None:
            return (self.default_latency, self.default_jitter)
        return link

    def _emit(self, src: str, src_port: int, dst_ip: int, dst_port: int,
              proto: str, size: int, flags: frozenset,
              payload: Optional[bytes]) -> None:
        host = self.hosts[src]
        now = self.clock.now
        self._emit_seq += 1
        emit_seq = self._emit_seq
        flow_key = (src_port, dst_ip, dst_port, proto)
        ip_id = host.next_ipid(flow_key)

        # route: who owns the destination public address?
        dst_host_id = self._ip_host.get(dst_ip)
        dst_nat_id = self._ip_nat.get(dst_ip) if dst_host_id is None else None
        dst_end = dst_host_id if dst_host_id is not None else dst_nat_id
        latency, jitter = self._link_params(src, dst_end) if dst_end \
            else (self.default_latency, self.default_jitter)
        if jitter:
            latency += self._jitter_rng.uniform(-jitter, jitter)
        t_recv = now + latency

        # capture at sender edge: host's own view of addresses
        local_view = SimPacket(now, t_recv, host.ip, src_port, dst_ip,
                               dst_port, proto, flags, size, ip_id)
        tap = self._taps.get(("host", src))
        if tap is not None:
            tap.record(now, emit_seq, local_view)
        self._note("send", src, local_view)

        for filt in host.egress_filters:
            if filt(self, local_view):
                self._drop(f"egress_filter:{src}", local_view)
                return

        # source NAT rewrite
        if host.nat is not None:
            box = self.nats[host.nat]
            pub_port = box.bind(host.ip, src_port, proto)
            box.remotes[(pub_port, proto)].add(dst_ip)
            wire_src_ip, wire_src_port = box.public_ip, pub_port
            ntap = self._taps.get(("nat", host.nat))
            if ntap is not None:
                ntap.record(now, emit_seq, SimPacket(
                    now, t_recv, wire_src_ip, wire_src_port, dst_ip, dst_port,
                    proto, flags, size, ip_id))
        else:
            wire_src_ip, wire_src_port = host.ip, src_port

        wire = SimPacket(now, t_recv, wire_src_ip, wire_src_port, dst_ip,
                         dst_port, proto, flags, size, ip_id)
        if dst_end is None:
            self.schedule(t_recv, lambda: self._drop("no_route", wire))
            return
        self.schedule(t_recv,
                      lambda: self._deliver(wire, emit_seq, dst_host_id,
                                            dst_nat_id, payload))

    def _deliver(self, wire: SimPacket, emit_seq: int,
                 dst_host_id: Optional[str], dst_nat_id: Optional[str],
                 payload: Optional[bytes]) -> None:
        pkt = wire
        if dst_nat_id is not None:
            box = self.nats[dst_nat_id]
            ntap = self._taps.get(("nat", dst_nat_id))
            if ntap is not None:
                ntap.record(wire.t_recv, emit_seq, wire)
            inner = box.reverse.get((wire.dst_port, wire.proto))
            if inner is None:
                self._drop(f"nat_no_binding:{dst_nat_id}", wire)
                return
            if not box.accepts_unsolicited_inbound and \
                    wire.src_ip not in box.remotes[(wire.dst_port, wire.proto)]:
                self._drop(f"nat_unsolicited:{dst_nat_id}", wire)
                return
            priv_ip, priv_port = inner
            dst_host_id = self._nat_members[dst_nat_id][priv_ip]
            pkt = SimPacket(wire.t_send, wire.t_recv, wire.src_ip,
                            wire.src_port, priv_ip, priv_port, wire.proto,
                            wire.tcp_flags, wire.size, wire.ip_id)

        host = self.hosts[dst_host_id]
        tap = self._taps.get(("host", dst_host_id))
        if tap is not None:
            tap.record(pkt.t_recv, emit_seq, pkt)
        self._note("deliver", dst_host_id, pkt)

        for filt in host.ingress_filters:
            if filt(self, pkt):
                self._drop(f"ingress_filter:{dst_host_id}", pkt)
                return
        handler = host.port_handlers.get(pkt.dst_port, host.handler)
        if handler is not None:
            handler(self, dst_host_id, pkt, payload)


# -- trace line format ----------------------------------------------------

TRACE_FIELDS = ("t_send", "t_recv", "src_ip", "src_port", "dst_ip",
                "dst_port", "proto", "flags", "size", "ip_id")


def format_packet(pkt: SimPacket) -> str:
    flags = ",".join(sorted(pkt.tcp_flags)) if pkt.tcp_flags else "-"
    return (f"{pkt.t_send:.6f} {pkt.t_recv:.6f} {ip_str(pkt.src_ip)} "
            f"{pkt.src_port} {ip_str(pkt.dst_ip)} {pkt.dst_port} "
            f"{pkt.proto} {flags} {pkt.size} {pkt.ip_id}")


def parse_packet(line: str) -> SimPacket:
    parts = line.split()
    if len(parts) != 10:
        raise NetsimError(f"bad trace line: {line!r}")
    flags = frozenset() if parts[7] == "-" else frozenset(parts[7].split(","))
    return SimPacket(
        t_send=float(parts[0]), t_recv=float(parts[1]),
        src_ip=parse_ip(parts[2]), src_port=int(parts[3]),
        dst_ip=parse_ip(parts[4]), dst_port=int(parts[5]),
        proto=parts[6], tcp_flags=flags, size=int(parts[8]),
        ip_id=int(parts[9]))


def write_trace(packets, path) -> None:
    with open(path, "w") as fh:
        for pkt in packets:
            fh.write(format_packet(pkt) + "\n")


def read_trace(path) -> list:
    with open(path) as fh:
        return [parse_packet(line) for line in fh if line.strip()]
