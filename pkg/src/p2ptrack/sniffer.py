"""Attacker-side trace analysis.

The SYN-suppression filter makes calls inconspicuous (no TCP connection
ever completes, so the callee is never notified), and the classifier
recovers the callee address(es) from a caller-side capture purely from
packet sizes, directions and inter-packet gaps: no payload is inspected.

Per-flow scoring: each candidate remote IP is checked against the three
call-establishment signatures; the score is the fraction of satisfied
sub-constraints, so one missing or late packet still matches at the
default threshold while random supernode chatter stays far below it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .netsim import Simulator, ip_str, parse_ip

KIND_I = "I"
KIND_II = "II"
KIND_III = "III"

# nominal gaps of the signatures
SYN_GAPS = (3.0, 1.0)
MARKER_GAPS = (2.0, 4.0)
MARKER_SIZES = (59, 58)
NAT_FIRST_SIZE = 28
NAT_TAIL_SIZE = 3
NAT_TAIL_DELAY = 10.0
NAT_TAIL_GAP = 1.0
ECHO_WINDOW = 2.0


@dataclass(frozen=True)
class SynFilterPolicy:
    """Drop every inbound and outbound TCP SYN while active.  Packets of
    connections established before t_begin carry no SYN flag and pass."""
    t_begin: float
    t_end: float


def apply_syn_filter(sim: Simulator, host_id: str,
                     policy: SynFilterPolicy) -> None:
    def drop_syn(s, pkt):
        return (pkt.proto == "TCP" and "SYN" in pkt.tcp_flags
                and policy.t_begin <= s.now <= policy.t_end)

    host = sim.hosts[host_id]
    host.egress_filters.append(drop_syn)
    host.ingress_filters.append(drop_syn)


@dataclass
class ClassifierConfig:
    timing_tolerance: float = 0.25
    min_score: float = 0.8
    pattern_window: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.timing_tolerance < 0.5:
            raise ValueError("timing_tolerance must be in (0, 0.5)")


@dataclass(frozen=True)
class PatternMatch:
    kind: str
    candidate_ip: int
    t_first_packet: float
    score: float
    packets: tuple


@dataclass(frozen=True)
class ExtractedIp:
    ip: int
    stale: bool
    score: float
    kind: str
    t_first: float


def _within(gap: float, nominal: float, tol: float) -> bool:
    return abs(gap - nominal) <= tol * nominal


def _score_syn_udp(entries, tol: float) -> float:
    """Kind I/III shape: outbound SYN triple (3 s then 1 s timeouts) and an
    outbound 59/58-byte UDP triple with 2 s and 4 s gaps."""
    syn_t = [t for t, outbound, p in entries
             if outbound and p.proto == "TCP"
             and "SYN" in p.tcp_flags and "ACK" not in p.tcp_flags]
    mark_t = [t for t, outbound, p in entries
              if outbound and p.proto == "UDP" and p.size in MARKER_SIZES]
    checks = (
        len(syn_t) >= 3,
        len(syn_t) >= 2 and _within(syn_t[1] - syn_t[0], SYN_GAPS[0], tol),
        len(syn_t) >= 3 and _within(syn_t[2] - syn_t[1], SYN_GAPS[1], tol),
        len(mark_t) >= 3,
        len(mark_t) >= 2 and _within(mark_t[1] - mark_t[0],
                                     MARKER_GAPS[0], tol),
        len(mark_t) >= 3 and _within(mark_t[2] - mark_t[1],
                                     MARKER_GAPS[1], tol),
    )
    return sum(checks) / len(checks)


def _score_nated(entries, tol: float) -> float:
    """Kind II shape: inbound 28-byte first contact, echoed 28-byte reply,
    varying-size exchange, inbound 3-byte keepalives ~10 s in."""
    t0, first_outbound, first_pkt = entries[0]
    c_first = (not first_outbound and first_pkt.proto == "UDP"
               and first_pkt.size == NAT_FIRST_SIZE)
    c_echo = any(outbound and p.proto == "UDP" and p.size == NAT_FIRST_SIZE
                 and t0 < t <= t0 + ECHO_WINDOW
                 for t, outbound, p in entries)
    varying = sum(1 for t, _, p in entries
                  if p.proto == "UDP"
                  and p.size not in (NAT_FIRST_SIZE, NAT_TAIL_SIZE))
    tail_t = [t for t, outbound, p in entries
              if not outbound and p.proto == "UDP"
              and p.size == NAT_TAIL_SIZE]
    c_tail_delay = any(_within(t - t0, NAT_TAIL_DELAY, tol) for t in tail_t)
    c_tail_series = (len(tail_t) >= 3
                     and _within(tail_t[1] - tail_t[0], NAT_TAIL_GAP, tol)
                     and _within(tail_t[2] - tail_t[1], NAT_TAIL_GAP, tol))
    checks = (c_first, c_echo, varying >= 3, c_tail_delay, c_tail_series)
    return sum(checks) / len(checks)


def infer_observer(trace) -> int:
    """The observer is the address present in every packet of its own tap."""
    common = None
    counts: dict = {}
    for pkt in trace:
        ips = {pkt.src_ip, pkt.dst_ip}
        common = ips if common is None else (common & ips)
        for ip in ips:
            counts[ip] = counts.get(ip, 0) + 1
    if not common:
        raise ValueError("cannot infer observer address from trace")
    if len(common) == 1:
        return next(iter(common))
    # single-flow trace: prefer the side that sent the first pure SYN,
    # else the first packet's source
    for pkt in trace:
        if pkt.proto == "TCP" and pkt.tcp_flags == frozenset(("SYN",)):
            if pkt.src_ip in common:
                return pkt.src_ip
    return trace[0].src_ip


def classify_trace(trace, cfg: ClassifierConfig,
                   observer_ip: Optional[int] = None) -> list:
    """All per-IP pattern matches scoring at least cfg.min_score."""
    if not trace:
        return []
    if observer_ip is None:
        observer_ip = infer_observer(trace)
    flows: dict = {}
    for pkt in trace:
        outbound = pkt.src_ip == observer_ip
        remote = pkt.dst_ip if outbound else pkt.src_ip
        obs_t = pkt.t_send if outbound else pkt.t_recv
        flows.setdefault(remote, []).append((obs_t, outbound, pkt))

    tol = cfg.timing_tolerance
    matches = []
    for remote in sorted(flows):
        entries = sorted(flows[remote], key=lambda e: e[0])
        inbound_any = any(not outbound for _, outbound, _ in entries)
        if inbound_any:
            scored = ((KIND_I, _score_syn_udp(entries, tol)),
                      (KIND_II, _score_nated(entries, tol)))
        else:
            scored = ((KIND_III, _score_syn_udp(entries, tol)),)
        kind, score = max(scored, key=lambda ks: ks[1])
        if score >= cfg.min_score:
            matches.append(PatternMatch(
                kind, remote, entries[0][0], score,
                tuple(p for _, _, p in entries)))
    matches.sort(key=lambda m: (-m.score, m.t_first_packet, m.candidate_ip))
    return matches


def extract_callee_ips(matches) -> list:
    """Candidate addresses ranked by score, ties by earliest first packet;
    kind III results are flagged stale (last-seen, not current)."""
    best: dict = {}
    for m in matches:
        cur = best.get(m.candidate_ip)
        if cur is None or (m.score, -m.t_first_packet) > \
                (cur.score, -cur.t_first):
            best[m.candidate_ip] = ExtractedIp(
                m.candidate_ip, m.kind == KIND_III, m.score, m.kind,
                m.t_first_packet)
    return sorted(best.values(), key=lambda e: (-e.score, e.t_first, e.ip))


# -- match line format -------------------------------------------------------

def format_match(call_id, m: PatternMatch) -> str:
    stale = 1 if m.kind == KIND_III else 0
    return (f"{call_id} {m.kind} {ip_str(m.candidate_ip)} {m.score:.4f} "
            f"{m.t_first_packet:.6f} {stale}")


def parse_match(line: str):
    parts = line.split()
    if len(parts) != 6:
        raise ValueError(f"bad match line: {line!r}")
    return (parts[0], PatternMatch(parts[1], parse_ip(parts[2]),
                                   float(parts[4]), float(parts[3]), ()))
