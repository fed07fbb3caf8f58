"""Simulated Mainline-style DHT with real KRPC message bytes.

Nodes store each infohash's peer list at the node whose id minimizes the
XOR distance to it.  Routing tables are Kademlia buckets (up to 8 entries
per distance level), so iterative find_node lookups strictly shrink the
distance each hop.  Queries, responses and announces are bencoded KRPC
dicts carried as payloads on simulated UDP packets; NATed announcers are
therefore recorded under their public address, exactly like on the real
network.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Optional

from ..netsim import Simulator
from .bencode import BencodeError, bdecode, bencode

KRPC_PORT = 6881
BUCKET_CAP = 8
CLOSEST_RETURNED = 8


class DhtError(Exception):
    pass


def xor_distance(a: bytes, b: bytes) -> int:
    return int.from_bytes(a, "big") ^ int.from_bytes(b, "big")


# -- compact encodings --------------------------------------------------------

def pack_peer(ip: int, port: int) -> bytes:
    return ip.to_bytes(4, "big") + port.to_bytes(2, "big")


def unpack_peers(values) -> list:
    peers = []
    for v in values:
        if isinstance(v, (bytes, bytearray)) and len(v) == 6:
            peers.append((int.from_bytes(v[:4], "big"),
                          int.from_bytes(v[4:], "big")))
    return peers


def pack_nodes(nodes) -> bytes:
    return b"".join(node_id + pack_peer(ip, port)
                    for node_id, ip, port in nodes)


def unpack_nodes(blob: bytes) -> list:
    out = []
    for i in range(0, len(blob) - 25, 26):
        chunk = blob[i:i + 26]
        out.append((chunk[:20], int.from_bytes(chunk[20:24], "big"),
                    int.from_bytes(chunk[24:26], "big")))
    return out


# -- KRPC messages ------------------------------------------------------------

def krpc_query(txn: bytes, method: str, args: dict) -> bytes:
    return bencode({"t": txn, "y": "q", "q": method, "a": args})


def krpc_response(txn: bytes, body: dict) -> bytes:
    return bencode({"t": txn, "y": "r", "r": body})


def parse_krpc(data: bytes) -> dict:
    msg = bdecode(data)
    if not isinstance(msg, dict) or b"t" not in msg or b"y" not in msg:
        raise DhtError("not a KRPC message")
    return msg


# -- nodes --------------------------------------------------------------------

class DhtNode:
    __slots__ = ("node_id", "host_id", "ip", "port", "routing", "store",
                 "responsive")

    def __init__(self, node_id: bytes, host_id: str, ip: int, port: int):
        if len(node_id) != 20:
            raise DhtError("node id must be 20 bytes")
        self.node_id = node_id
        self.host_id = host_id
        self.ip = ip
        self.port = port
        self.routing: list = []      # (node_id, ip, port)
        self.store: dict = {}        # infohash -> {(ip, port): True}
        self.responsive = True

    def closest_known(self, target: bytes, k: int = CLOSEST_RETURNED) -> list:
        pool = self.routing + [(self.node_id, self.ip, self.port)]
        pool.sort(key=lambda n: (xor_distance(n[0], target), n[0]))
        return pool[:k]


class DhtNetwork:
    """All simulated DHT nodes plus their ground-truth placement oracle."""

    def __init__(self, sim: Simulator, seed=0, port: int = KRPC_PORT):
        self.sim = sim
        self.seed = seed
        self.port = port
        self.nodes: dict = {}        # node_id -> DhtNode
        self.by_host: dict = {}
        self._rng = random.Random(f"{seed}:dht")

    def add_node(self, host_id: str, node_id: Optional[bytes] = None) -> DhtNode:
        if node_id is None:
            node_id = self._rng.randbytes(20)
        host = self.sim.hosts[host_id]
        if host.nat is not None:
            raise DhtError("DHT nodes must be public")
        node = DhtNode(node_id, host_id, host.ip, self.port)
        if node_id in self.nodes:
            raise DhtError("duplicate node id")
        self.nodes[node_id] = node
        self.by_host[host_id] = node
        self.sim.set_port_handler(host_id, self.port, self._server)
        return node

    def build_routing(self, bucket_cap: int = BUCKET_CAP) -> None:
        ids = sorted(self.nodes)
        for me in ids:
            node = self.nodes[me]
            buckets: dict = {}
            for other in ids:
                if other == me:
                    continue
                buckets.setdefault(xor_distance(me, other).bit_length() - 1,
                                   []).append(other)
            routing = []
            for level in sorted(buckets):
                members = buckets[level]
                if len(members) > bucket_cap:
                    members = self._rng.sample(members, bucket_cap)
                for other in sorted(members):
                    peer = self.nodes[other]
                    routing.append((other, peer.ip, peer.port))
            node.routing = routing

    def responsible(self, infohash: bytes) -> DhtNode:
        """Oracle: node minimizing XOR(node_id, infohash) over all nodes."""
        if not self.nodes:
            raise DhtError("empty DHT")
        best = min(self.nodes,
                   key=lambda nid: (xor_distance(nid, infohash), nid))
        return self.nodes[best]

    def bootstrap_node(self) -> DhtNode:
        return self.nodes[min(self.nodes)]

    def total_stored_peers(self, infohash: bytes) -> set:
        """Exhaustive scan over every node's store (test oracle)."""
        found = set()
        for node in self.nodes.values():
            found.update(node.store.get(infohash, ()))
        return found

    # -- server side -----------------------------------------------------

    def _server(self, sim, host_id, pkt, payload):
        node = self.by_host[host_id]
        if not node.responsive or payload is None:
            return
        try:
            msg = parse_krpc(payload)
        except (BencodeError, DhtError):
            return
        if msg.get(b"y") != b"q":
            return
        txn = msg[b"t"]
        args = msg.get(b"a", {})
        method = msg.get(b"q")
        if method == b"find_node":
            target = args.get(b"target", b"\x00" * 20)
            body = {"id": node.node_id,
                    "nodes": pack_nodes(node.closest_known(target))}
        elif method == b"get_peers":
            infohash = args.get(b"info_hash", b"")
            stored = node.store.get(infohash)
            if stored:
                values = [pack_peer(ip, port)
                          for ip, port in sorted(stored)]
                body = {"id": node.node_id, "values": values}
            else:
                body = {"id": node.node_id,
                        "nodes": pack_nodes(node.closest_known(infohash))}
        elif method == b"announce_peer":
            infohash = args.get(b"info_hash", b"")
            port = args.get(b"port", pkt.src_port)
            if len(infohash) == 20:
                node.store.setdefault(infohash, {})[(pkt.src_ip, port)] = True
            body = {"id": node.node_id}
        else:
            return
        reply = krpc_response(txn, body)
        sim.schedule_send(host_id, pkt.src_ip, pkt.src_port, "UDP",
                          len(reply), at=sim.now, src_port=self.port,
                          payload=reply)

    def withdraw_peer(self, infohash: bytes, ip: int, port: int,
                      at: float) -> None:
        """Model announce expiry when a peer leaves its swarm."""
        node = self.responsible(infohash)

        def expire():
            node.store.get(infohash, {}).pop((ip, port), None)

        self.sim.schedule(at, expire)


# -- client side --------------------------------------------------------------

class KrpcClient:
    """Request/response correlation for one querying host."""

    def __init__(self, sim: Simulator, host_id: str, seed=0,
                 src_port: int = 9100):
        self.sim = sim
        self.host_id = host_id
        self.node_id = random.Random(f"{seed}:krpc:{host_id}").randbytes(20)
        self.src_port = src_port
        self._pending: dict = {}    # txn -> callback
        self._txn = 0
        sim.set_port_handler(host_id, src_port, self._on_packet)

    def _on_packet(self, sim, host_id, pkt, payload):
        if payload is None:
            return
        try:
            msg = parse_krpc(payload)
        except (BencodeError, DhtError):
            return
        if msg.get(b"y") != b"r":
            return
        cb = self._pending.pop(msg[b"t"], None)
        if cb is not None:
            cb(msg.get(b"r", {}))

    def send_query(self, ip: int, port: int, method: str, args: dict,
                   on_reply: Callable, on_timeout: Callable,
                   timeout: float) -> None:
        self._txn += 1
        txn = self._txn.to_bytes(4, "big")
        self._pending[txn] = on_reply
        data = krpc_query(txn, method, args)
        self.sim.schedule_send(self.host_id, ip, port, "UDP", len(data),
                               at=self.sim.now, src_port=self.src_port,
                               payload=data)

        def check():
            if self._pending.pop(txn, None) is not None:
                on_timeout()

        self.sim.schedule(self.sim.now + timeout, check)


@dataclass
class LookupResult:
    infohash: bytes
    responsible_id: Optional[bytes]
    peers: tuple
    hops: tuple              # XOR distances of each responding hop
    queries: int
    failed: bool
    t_done: float = 0.0


class LookupTask:
    """Iterative find_node toward an infohash, then get_peers at the best
    responding node.  Unresponsive nodes are retried once and skipped."""

    def __init__(self, client: KrpcClient, bootstrap, infohash: bytes,
                 on_done: Callable, timeout: float = 1.0,
                 max_queries: int = 64):
        self.client = client
        self.infohash = infohash
        self.on_done = on_done
        self.timeout = timeout
        self.max_queries = max_queries
        self.queries = 0
        self.hops: list = []
        self.candidates: dict = {}   # node_id -> (ip, port)
        self.tried: set = set()
        self.best: Optional[tuple] = None   # (dist, node_id, ip, port)
        boot_id, boot_ip, boot_port = bootstrap
        self.candidates[boot_id] = (boot_ip, boot_port)

    def start(self) -> None:
        self._step()

    def _next_candidate(self):
        fresh = [(xor_distance(nid, self.infohash), nid)
                 for nid in self.candidates if nid not in self.tried]
        if not fresh:
            return None
        fresh.sort()
        return fresh[0][1]

    def _step(self) -> None:
        nid = self._next_candidate()
        if nid is None or self.queries >= self.max_queries:
            self._finish(failed=self.best is None)
            return
        dist = xor_distance(nid, self.infohash)
        if self.best is not None and dist >= self.best[0]:
            self._finish(failed=False)
            return
        ip, port = self.candidates[nid]
        self.tried.add(nid)
        self._query_find_node(nid, ip, port, dist, retry=True)

    def _query_find_node(self, nid, ip, port, dist, retry: bool) -> None:
        self.queries += 1

        def on_reply(body):
            self.hops.append(dist)
            self.best = (dist, nid, ip, port)
            for other_id, oip, oport in unpack_nodes(body.get(b"nodes", b"")):
                if len(other_id) == 20 and other_id not in self.candidates:
                    self.candidates[other_id] = (oip, oport)
            self._step()

        def on_timeout():
            if retry:
                self._query_find_node(nid, ip, port, dist, retry=False)
            else:
                self._step()   # skip this node

        self.client.send_query(ip, port, "find_node",
                               {"id": self.client.node_id,
                                "target": self.infohash},
                               on_reply, on_timeout, self.timeout)

    def _finish(self, failed: bool) -> None:
        if failed:
            self.on_done(LookupResult(self.infohash, None, (), tuple(self.hops),
                                      self.queries, True,
                                      self.client.sim.now))
            return
        _, nid, ip, port = self.best
        self.queries += 1

        def on_reply(body):
            peers = tuple(sorted(unpack_peers(body.get(b"values", []))))
            self.on_done(LookupResult(self.infohash, nid, peers,
                                      tuple(self.hops), self.queries, False,
                                      self.client.sim.now))

        def on_timeout():
            self.on_done(LookupResult(self.infohash, nid, (),
                                      tuple(self.hops), self.queries, True,
                                      self.client.sim.now))

        self.client.send_query(ip, port, "get_peers",
                               {"id": self.client.node_id,
                                "info_hash": self.infohash},
                               on_reply, on_timeout, self.timeout)


def dht_lookup(client: KrpcClient, dht: DhtNetwork, infohash: bytes,
               timeout: float = 1.0) -> LookupResult:
    """Blocking convenience wrapper: runs the event loop until one lookup
    completes."""
    if not dht.nodes:
        raise DhtError("lookup with empty routing knowledge")
    boot = dht.bootstrap_node()
    done: list = []
    task = LookupTask(client, (boot.node_id, boot.ip, boot.port), infohash,
                      done.append, timeout=timeout)
    task.start()
    guard = 0
    while not done and guard < 10000:
        client.sim.advance(client.sim.now + 0.5)
        guard += 1
    if not done:
        raise DhtError("lookup did not terminate")
    return done[0]


def announce(sim: Simulator, dht: DhtNetwork, host_id: str, src_port: int,
             infohash: bytes, public_port: int, at: float,
             node_id: bytes = b"\x00" * 20) -> None:
    """One announce datagram from the peer to the responsible node; the
    node records the packet's (post-NAT) source IP and the announced port."""
    target = dht.responsible(infohash)
    data = krpc_query(b"an", "announce_peer",
                      {"id": node_id, "info_hash": infohash,
                       "port": public_port})
    sim.schedule_send(host_id, target.ip, target.port, "UDP", len(data),
                      at=at, src_port=src_port, payload=data)
