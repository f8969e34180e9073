"""Decompose a collective into per-channel point-to-point transfers.

A transfer moves ``units`` protocol units from ``src`` to ``dst`` on one
channel. ``deps`` lists transfers that ``src`` must have fully received before
it may start this one; a rank issues its sends on a channel strictly in plan
order, which models one outstanding step per channel. ``credits`` models the
receiver's bounded buffer: the listed transfers (sent by ``dst``) must have
finished sending, which frees the slot this transfer writes into.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import ceil

from ..errors import UnsupportedOperationError
from ..trace_model import Algorithm, OperationDescriptor, OpName, Protocol

KIB = 1024
MIB = 1024 * KIB

# receive buffer slots per link and channel
BUFFER_SLOTS = 2

# (payload bytes, wire bytes) per protocol unit
PROTOCOL_UNITS = {
    Protocol.SIMPLE: (512 * KIB, 512 * KIB),
    Protocol.LL128: (480, 512),
    Protocol.LL: (128, 256),
}


def unit_payload(protocol: Protocol) -> int:
    return PROTOCOL_UNITS[protocol][0]


def unit_wire_bytes(protocol: Protocol) -> int:
    return PROTOCOL_UNITS[protocol][1]


@dataclass(frozen=True)
class Transfer:
    index: int
    src: int
    dst: int
    channel: int
    units: int
    deps: tuple[int, ...] = ()
    credits: tuple[int, ...] = ()


@dataclass
class Plan:
    descriptor: OperationDescriptor
    members: tuple[int, ...]
    channels: int
    transfers: list[Transfer] = field(default_factory=list)
    # rank -> channel -> ordered transfer indices the rank sends
    send_order: dict[int, list[list[int]]] = field(default_factory=dict)
    # rank -> transfer indices the rank receives
    recvs: dict[int, list[int]] = field(default_factory=dict)

    def add(self, src: int, dst: int, channel: int, units: int, deps=()) -> int:
        t = Transfer(len(self.transfers), src, dst, channel, units, tuple(deps))
        self.transfers.append(t)
        self.send_order[src][channel].append(t.index)
        self.recvs[dst].append(t.index)
        return t.index

    def unit_counts(self, rank: int) -> list[tuple[int, int]]:
        """Planned (send, recv) units per channel for one rank."""
        out = [[0, 0] for _ in range(self.channels)]
        for ch, order in enumerate(self.send_order[rank]):
            out[ch][0] = sum(self.transfers[i].units for i in order)
        for i in self.recvs[rank]:
            t = self.transfers[i]
            out[t.channel][1] += t.units
        return [tuple(c) for c in out]

    def send_units(self, rank: int) -> int:
        return sum(s for s, _ in self.unit_counts(rank))


def binary_tree_layers(members) -> dict[int, int]:
    """Layer of each member in the heap-ordered binary tree over list order."""
    return {r: (i + 1).bit_length() - 1 for i, r in enumerate(members)}


def _tree_links(n: int):
    parent = {i: (i - 1) // 2 for i in range(1, n)}
    children = {i: [c for c in (2 * i + 1, 2 * i + 2) if c < n] for i in range(n)}
    return parent, children


def chunk_units(data_size: int, parts: int, protocol: Protocol) -> int:
    return max(1, ceil(data_size / (parts * unit_payload(protocol))))


_RING_OPS = {OpName.ALL_REDUCE, OpName.ALL_GATHER, OpName.REDUCE_SCATTER,
             OpName.ALL_TO_ALL, OpName.BROADCAST}
_TREE_OPS = {OpName.ALL_REDUCE, OpName.BROADCAST}


def decompose_op(descriptor: OperationDescriptor, members, algorithm: Algorithm, channels: int) -> Plan:
    members = tuple(members)
    n = len(members)
    if descriptor.algorithm != algorithm:
        raise UnsupportedOperationError(
            f"{descriptor.algorithm.value} descriptor on a {algorithm.value} communicator")
    allowed = _RING_OPS if algorithm == Algorithm.RING else _TREE_OPS
    if descriptor.op_name not in allowed:
        raise UnsupportedOperationError(
            f"{descriptor.op_name.value} is not supported with {algorithm.value}")
    plan = Plan(descriptor, members, channels)
    for r in members:
        plan.send_order[r] = [[] for _ in range(channels)]
        plan.recvs[r] = []
    size, proto = descriptor.data_size_bytes, descriptor.protocol
    if algorithm == Algorithm.RING:
        _ring(plan, descriptor.op_name, size, proto)
    else:
        _tree(plan, descriptor.op_name, size, proto)
    _add_credits(plan, BUFFER_SLOTS)
    return plan


def _add_credits(plan: Plan, slots: int) -> None:
    """The k-th transfer on a link waits until the receiver has forwarded what
    the (k - slots)-th transfer delivered."""
    consumers: dict[int, list[int]] = {}
    for t in plan.transfers:
        for d in t.deps:
            consumers.setdefault(d, []).append(t.index)
    links: dict[tuple[int, int, int], list[int]] = {}
    for t in plan.transfers:
        links.setdefault((t.src, t.dst, t.channel), []).append(t.index)
    for seq in links.values():
        for k in range(slots, len(seq)):
            freed = tuple(consumers.get(seq[k - slots], ()))
            if freed:
                plan.transfers[seq[k]] = replace(plan.transfers[seq[k]], credits=freed)


def _ring(plan: Plan, op: OpName, size: int, proto: Protocol) -> None:
    members, n = plan.members, len(plan.members)
    for ch in range(plan.channels):
        if op == OpName.BROADCAST:
            units = chunk_units(size, plan.channels, proto)
            prev = None
            for i in range(n - 1):
                prev = plan.add(members[i], members[i + 1], ch, units,
                                () if prev is None else (prev,))
            continue
        steps = 2 * (n - 1) if op == OpName.ALL_REDUCE else n - 1
        units = chunk_units(size, n * plan.channels, proto)
        # received[i] = transfer index rank i received in the previous step
        received = [None] * n
        for _ in range(steps):
            sent = []
            for i in range(n):
                dep = () if received[i] is None else (received[i],)
                sent.append(plan.add(members[i], members[(i + 1) % n], ch, units, dep))
            received = [sent[(i - 1) % n] for i in range(n)]


def _tree(plan: Plan, op: OpName, size: int, proto: Protocol) -> None:
    members, n = plan.members, len(plan.members)
    parent, children = _tree_links(n)
    units = chunk_units(size, plan.channels, proto)
    for ch in range(plan.channels):
        up = {}
        if op == OpName.ALL_REDUCE:
            # reduce toward the root, deepest ranks first
            for i in range(n - 1, 0, -1):
                deps = tuple(up[c] for c in children[i])
                up[i] = plan.add(members[i], members[parent[i]], ch, units, deps)
        down = {}
        for i in range(1, n):
            p = parent[i]
            if p == 0:
                deps = tuple(up[c] for c in children[0]) if up else ()
            else:
                deps = (down[p],)
            down[i] = plan.add(members[p], members[i], ch, units, deps)
