"""Proximity communication graphs, a lossy delayed channel, and spectral connectivity."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence

import numpy as np

PAYLOAD_KINDS = ("observation", "state-estimate", "intended-action")


@dataclass
class CommGraph:
    n_agents: int
    adjacency: np.ndarray  # symmetric bool, zero diagonal
    weights: np.ndarray  # row-stochastic fusion weights

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def laplacian(self) -> np.ndarray:
        A = self.adjacency.astype(float)
        return np.diag(A.sum(axis=1)) - A


def build_graph(positions: Sequence[Sequence[float]], r_c: float) -> CommGraph:
    """Agents ``i != j`` are linked when ``||p_i - p_j|| <= r_c``."""
    if not r_c > 0:
        raise ValueError(f"communication radius must be positive, got {r_c}")
    P = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = len(P)
    diff = P[:, None, :] - P[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    adj = dist <= r_c
    np.fill_diagonal(adj, False)
    g = CommGraph(n, adj, np.eye(n))
    g.weights = metropolis_weights(g)
    return g


def graph_from_edges(n: int, edges: Iterable[tuple]) -> CommGraph:
    adj = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        if i != j:
            adj[i, j] = adj[j, i] = True
    g = CommGraph(n, adj, np.eye(n))
    g.weights = metropolis_weights(g)
    return g


def metropolis_weights(graph: CommGraph) -> np.ndarray:
    """Symmetric doubly stochastic weights ``w_ij = 1/(1 + max(d_i, d_j))`` on edges."""
    A = graph.adjacency
    d = A.sum(axis=1)
    W = np.where(A, 1.0 / (1.0 + np.maximum(d[:, None], d[None, :])), 0.0)
    np.fill_diagonal(W, 0.0)
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return W


def algebraic_connectivity(graph: CommGraph) -> float:
    """Second-smallest eigenvalue of the unweighted Laplacian; 0 when disconnected."""
    if graph.n_agents < 2:
        return 0.0
    lam = np.linalg.eigvalsh(graph.laplacian())
    lam2 = float(lam[1])
    # connected graphs on a handful of vertices have lambda_2 far above this
    return lam2 if lam2 > 1e-9 else 0.0


def second_eigenvalue_modulus(W: np.ndarray) -> float:
    """Second-largest eigenvalue modulus of a symmetric consensus matrix."""
    if len(W) < 2:
        return 0.0
    mods = np.sort(np.abs(np.linalg.eigvalsh((W + W.T) / 2.0)))[::-1]
    return float(mods[1])


# ---------------------------------------------------------------------------
# channel


@dataclass(frozen=True)
class ChannelModel:
    delay_mean: float = 0.050
    delay_std: float = 0.010
    delay_max: float = 0.100
    p_loss: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.p_loss <= 1.0:
            raise ValueError("p_loss must lie in [0, 1]")
        if self.delay_std < 0 or self.delay_max < 0:
            raise ValueError("delay parameters must be nonnegative")
        if not 0.0 <= self.delay_mean <= self.delay_max:
            raise ValueError("delay_mean must lie within [0, delay_max]")


@dataclass(frozen=True)
class Message:
    sender: int
    recipient: int
    kind: str
    payload: tuple
    send_time: float
    deliver_time: Optional[float] = None  # None once dropped or before transmission
    dropped: bool = False


def sample_delay(channel: ChannelModel, rng: np.random.Generator) -> float:
    """Gaussian delay truncated to ``[0, delay_max]`` by resampling."""
    if channel.delay_std == 0.0:
        return channel.delay_mean
    while True:
        d = channel.delay_mean + channel.delay_std * rng.standard_normal()
        if 0.0 <= d <= channel.delay_max:
            return float(d)


def transmit(msg: Message, channel: ChannelModel, rng: np.random.Generator) -> Message:
    if rng.random() < channel.p_loss:
        return replace(msg, deliver_time=None, dropped=True)
    return replace(msg, deliver_time=msg.send_time + sample_delay(channel, rng), dropped=False)


def quantize_delivery(msg: Message, dt: float) -> Message:
    """Round the delivery time up to the next whole simulation tick."""
    if msg.dropped:
        return msg
    ticks = math.ceil(round((msg.deliver_time - msg.send_time) / dt, 9))
    return replace(msg, deliver_time=msg.send_time + ticks * dt)


@dataclass
class Mailbox:
    """Pending messages ordered by ``(deliver_time, sender, send_time)``."""

    _heap: list = field(default_factory=list)
    _seq: int = 0

    def push(self, msg: Message) -> None:
        if msg.dropped:
            return
        heapq.heappush(self._heap, (msg.deliver_time, msg.sender, msg.send_time, self._seq, msg))
        self._seq += 1

    def __len__(self):
        return len(self._heap)

    def pending(self) -> List[Message]:
        return [e[-1] for e in sorted(self._heap)]

    def copy(self) -> "Mailbox":
        return Mailbox(list(self._heap), self._seq)


def deliver_due(mailbox, now: float) -> List[Message]:
    """Remove and return every message with ``deliver_time <= now`` in delivery order.

    Accepts a :class:`Mailbox` or a plain list of messages (the list is
    modified in place).
    """
    if isinstance(mailbox, Mailbox):
        out = []
        heap = mailbox._heap
        while heap and heap[0][0] <= now + 1e-12:
            out.append(heapq.heappop(heap)[-1])
        return out
    due = [m for m in mailbox if not m.dropped and m.deliver_time <= now + 1e-12]
    keep = [m for m in mailbox if m.dropped or m.deliver_time > now + 1e-12]
    mailbox[:] = keep
    return sorted(due, key=lambda m: (m.deliver_time, m.sender, m.send_time))


MESSAGE_LOG_COLUMNS = ("t", "sender", "recipient", "kind", "dropped")


def message_log_rows(messages: Iterable[Message]):
    for m in messages:
        yield (f"{m.send_time:.6f}", m.sender, m.recipient, m.kind, int(m.dropped))
