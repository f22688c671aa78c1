"""Synchronous multi-task FedAvg over the representation block.

Each round the server broadcasts the global representation, every node merges
it into its local model, trains ``epochs_per_round`` epochs, and returns only
its representation block. Task blocks stay on the nodes; they leave only when
the server explicitly requests heads after the last round.
"""

from __future__ import annotations

import logging
import socket
import threading
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ComputationGraph
from .datasets import DatasetSplit, LabeledImageSet
from .errors import DomainError, FedMetaError, ProtocolError, ShapeError
from .optim import SgdConfig
from .params import REPRESENTATION, TASK, BlockPartition, ParameterSet, merge, split
from .training import train_epoch
from .wire import Channel, LoopbackChannel, MessageKind, RoundMessage, SocketChannel, encode_params

log = logging.getLogger(__name__)

SERVER_ID = "server"
WEIGHTINGS = ("samples", "equal")
TRANSPORTS = ("in-process", "stream")


@dataclass
class NodeState:
    node_id: str
    task_name: str
    local_params: ParameterSet
    sample_count: int
    epochs_per_round: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.local_params.partition is None:
            raise ProtocolError(f"node {self.node_id}: local params carry no block partition")
        if self.sample_count < 1:
            raise DomainError(f"node {self.node_id}: sample_count must be positive")

    @property
    def partition(self) -> BlockPartition:
        return self.local_params.partition


@dataclass
class ServerState:
    total_rounds: int
    global_representation: ParameterSet
    registered_nodes: list[str]
    round_index: int = 0
    collected_updates: dict[str, tuple[ParameterSet, int]] = field(default_factory=dict)


@dataclass
class GlobalMetaModel:
    shared_representation: ParameterSet
    task_heads: dict[str, ParameterSet]
    partition: BlockPartition

    def params_for(self, task_name: str) -> ParameterSet:
        """Full parameter set serving one task."""
        entries = dict(self.shared_representation.items())
        entries.update(self.task_heads[task_name].items())
        return ParameterSet(entries, self.partition)


@dataclass(frozen=True)
class FederationConfig:
    total_rounds: int
    sgd: SgdConfig = SgdConfig()
    batch_size: int = 32
    weighting: str = "samples"
    transport: str = "in-process"
    threads: int = 1
    collect_heads: bool = True

    def __post_init__(self):
        if self.total_rounds < 0:
            raise DomainError("total_rounds must be nonnegative")
        if self.weighting not in WEIGHTINGS:
            raise DomainError(f"weighting must be one of {WEIGHTINGS}")
        if self.transport not in TRANSPORTS:
            raise DomainError(f"transport must be one of {TRANSPORTS}")
        if self.batch_size < 1 or self.threads < 1:
            raise DomainError("batch_size and threads must be positive")


@dataclass(frozen=True)
class RoundLogEntry:
    round_index: int
    node_id: str
    mean_loss: float


def _train_set(data) -> LabeledImageSet:
    return data.train if isinstance(data, DatasetSplit) else data


def local_round(node: NodeState, global_rep: ParameterSet, data, graph: ComputationGraph,
                sgd: SgdConfig, round_index: int, batch_size: int = 32) -> tuple[ParameterSet, int, float]:
    """Merge the broadcast, train locally, return (representation, sample count, mean loss).

    Epoch indices continue across rounds (``round_index * epochs_per_round + e``)
    so the learning-rate schedule and batch order match centralized training.
    """
    expected = set(node.partition.representation)
    if set(global_rep) != expected:
        raise ProtocolError(f"node {node.node_id}: broadcast keys {sorted(global_rep)} "
                            f"do not match representation block {sorted(expected)}")
    try:
        params = merge(node.local_params, global_rep)
    except ShapeError as exc:
        raise ProtocolError(f"node {node.node_id}: {exc}") from exc
    train = _train_set(data)
    losses = []
    for e in range(node.epochs_per_round):
        epoch = round_index * node.epochs_per_round + e
        params, loss = train_epoch(graph, params, train.images, train.labels, sgd, epoch,
                                   node.seed, batch_size)
        losses.append(loss)
    node.local_params = params
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return split(params, REPRESENTATION), node.sample_count, mean_loss


def fedavg_aggregate(updates: Sequence[tuple[ParameterSet, int]], weighting: str = "samples") -> ParameterSet:
    """Per-key weighted mean, accumulated in float64 and stored as float32."""
    if not updates:
        raise DomainError("fedavg_aggregate of no updates")
    if weighting not in WEIGHTINGS:
        raise DomainError(f"weighting must be one of {WEIGHTINGS}")
    first = updates[0][0]
    for i, (params, count) in enumerate(updates):
        if count <= 0:
            raise DomainError(f"update {i} has non-positive sample count {count}")
        if set(params) != set(first):
            raise ProtocolError(f"update {i} keys differ from update 0")
        for k in first:
            if params[k].shape != first[k].shape:
                raise ProtocolError(f"update {i}: {k} dims {params[k].shape} != {first[k].shape}")
    weights = [float(c) if weighting == "samples" else 1.0 for _, c in updates]
    total = sum(weights)
    out = {}
    for k in first:
        acc = np.zeros(first[k].shape, dtype=np.float64)
        for (params, _), w in zip(updates, weights):
            acc += w * params[k].astype(np.float64)
        out[k] = (acc / total).astype(np.float32)
    return ParameterSet(out)


class FederatedNode:
    """Node-side protocol handler wrapping a NodeState and its private data."""

    def __init__(self, state: NodeState, data, graph: ComputationGraph, sgd: SgdConfig,
                 batch_size: int = 32):
        self.state = state
        self.train = _train_set(data)
        if len(self.train) != state.sample_count:
            raise DomainError(f"node {state.node_id}: sample_count {state.sample_count} "
                              f"!= training set size {len(self.train)}")
        self.graph = graph
        self.sgd = sgd
        self.batch_size = batch_size
        self.loss_log: list[tuple[int, float]] = []
        self.joined = False
        self.join_sent = False
        self.finished = False

    @property
    def node_id(self) -> str:
        return self.state.node_id

    def _reply(self, kind, round_index, params=None, count=0) -> RoundMessage:
        payload = encode_params(params) if params is not None else b""
        return RoundMessage(kind, round_index, self.node_id, payload, count)

    def join_request(self) -> RoundMessage:
        self.join_sent = True
        return self._reply(MessageKind.JOIN_REQUEST, 0)

    def handle(self, msg: RoundMessage) -> list[RoundMessage]:
        if msg.kind == MessageKind.JOIN_ACK:
            self.joined = True
            return []
        if not self.joined:
            raise ProtocolError(f"node {self.node_id}: {msg.kind.name} before join-ack")
        if msg.kind == MessageKind.GLOBAL_PARAMS:
            rep, count, loss = local_round(self.state, msg.params(), self.train, self.graph,
                                           self.sgd, msg.round_index, self.batch_size)
            self.loss_log.append((msg.round_index, loss))
            return [self._reply(MessageKind.LOCAL_UPDATE, msg.round_index, rep, count)]
        if msg.kind == MessageKind.HEAD_REQUEST:
            head = split(self.state.local_params, TASK)
            return [self._reply(MessageKind.HEAD_UPLOAD, msg.round_index, head, self.state.sample_count)]
        if msg.kind == MessageKind.SHUTDOWN:
            self.finished = True
            return []
        raise ProtocolError(f"node {self.node_id}: unexpected {msg.kind.name}")

    def drain(self, channel: LoopbackChannel) -> None:
        """Process every frame waiting on an in-process endpoint."""
        if not self.join_sent:
            channel.send(self.join_request())
        while channel.pending():
            for reply in self.handle(channel.recv()):
                channel.send(reply)

    def serve(self, channel: Channel) -> None:
        """Blocking loop for stream transports; returns after shutdown."""
        channel.send(self.join_request())
        while not self.finished:
            for reply in self.handle(channel.recv()):
                channel.send(reply)


class FederationServer:
    def __init__(self, registered: Sequence[tuple[str, str]], initial_rep: ParameterSet,
                 partition: BlockPartition, cfg: FederationConfig):
        ids = [nid for nid, _ in registered]
        if len(set(ids)) != len(ids):
            raise ProtocolError(f"duplicate node ids: {ids}")
        self.tasks = dict(registered)
        self.partition = partition
        self.cfg = cfg
        self.state = ServerState(cfg.total_rounds, initial_rep, ids)

    def _recv(self, nid: str, channel: Channel, kind: MessageKind, round_index: int) -> RoundMessage:
        try:
            msg = channel.recv()
        except Exception as exc:
            raise ProtocolError(f"node {nid} failed during round {round_index}: {exc}") from exc
        if msg.kind != kind or msg.round_index != round_index or msg.sender_id != nid:
            raise ProtocolError(f"node {nid}: expected {kind.name} for round {round_index}, got "
                                f"{msg.kind.name} round {msg.round_index} from {msg.sender_id!r}")
        return msg

    def _send(self, channels, kind, round_index, payload=b"") -> None:
        for nid in self.state.registered_nodes:
            try:
                channels[nid].send(RoundMessage(kind, round_index, SERVER_ID, payload))
            except FedMetaError as exc:
                raise ProtocolError(f"node {nid}: send failed: {exc}") from exc

    def register(self, channels: Sequence[Channel]) -> dict[str, Channel]:
        by_id: dict[str, Channel] = {}
        for ch in channels:
            msg = ch.recv()
            if msg.kind != MessageKind.JOIN_REQUEST:
                raise ProtocolError(f"expected JOIN_REQUEST, got {msg.kind.name}")
            if msg.sender_id not in self.tasks or msg.sender_id in by_id:
                raise ProtocolError(f"unexpected or duplicate join from {msg.sender_id!r}")
            by_id[msg.sender_id] = ch
            ch.send(RoundMessage(MessageKind.JOIN_ACK, 0, SERVER_ID))
        return by_id

    def run(self, channels: Sequence[Channel], after_broadcast=None) -> GlobalMetaModel:
        after_broadcast = after_broadcast or (lambda: None)
        chans = self.register(channels)
        order = self.state.registered_nodes
        rep_keys = set(self.partition.representation)
        st = self.state
        for r in range(st.total_rounds):
            st.round_index = r
            self._send(chans, MessageKind.GLOBAL_PARAMS, r, encode_params(st.global_representation))
            after_broadcast()
            st.collected_updates = {}
            for nid in order:
                msg = self._recv(nid, chans[nid], MessageKind.LOCAL_UPDATE, r)
                params = msg.params()
                if set(params) != rep_keys:
                    raise ProtocolError(f"node {nid}: update keys are not the representation block")
                st.collected_updates[nid] = (params, msg.sample_count)
            if len(st.collected_updates) != len(order):
                raise ProtocolError("aggregation attempted without every registered node")
            st.global_representation = fedavg_aggregate(
                [st.collected_updates[nid] for nid in order], self.cfg.weighting)
            st.round_index = r + 1
            log.debug("round %d aggregated from %d nodes", r, len(order))
        heads = {}
        if self.cfg.collect_heads:
            self._send(chans, MessageKind.HEAD_REQUEST, st.total_rounds)
            after_broadcast()
            for nid in order:
                msg = self._recv(nid, chans[nid], MessageKind.HEAD_UPLOAD, st.total_rounds)
                head = msg.params()
                if set(head) != set(self.partition.task):
                    raise ProtocolError(f"node {nid}: head keys are not the task block")
                heads[self.tasks[nid]] = head
        self._send(chans, MessageKind.SHUTDOWN, st.total_rounds)
        after_broadcast()
        return GlobalMetaModel(st.global_representation, heads, self.partition)


def _check_nodes(nodes: Sequence[FederatedNode]) -> BlockPartition:
    if not nodes:
        raise DomainError("federation needs at least one node")
    partition = nodes[0].state.partition
    for node in nodes[1:]:
        if node.state.partition != partition:
            raise ProtocolError(f"node {node.node_id} uses a different block partition")
    return partition


def _run_in_process(server: FederationServer, nodes, cfg, trace):
    endpoints = []
    node_ends = {}
    for node in nodes:
        server_end, node_end = LoopbackChannel.pair(trace)
        server_end.on_empty = (lambda n=node, e=node_end: n.drain(e))
        endpoints.append(server_end)
        node_ends[node.node_id] = node_end
    if cfg.threads == 1:
        meta = server.run(endpoints)
        for node in nodes:
            node.drain(node_ends[node.node_id])  # deliver shutdown
        return meta

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        def drain_all():
            futures = [(n.node_id, pool.submit(n.drain, node_ends[n.node_id])) for n in nodes]
            for nid, fut in futures:
                exc = fut.exception()
                if exc is not None:
                    raise ProtocolError(f"node {nid} failed: {exc}") from exc
        return server.run(endpoints, after_broadcast=drain_all)


def _run_stream(server: FederationServer, nodes, trace):
    errors: dict[str, BaseException] = {}
    listener = socket.create_server(("127.0.0.1", 0))
    listener.settimeout(60)
    port = listener.getsockname()[1]

    def node_main(node: FederatedNode):
        ch = SocketChannel(socket.create_connection(("127.0.0.1", port)), trace)
        try:
            node.serve(ch)
        except BaseException as exc:  # surfaced to the server via the closed socket
            errors[node.node_id] = exc
        finally:
            ch.close()

    threads = [threading.Thread(target=node_main, args=(n,), daemon=True) for n in nodes]
    for t in threads:
        t.start()
    conns = []
    try:
        for _ in nodes:
            sock, _addr = listener.accept()
            sock.settimeout(None)
            conns.append(SocketChannel(sock, trace))
        try:
            return server.run(conns)
        except ProtocolError as exc:
            failed = [nid for nid in server.state.registered_nodes if nid in errors]
            if failed:
                raise ProtocolError(f"node {failed[0]} failed: {errors[failed[0]]}") from exc
            raise
    finally:
        for ch in conns:
            ch.close()
        listener.close()
        for t in threads:
            t.join(timeout=10)


def run_federation(nodes: Sequence[FederatedNode], cfg: FederationConfig,
                   initial_rep: ParameterSet | None = None,
                   trace: list | None = None) -> tuple[GlobalMetaModel, list[RoundLogEntry]]:
    """Run ``cfg.total_rounds`` synchronous rounds across ``nodes``.

    ``initial_rep`` defaults to the first node's representation block. Every
    frame sent on any channel is appended to ``trace`` when one is given.

    With ``cfg.collect_heads`` the heads travel to the server in a final
    HEAD_UPLOAD exchange. Without it no head ever touches a channel; the
    simulator, which holds every node, reads them off the nodes directly.
    """
    partition = _check_nodes(nodes)
    if initial_rep is None:
        initial_rep = split(nodes[0].state.local_params, REPRESENTATION)
    registered = [(n.node_id, n.state.task_name) for n in nodes]
    server = FederationServer(registered, initial_rep, partition, cfg)
    if cfg.transport == "stream":
        meta = _run_stream(server, nodes, trace)
    else:
        meta = _run_in_process(server, nodes, cfg, trace)
    if not cfg.collect_heads:
        meta.task_heads = {n.state.task_name: split(n.state.local_params, TASK) for n in nodes}
    position = {n.node_id: i for i, n in enumerate(nodes)}
    round_log = [RoundLogEntry(r, n.node_id, loss) for n in nodes for r, loss in n.loss_log]
    round_log.sort(key=lambda e: (e.round_index, position[e.node_id]))
    return meta, round_log


def make_node(node_id: str, task_name: str, params: ParameterSet, data, graph: ComputationGraph,
              cfg: FederationConfig, epochs_per_round: int = 1, seed: int = 0) -> FederatedNode:
    """Convenience constructor; sizes the LR schedule to the whole federation.

    The node gets its own copy of ``graph`` because the tape is not thread-safe.
    """
    train = _train_set(data)
    total = max(1, cfg.total_rounds * epochs_per_round)
    sgd = replace(cfg.sgd, total_epochs=total)
    state = NodeState(node_id, task_name, params, len(train), epochs_per_round, seed)
    return FederatedNode(state, train, graph.copy(), sgd, cfg.batch_size)


__all__ = [
    "NodeState", "ServerState", "GlobalMetaModel", "FederationConfig", "RoundLogEntry",
    "FederatedNode", "FederationServer", "local_round", "fedavg_aggregate", "run_federation",
    "make_node",
]
