import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_cnn
from fedmeta.datasets import gen_synthetic_task
from fedmeta.errors import DomainError, ProtocolError
from fedmeta.federation import (FederationConfig, NodeState, fedavg_aggregate, local_round, make_node,
                                run_federation)
from fedmeta.optim import SgdConfig
from fedmeta.params import REPRESENTATION, TASK, ParameterSet, split
from fedmeta.training import train_centralized
from fedmeta.wire import MessageKind, decode_frame


def task_data(kind="blob", n=48, seed=0):
    return gen_synthetic_task(kind, n, 8, 0.4, 0.2, seed, amplitude=0.6)


def fl_config(rounds, lr=0.05, **kw):
    return FederationConfig(rounds, SgdConfig(lr, "cosine-to-floor", 0.0, max(rounds, 1)), batch_size=16, **kw)


def two_nodes(cfg, graph_seed=0):
    graph, params = small_cnn(seed=graph_seed)
    _, other = small_cnn(seed=graph_seed + 1)
    return [make_node("node-a", "spot", params, task_data("blob", 48, 1), graph, cfg, seed=11),
            make_node("node-b", "ring", other, task_data("ring", 32, 2), graph, cfg, seed=12)]


# -- local update -------------------------------------------------------------

def test_zero_epochs_returns_broadcast_unchanged():
    graph, params = small_cnn()
    data = task_data()
    node = NodeState("n", "t", params, len(data), epochs_per_round=0)
    broadcast = split(small_cnn(seed=5)[1], REPRESENTATION)
    rep, count, _ = local_round(node, broadcast, data, graph, SgdConfig(0.1, "constant", 0, 1), 0)
    assert rep.bitwise_equal(broadcast)
    assert count == len(data)


def test_zero_learning_rate_returns_broadcast_unchanged():
    graph, params = small_cnn()
    data = task_data()
    node = NodeState("n", "t", params, len(data), epochs_per_round=2)
    broadcast = split(small_cnn(seed=5)[1], REPRESENTATION)
    rep, _, _ = local_round(node, broadcast, data, graph, SgdConfig(0.0, "constant", 0.0, 4), 0)
    assert rep.bitwise_equal(broadcast)


def test_broadcast_with_wrong_keys_is_protocol_error():
    graph, params = small_cnn()
    data = task_data()
    node = NodeState("n", "t", params, len(data))
    with pytest.raises(ProtocolError, match="node n"):
        local_round(node, split(params, TASK), data, graph, SgdConfig(), 0)


# -- aggregation --------------------------------------------------------------

def test_fedavg_worked_example():
    out = fedavg_aggregate([(ParameterSet({"w": [2.0]}), 1), (ParameterSet({"w": [4.0]}), 3)])
    assert out["w"][0] == 3.5


def test_fedavg_matches_scalar_loop():
    rng = np.random.default_rng(0)
    updates = [(ParameterSet({"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}), int(rng.integers(1, 500)))
               for _ in range(5)]
    out = fedavg_aggregate(updates)
    total = sum(n for _, n in updates)
    for k in ("a", "b"):
        for idx in np.ndindex(updates[0][0][k].shape):
            expected = sum(float(p[k][idx]) * n for p, n in updates) / total
            assert out[k][idx] == pytest.approx(expected, rel=1e-6, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100, width=32), st.integers(1, 1000)), min_size=1, max_size=8),
       st.randoms(use_true_random=False))
def test_fedavg_permutation_invariant_and_bounded(entries, rnd):
    updates = [(ParameterSet({"w": [v]}), n) for v, n in entries]
    shuffled = list(updates)
    rnd.shuffle(shuffled)
    a, b = fedavg_aggregate(updates)["w"][0], fedavg_aggregate(shuffled)["w"][0]
    assert a == pytest.approx(b, rel=1e-6, abs=1e-6)
    values = [v for v, _ in entries]
    assert min(values) - 1e-5 <= a <= max(values) + 1e-5


def test_fedavg_equal_counts_is_plain_mean():
    updates = [(ParameterSet({"w": [v]}), 7) for v in (1.0, 2.0, 6.0)]
    assert fedavg_aggregate(updates)["w"][0] == pytest.approx(3.0)
    weighted = [(ParameterSet({"w": [v]}), n) for v, n in ((1.0, 1), (2.0, 5), (6.0, 9))]
    assert fedavg_aggregate(weighted, "equal")["w"][0] == pytest.approx(3.0)


def test_fedavg_of_identical_updates_is_that_update():
    p = ParameterSet({"w": np.random.default_rng(3).normal(size=(4, 3))})
    out = fedavg_aggregate([(p, 3), (p, 17), (p, 1)])
    np.testing.assert_allclose(out["w"], p["w"], rtol=1e-7)


def test_fedavg_rejects_bad_input():
    with pytest.raises(DomainError):
        fedavg_aggregate([])
    with pytest.raises(DomainError):
        fedavg_aggregate([(ParameterSet({"w": [1.0]}), 0)])
    with pytest.raises(ProtocolError):
        fedavg_aggregate([(ParameterSet({"w": [1.0]}), 1), (ParameterSet({"v": [1.0]}), 1)])


# -- orchestration ------------------------------------------------------------

def test_single_node_federation_equals_centralized_training():
    rounds = 4
    cfg = fl_config(rounds)
    graph, params = small_cnn(seed=3)
    data = task_data(n=40)
    node = make_node("solo", "spot", params, data, graph, cfg, seed=21)
    meta, log = run_federation([node], cfg)
    central, losses = train_centralized(graph.copy(), params, data.images, data.labels, node.sgd,
                                        seed=21, epochs=rounds, batch_size=16)
    assert meta.params_for("spot").bitwise_equal(central)
    assert [e.mean_loss for e in log] == losses


def test_zero_rounds_returns_initial_state():
    cfg = fl_config(0)
    nodes = two_nodes(cfg)
    initial = split(nodes[0].state.local_params, REPRESENTATION)
    heads = {n.state.task_name: split(n.state.local_params, TASK) for n in nodes}
    meta, log = run_federation(nodes, cfg)
    assert log == []
    assert meta.shared_representation.bitwise_equal(initial)
    for task, head in heads.items():
        assert meta.task_heads[task].bitwise_equal(head)


def test_symmetric_nodes_give_identical_representations():
    cfg = fl_config(2)
    graph, params = small_cnn(seed=4)
    data = task_data(n=32, seed=9)
    nodes = [make_node(f"n{i}", f"t{i}", params, data, graph, cfg, seed=5) for i in range(2)]
    meta, _ = run_federation(nodes, cfg)
    a, b = (split(n.state.local_params, REPRESENTATION) for n in nodes)
    assert a.bitwise_equal(b)
    assert meta.task_heads["t0"].bitwise_equal(meta.task_heads["t1"])
    solo, _ = train_centralized(graph.copy(), params, data.images, data.labels, nodes[0].sgd,
                                seed=5, epochs=2, batch_size=16)
    for k, v in split(solo, REPRESENTATION).items():
        np.testing.assert_allclose(meta.shared_representation[k], v, rtol=1e-6, atol=1e-7)


def test_heads_never_cross_the_wire_without_collection():
    cfg = fl_config(2, collect_heads=False)
    nodes = two_nodes(cfg)
    trace = []
    meta, _ = run_federation(nodes, cfg, trace=trace)
    for n in nodes:  # the meta model is still complete, assembled off the wire
        assert meta.task_heads[n.state.task_name].bitwise_equal(split(n.state.local_params, TASK))
    task_keys = set(nodes[0].state.partition.task)
    kinds = set()
    for frame in trace:
        msg = decode_frame(frame)
        kinds.add(msg.kind)
        if msg.payload:
            assert not (set(msg.params()) & task_keys)
        for key in task_keys:
            assert key.encode() not in frame
    assert MessageKind.HEAD_UPLOAD not in kinds and MessageKind.HEAD_REQUEST not in kinds
    # every exchanged payload is exactly the representation block
    rep_keys = set(nodes[0].state.partition.representation)
    payloads = [decode_frame(f) for f in trace if decode_frame(f).payload]
    assert payloads and all(set(m.params()) == rep_keys for m in payloads)


def test_opt_in_head_collection_matches_local_assembly():
    on, off = fl_config(2, collect_heads=True), fl_config(2, collect_heads=False)
    trace = []
    meta_on, _ = run_federation(two_nodes(on), on, trace=trace)
    meta_off, _ = run_federation(two_nodes(off), off)
    assert set(meta_on.task_heads) == set(meta_off.task_heads) == {"spot", "ring"}
    for task in meta_on.task_heads:
        assert meta_on.task_heads[task].bitwise_equal(meta_off.task_heads[task])
    uploads = [decode_frame(f) for f in trace if decode_frame(f).kind == MessageKind.HEAD_UPLOAD]
    assert len(uploads) == 2 and all(m.round_index == 2 for m in uploads)


def test_node_failure_names_the_node():
    cfg = fl_config(2)
    nodes = two_nodes(cfg)
    original = nodes[1].handle

    def broken(msg):
        if msg.kind == MessageKind.GLOBAL_PARAMS and msg.round_index == 1:
            raise RuntimeError("disk on fire")
        return original(msg)

    nodes[1].handle = broken
    with pytest.raises(ProtocolError, match="node-b"):
        run_federation(nodes, cfg)


def test_stream_transport_matches_in_process():
    cfg = fl_config(2)
    meta_a, log_a = run_federation(two_nodes(cfg), cfg)
    stream_cfg = fl_config(2, transport="stream")
    meta_b, log_b = run_federation(two_nodes(stream_cfg), stream_cfg)
    assert meta_a.shared_representation.bitwise_equal(meta_b.shared_representation)
    for task in meta_a.task_heads:
        assert meta_a.task_heads[task].bitwise_equal(meta_b.task_heads[task])
    assert log_a == log_b


def test_stream_node_failure_names_the_node():
    cfg = fl_config(2, transport="stream")
    nodes = two_nodes(cfg)
    original = nodes[0].handle

    def broken(msg):
        if msg.kind == MessageKind.GLOBAL_PARAMS:
            raise RuntimeError("crashed")
        return original(msg)

    nodes[0].handle = broken
    with pytest.raises(ProtocolError, match="node-a"):
        run_federation(nodes, cfg)


def test_thread_count_does_not_change_results():
    cfg = fl_config(2)
    meta_a, log_a = run_federation(two_nodes(cfg), cfg)
    threaded = fl_config(2, threads=3)
    meta_b, log_b = run_federation(two_nodes(threaded), threaded)
    assert meta_a.shared_representation.bitwise_equal(meta_b.shared_representation)
    assert log_a == log_b


def test_round_log_covers_every_node_and_round():
    cfg = fl_config(3)
    _, log = run_federation(two_nodes(cfg), cfg)
    assert [(e.round_index, e.node_id) for e in log] == [(r, n) for r in range(3) for n in ("node-a", "node-b")]
    assert all(np.isfinite(e.mean_loss) for e in log)


def test_duplicate_node_ids_rejected():
    cfg = fl_config(1)
    nodes = two_nodes(cfg)
    nodes[1].state.node_id = "node-a"
    with pytest.raises(ProtocolError):
        run_federation(nodes, cfg)
