import numpy as np
import pytest

from dagsched.diffcore import DenseNet, Tape
from dagsched.gnn import (FEATURE_DIM, FeatureScaler, embed, embed_dag, embed_dags, embed_global, embed_globals,
                          embed_nodes, encode_observation, gradients_through_embedding, init_gnn_params,
                          make_batch)
from dagsched.simcore import SchedAction, Server
from dagsched.trace import ApplicationDag, StageSpec

from conftest import chain_app, fig1_app, observe_arrived, single_app

SERVERS = [Server(0, 1.0, 4)]


def encode(dags, scaler=FeatureScaler(), actions=()):
    return encode_observation(observe_arrived(dags, SERVERS, actions), scaler)


def nodes_oracle(enc, params):
    """Recursive definition with a hop budget, straight numpy."""
    x = enc.x
    kids = {}
    for p, c in zip(enc.parent, enc.child):
        kids.setdefault(int(p), []).append(int(c))
    g0 = params.g.predict(np.zeros((1, FEATURE_DIM)))[0]

    def H(j, d):
        ch = kids.get(j, [])
        if d == 0 or not ch:
            return x[j] + g0
        s = np.array([params.attention.predict(np.concatenate([x[j], x[u], [enc.tc[u]]]))[0, 0] for u in ch])
        a = np.exp(s - s.max())
        a /= a.sum()
        agg = sum(a[k] * params.f.predict(H(u, d - 1))[0] for k, u in enumerate(ch))
        return x[j] + params.g.predict(agg)[0]

    return np.array([H(j, params.max_depth) for j in range(len(x))])


def test_features_fixed_order():
    dag = ApplicationDag(0, 0.0, (StageSpec(0, 3, 2.0, 7.0), StageSpec(1, 1, 4.0, 0.0, (0,))))
    scaler = FeatureScaler(task_count=2.0, task_work=4.0, executors=4.0, data_volume=7.0)
    enc = encode([dag], scaler, [SchedAction((0, 0), 2)])
    assert enc.x.shape == (2, FEATURE_DIM)
    # remaining, work, held, ready, data
    assert enc.x[0].tolist() == [1.5, 0.5, 0.5, 1.0, 1.0]
    assert enc.x[1].tolist() == [0.5, 1.0, 0.5, 0.0, 0.0]


def test_single_node_is_x_under_zero_bias(rng):
    params = init_gnn_params(rng)
    enc = encode([single_app(3.0, tasks=2)])
    emb = embed(enc, params)
    # biases are zero at init so g(0) = 0
    assert np.array_equal(emb.per_node[(0, 0)], enc.x[0])


def test_singleton_child_weight_one(rng):
    params = init_gnn_params(rng)
    enc = encode([chain_app(2)])
    batch = make_batch([enc])
    tape = Tape(enabled=False)
    alpha = tape.segment_softmax(params.attention(tape.constant(batch.attention_input), tape), batch.parent, 2)
    assert alpha.value.ravel().tolist() == [1.0]


def test_alpha_distributions(rng):
    params = init_gnn_params(rng)
    dag = fig1_app(works=(1.0, 2.0, 3.0, 4.0, 5.0), counts=(1, 2, 3, 4, 5))
    enc = encode([dag])
    batch = make_batch([enc])
    tape = Tape(enabled=False)
    alpha = tape.segment_softmax(params.attention(tape.constant(batch.attention_input), tape),
                                 batch.parent, batch.n_nodes).value[:, 0]
    assert np.all(alpha >= 0)
    for p in np.unique(batch.parent):
        assert abs(alpha[batch.parent == p].sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("depth", [1, 2, 8])
def test_nodes_match_recursive_oracle(rng, depth):
    params = init_gnn_params(rng, max_depth=depth)
    for net in params.nets().values():
        for i in range(1, len(net.params), 2):
            net.params[i] = rng.normal(scale=0.2, size=net.params[i].shape)
    dags = [fig1_app(works=(1.0, 2.0, 3.0, 0.5, 1.5), counts=(2, 1, 3, 1, 2)),
            chain_app(4, app_id=1, work=2.0, tasks=2)]
    enc = encode(dags)
    got = embed_nodes(make_batch([enc]), params, Tape(enabled=False)).value
    assert np.allclose(got, nodes_oracle(enc, params), rtol=1e-12, atol=1e-12)


def _chain(works):
    return ApplicationDag(0, 0.0, tuple(StageSpec(i, 1, w, 0.0, (i - 1,) if i else ()) for i, w in enumerate(works)))


def test_locality_max_depth_8(rng):
    params = init_gnn_params(rng, max_depth=8)
    base = [1.0] * 10
    root = lambda works: embed(encode([_chain(works)]), params).per_node[(0, 0)]
    ref = root(base)
    far = list(base)
    far[9] = 7.0  # nine hops from the root
    assert np.array_equal(root(far), ref)
    near = list(base)
    near[8] = 7.0  # eight hops, inside the budget
    assert not np.array_equal(root(near), ref)


def test_child_permutation_invariance(rng):
    params = init_gnn_params(rng)
    works = {1: 1.0, 2: 2.0, 3: 3.0}

    def root_and_sink(order):
        # middle stages relabelled so the children of the root are listed in a different order
        ws = (1.0,) + tuple(works[o] for o in order) + (1.0,)
        emb = embed(encode([fig1_app(works=ws)]), params)
        return emb.per_node[(0, 0)], emb.per_node[(0, 4)]

    a = root_and_sink((1, 2, 3))
    b = root_and_sink((3, 1, 2))
    assert np.max(np.abs(a[0] - b[0])) <= 1e-12 and np.max(np.abs(a[1] - b[1])) <= 1e-12


def test_embed_dag_single_and_permutation(rng):
    params = init_gnn_params(rng)
    h = rng.normal(size=(5, FEATURE_DIM))
    y = embed_dag(h, params)
    assert np.max(np.abs(embed_dag(h[[3, 0, 4, 1, 2]], params) - y)) <= 1e-12
    one = embed_dag(h[:1], params)
    # singleton weight is 1, so y = g(f(H))
    assert np.allclose(one, params.dag_g.predict(params.dag_f.predict(h[:1]))[0], rtol=1e-14, atol=1e-15)
    with pytest.raises(ValueError):
        embed_dag(np.zeros((0, FEATURE_DIM)), params)


def test_identical_apps_identical_y(rng):
    params = init_gnn_params(rng)
    emb = embed(encode([fig1_app(0), fig1_app(1)]), params)
    assert np.array_equal(emb.per_dag[0], emb.per_dag[1])


def test_embed_global_properties(rng):
    params = init_gnn_params(rng)
    ys = rng.normal(size=(4, FEATURE_DIM))
    z = embed_global(ys, params)
    assert np.max(np.abs(embed_global(ys[::-1], params) - z)) <= 1e-12
    assert np.allclose(embed_global(ys[:1], params), params.global_g.predict(params.global_f.predict(ys[:1]))[0])
    assert np.array_equal(embed_global(np.zeros((0, FEATURE_DIM)), params), np.zeros(FEATURE_DIM))


def test_zero_feature_app_ablation(rng):
    params = init_gnn_params(rng)
    base = [fig1_app(0, works=(1.0, 2.0, 1.0, 1.0, 3.0))]
    # an app with zero work and zero data
    zero = ApplicationDag(1, 0.0, (StageSpec(0, 1, 0.0),))
    with_zero = embed(encode(base + [zero]), params)
    alone = embed(encode(base), params)
    # y of the other app is untouched (batched sums may differ in the last ulp)
    assert np.allclose(with_zero.per_dag[0], alone.per_dag[0], rtol=1e-12, atol=1e-15)
    recomputed = embed_global(np.stack([with_zero.per_dag[0], with_zero.per_dag[1]]), params)
    assert np.allclose(with_zero.global_, recomputed, rtol=1e-13, atol=1e-15)


def test_empty_cluster_zero_z(rng):
    params = init_gnn_params(rng)
    enc = encode([])
    assert np.array_equal(embed(enc, params).global_, np.zeros(FEATURE_DIM))


def test_embedding_pure(rng):
    params = init_gnn_params(rng)
    enc = encode([fig1_app(0), chain_app(3, app_id=1)])
    a, b = embed(enc, params), embed(enc, params)
    assert all(np.array_equal(a.per_node[k], b.per_node[k]) for k in a.per_node)
    assert np.array_equal(a.global_, b.global_)


def _fd(f, net, h=1e-5):
    out = []
    for p in net.params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = f()
            p[i] = old - h
            dn = f()
            p[i] = old
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def _rel(a, b):
    return max(float(np.max(np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), 1e-6))) for x, y in zip(a, b))


def test_two_node_chain_gradient_fd(rng):
    params = init_gnn_params(rng, hidden=4)
    # nonzero biases keep g(0) off the rectifier kink
    for net in params.nets().values():
        for i in range(1, len(net.params), 2):
            net.params[i] = rng.normal(scale=0.3, size=net.params[i].shape)
    enc = encode([chain_app(2, work=2.0, tasks=3)])
    c = rng.normal(size=FEATURE_DIM)

    def loss_value():
        return float(embed(enc, params).per_node[(0, 0)] @ c)

    tape = Tape()
    h = embed_nodes(make_batch([enc]), params, tape)
    loss = tape.weighted_sum(h, np.stack([c, np.zeros(FEATURE_DIM)]))
    grads = gradients_through_embedding(tape, loss, params)
    for name in ("f", "g", "attention"):
        assert _rel(grads[name], _fd(loss_value, getattr(params, name))) <= 1e-4


def test_end_to_end_gradient_fd(rng):
    # loss on z reaches every network through the three levels
    params = init_gnn_params(rng, hidden=3)
    for net in params.nets().values():
        for i in range(1, len(net.params), 2):
            net.params[i] = rng.normal(scale=0.3, size=net.params[i].shape)
    enc = encode([fig1_app(0, works=(1.0, 2.0, 3.0, 1.0, 2.0), counts=(1, 2, 1, 3, 1)),
                  ApplicationDag(1, 0.0, (StageSpec(0, 2, 1.5), StageSpec(1, 1, 1.0, 0.0, (0,))))])
    c = rng.normal(size=FEATURE_DIM)

    def loss_value():
        return float(embed(enc, params).global_ @ c)

    tape = Tape()
    batch = make_batch([enc])
    z = embed_globals(embed_dags(embed_nodes(batch, params, tape), batch, params, tape), batch, params, tape)
    grads = gradients_through_embedding(tape, tape.weighted_sum(z, c[None, :]), params)
    for name, net in params.nets().items():
        assert _rel(grads[name], _fd(loss_value, net)) <= 1e-4, name


def test_unused_paths_get_zero_gradient(rng):
    params = init_gnn_params(rng)
    enc = encode([single_app(2.0)])
    tape = Tape()
    h = embed_nodes(make_batch([enc]), params, tape)
    grads = gradients_through_embedding(tape, tape.weighted_sum(h, 1.0), params)
    assert all(not np.any(g) for g in grads["f"] + grads["attention"] + grads["dag_f"])


def test_missing_tape_segment(rng):
    params = init_gnn_params(rng)
    tape = Tape()
    v = DenseNet.init((2, 1), rng)(tape.constant(np.ones((1, 2))), tape)
    with pytest.raises(RuntimeError):
        gradients_through_embedding(tape, v, params)


def test_scaler_from_dags(desk_servers):
    dags = [ApplicationDag(0, 0.0, (StageSpec(0, 2, 1.0, 4.0), StageSpec(1, 4, 3.0, 0.0, (0,))))]
    s = FeatureScaler.from_dags(dags, desk_servers)
    assert (s.task_count, s.task_work, s.executors, s.data_volume, s.app_work) == (3.0, 2.0, 12.0, 2.0, 14.0)
