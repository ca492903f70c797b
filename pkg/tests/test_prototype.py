import numpy as np
import pytest

from gradcheck import check
from protomts.errors import ConfigError, ContractError, DimensionError
from protomts.losses import similarity_loss
from protomts.prototype import (
    MULTI,
    SIM_EPS,
    SINGLE,
    PrototypeLayer,
    build_multivariable,
    init_prototypes,
    kmeans_seeds,
    match,
    select_seeds,
    similarity,
)
from protomts.tensor import Tensor, mul, total

TRIALS = 20


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_similarity_values():
    assert similarity(T([1.0, 2.0]), T([1.0, 2.0])).item() == pytest.approx(10000.0, rel=1e-15)
    assert similarity(T([0.0, 0.0]), T([3.0, 4.0])).item() == pytest.approx(1 / (5 + 1e-4), rel=1e-15)
    assert round(similarity(T([0.0, 0.0]), T([3.0, 4.0])).item(), 7) == 0.199996


def test_similarity_monotone():
    rng = np.random.default_rng(0)
    for _ in range(TRIALS):
        a, b, c = rng.normal(size=(3, 4))
        d1, d2 = np.linalg.norm(a - b), np.linalg.norm(a - c)
        s1, s2 = similarity(T(a), T(b)).item(), similarity(T(a), T(c)).item()
        assert (d1 < d2) == (s1 > s2)


def test_similarity_length_mismatch():
    with pytest.raises(DimensionError):
        similarity(T([1.0]), T([1.0, 2.0]))


def test_match_count_and_argmax():
    protos = np.random.default_rng(1).normal(size=(4, 3))
    layer = PrototypeLayer(T(protos, True))
    out = match(layer, T(protos[2]))
    assert out.shape == (4,)
    assert int(np.argmax(out.data)) == 2
    assert np.all(out.data > 0) and np.all(out.data <= 1 / SIM_EPS)


def test_match_dimension_error():
    layer = PrototypeLayer(T(np.zeros((2, 3)), True))
    with pytest.raises(DimensionError):
        match(layer, T([1.0, 2.0]))


def test_match_equivariant_under_permutation():
    rng = np.random.default_rng(2)
    protos, x = rng.normal(size=(5, 3)), rng.normal(size=3)
    perm = rng.permutation(5)
    a = match(PrototypeLayer(T(protos)), T(x)).data
    b = match(PrototypeLayer(T(protos[perm])), T(x)).data
    assert np.array_equal(a[perm], b)


def test_batch_match_equals_rowwise():
    rng = np.random.default_rng(3)
    layer = PrototypeLayer(T(rng.normal(size=(4, 3))))
    X = rng.normal(size=(6, 3))
    batch = match(layer, T(X)).data
    assert np.allclose(batch, np.stack([match(layer, T(x)).data for x in X]), rtol=1e-15, atol=0)


@pytest.mark.parametrize("trial", range(TRIALS))
def test_gradcheck_match(trial):
    rng = np.random.default_rng(10 + trial)
    layer = PrototypeLayer(T(rng.normal(size=(4, 3)), True))
    x = T(rng.normal(size=3), True)
    probe = T(rng.normal(size=4))
    assert check(lambda: total(mul(match(layer, x), probe)), [layer.prototypes, x]) < 1e-5


def test_build_multivariable_blocks():
    rng = np.random.default_rng(4)
    parts = [T(rng.uniform(0.1, 5, size=4)) for _ in range(4)]
    rep = build_multivariable(parts)
    assert rep.vector.shape == (16,)
    assert rep.boundaries == [0, 4, 8, 12]
    for k, part in enumerate(parts):
        assert rep.vector.data[rep.block(k)].tobytes() == part.data.tobytes()


def test_build_multivariable_single_and_empty():
    x = T([1.0, 2.0, 3.0])
    assert build_multivariable([x]).vector.data.tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ContractError):
        build_multivariable([])


def test_layer_validation():
    with pytest.raises(ContractError):
        PrototypeLayer(T(np.zeros((0, 3))))
    with pytest.raises(ConfigError):
        PrototypeLayer(T(np.zeros((1, 3))), level="other")


def test_init_prototypes_on_encodings():
    enc = np.random.default_rng(5).normal(size=(30, 4))
    layer = init_prototypes(SINGLE, 6, enc, seed=7, variable=2)
    assert layer.count == 6 and layer.dim == 4 and layer.variable == 2
    for p in layer.prototypes.data:
        assert np.any(np.all(enc == p, axis=1))
    assert similarity_loss(layer.prototypes, T(enc)).item() == 0.0
    again = init_prototypes(SINGLE, 6, enc, seed=7)
    assert np.array_equal(layer.prototypes.data, again.prototypes.data)


def test_select_seeds_distinct_and_deterministic():
    rng = np.random.default_rng(6)
    vecs = np.repeat(rng.normal(size=(3, 2)), 4, axis=0)  # heavy duplication
    idx = select_seeds(vecs, 8, seed=1)
    assert len(set(idx.tolist())) == 8
    assert np.array_equal(idx, select_seeds(vecs, 8, seed=1))


def test_select_seeds_spreads_over_clusters():
    rng = np.random.default_rng(8)
    centers = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], dtype=float)
    vecs = np.concatenate([c + 0.01 * rng.normal(size=(50, 2)) for c in centers])
    for seed in range(10):
        idx = select_seeds(vecs, 4, seed)
        assert sorted((idx // 50).tolist()) == [0, 1, 2, 3]


def test_init_too_many():
    with pytest.raises(ConfigError):
        init_prototypes(MULTI, 5, np.zeros((4, 2)), seed=0)


def test_kmeans_seeds_one_per_cluster():
    rng = np.random.default_rng(9)
    centers = np.array([[0, 0], [1.2, 0], [5, 5], [5, 7]], dtype=float)
    sizes = [400, 400, 50, 50]  # unequal: a single k-means++ draw can double up
    vecs = np.concatenate([c + 0.1 * rng.normal(size=(m, 2)) for c, m in zip(centers, sizes)])
    owner = np.repeat(np.arange(4), sizes)
    for seed in range(10):
        idx = kmeans_seeds(vecs, 4, seed)
        assert sorted(owner[idx].tolist()) == [0, 1, 2, 3]
        assert len(set(idx.tolist())) == 4


def test_kmeans_seeds_snap_distinct_and_deterministic():
    vecs = np.repeat(np.eye(3), 5, axis=0)  # 3 distinct points, 15 rows
    idx = kmeans_seeds(vecs, 6, seed=2)
    assert len(set(idx.tolist())) == 6
    assert np.array_equal(idx, kmeans_seeds(vecs, 6, seed=2))


def test_unrefined_init_is_single_draw():
    enc = np.random.default_rng(5).normal(size=(30, 4))
    layer = init_prototypes(SINGLE, 3, enc, seed=1, refine=False)
    assert np.array_equal(layer.prototypes.data, enc[select_seeds(enc, 3, 1)])
