import numpy as np
import pytest

from stablequant.data import make_images, make_sbm, split_holdout


def test_images_deterministic_and_shaped():
    a, b = make_images(20, 3, 2, seed=7), make_images(20, 3, 2, seed=7)
    assert a.x.tobytes() == b.x.tobytes() and np.array_equal(a.y, b.y)
    assert a.x.shape == (20, 2, 16, 16) and set(a.y) == {0, 1, 2}
    assert make_images(20, seed=8).x.tobytes() != make_images(20, seed=7).x.tobytes()


@pytest.mark.parametrize("kw", [dict(classes=5), dict(channels=4), dict(size=10), dict(n=0),
                                dict(noise=-1.0), dict(kind="stripes")])
def test_image_params_validated(kw):
    with pytest.raises(ValueError):
        make_images(**{"n": 8, **kw})


def test_noise_free_blobs_linearly_separable():
    d = make_images(200, classes=2, noise=0.0, kind="blobs", seed=0)
    X = np.concatenate([d.x.reshape(len(d.x), -1), np.ones((len(d.x), 1))], axis=1)
    w = np.zeros(X.shape[1])
    sign = 2.0 * d.y - 1
    for _ in range(200):  # perceptron probe
        miss = np.flatnonzero(sign * (X @ w) <= 0)
        if not len(miss):
            break
        w += sign[miss[0]] * X[miss[0]]
    assert np.mean((X @ w > 0) == (d.y == 1)) == 1.0


def test_sbm_structure():
    g = make_sbm(120, 3, 0.3, 0.01, features=5, seed=2)
    lab = g.graph.labels
    e = g.graph.edges
    same = np.mean(lab[e[:, 0]] == lab[e[:, 1]])
    assert same > 0.8
    assert not (g.train_mask & g.val_mask).any() and not (g.train_mask & g.test_mask).any()
    assert (g.train_mask | g.val_mask | g.test_mask).all()
    assert make_sbm(seed=4).graph.edges.tobytes() == make_sbm(seed=4).graph.edges.tobytes()


def test_sbm_null_model_is_at_chance():
    # equal intra/inter probabilities and no feature signal: propagation cannot find the blocks
    g = make_sbm(400, 4, 0.05, 0.05, feature_noise=1.0, seed=3)
    lab = g.graph.labels
    e = g.graph.edges
    assert abs(np.mean(lab[e[:, 0]] == lab[e[:, 1]]) - 0.25) < 0.05


def test_split_holdout():
    tr, ho = split_holdout(50, 0.1, 3)
    assert len(ho) == 5 and len(tr) == 45 and not set(tr) & set(ho)
    assert np.array_equal(split_holdout(50, 0.1, 3)[1], ho)
