import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracle
from conftest import frozen, random_pair
from ppc.contrast import (
    ContrastConfig,
    embedding_objective,
    fd_check,
    nce_grad_v,
    pixel_proto_nce,
    single_term_config,
    total_contrast_loss,
)
from ppc.prototypes import PrototypeSet
from ppc.tensor import RngStream
from ppc.views import SpatialTransform, build_view_pair

E2 = np.eye(2)


def identity_pair(seed, batch=2, num_classes=3, size=8, feat_dim=6, proj_dim=5):
    gen = np.random.default_rng(seed)
    f = gen.normal(size=(batch, feat_dim, size, size))
    cam_w = gen.normal(size=(num_classes, feat_dim))
    proj_w = gen.normal(size=(proj_dim, feat_dim))
    tags = np.ones((batch, num_classes), bool)
    return build_view_pair(f, f.copy(), SpatialTransform(rescale=1.0), cam_w, proj_w, tags, 0.3, stride=1)


def test_nce_examples():
    value = pixel_proto_nce(np.array([1.0, 0.0]), 0, E2, 0.1)
    assert abs(value - math.log1p(math.exp(-10))) <= 1e-15
    assert abs(value - 4.5399e-5) <= 1e-9
    v = np.array([1.0, 1.0]) / math.sqrt(2)
    assert abs(pixel_proto_nce(v, 1, E2) - math.log(2)) <= 1e-12
    protos = np.tile([0.6, 0.8], (7, 1))
    assert abs(pixel_proto_nce(np.array([0.6, 0.8]), 3, protos) - math.log(7)) <= 1e-12


def test_nce_missing_positive_and_subset():
    ps = PrototypeSet(E2, np.array([True, False]), E2.copy(), np.ones(2))
    assert math.isnan(pixel_proto_nce(np.array([1.0, 0.0]), 1, ps))
    assert pixel_proto_nce(np.array([1.0, 0.0]), 0, ps) == 0.0
    assert math.isnan(pixel_proto_nce(np.array([1.0, 0.0]), 0, E2, subset=[1]))


def test_nce_gradient_example():
    g = nce_grad_v(np.array([1.0, 0.0]), 0, E2, 0.1)
    np.testing.assert_allclose(g, [-4.5398e-4, 4.5398e-4], rtol=1e-4)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        num = (pixel_proto_nce(np.array([1.0, 0.0]) + e, 0, E2) - pixel_proto_nce(np.array([1.0, 0.0]) - e, 0, E2)) / (2 * h)
        assert abs(num - g[k]) <= 1e-8
    assert not nce_grad_v(np.array([1.0, 0.0]), 0, E2[:1]).any()


unit2 = st.floats(-math.pi, math.pi).map(lambda a: np.array([math.cos(a), math.sin(a)]))


@given(unit2, st.lists(unit2, min_size=2, max_size=6), st.floats(0.05, 2.0))
def test_nce_properties(v, others, tau):
    protos = np.array(others)
    value = pixel_proto_nce(v, 0, protos, tau)
    assert value >= 0
    logits = protos @ v / tau
    naive = math.log(sum(math.exp(x) for x in logits)) - logits[0]
    assert abs(value - naive) <= 1e-12 * max(1.0, abs(naive))
    closer = protos.copy()
    closer[0] = v
    if protos[0] @ v < 1 - 1e-9:
        assert pixel_proto_nce(v, 0, closer, tau) < value


def test_config_validation():
    for bad in ({"tau": 0}, {"alpha": -1}, {"beta": -0.1}, {"pool": "nope"}):
        with pytest.raises(ValueError):
            ContrastConfig(**bad)
    c = ContrastConfig()
    assert (c.tau, c.alpha, c.beta) == (0.1, 0.1, 0.1)


@pytest.mark.parametrize("seed", range(4))
def test_identity_views_make_terms_equal(seed):
    pair = identity_pair(seed)
    report, _, _ = total_contrast_loss(pair, ContrastConfig(mining=False, sampling=False), RngStream(seed))
    assert abs(report.l_cp - report.l_cc) <= 1e-10
    assert abs(report.l_cp - report.l_intra) <= 1e-10
    assert report.l_cp > 0


def test_mining_with_one_negative_is_unmined():
    pair = identity_pair(1, num_classes=1)
    mined, _, _ = total_contrast_loss(pair, ContrastConfig(sampling=False), RngStream(1))
    plain, _, _ = total_contrast_loss(pair, ContrastConfig(sampling=False, mining=False), RngStream(1))
    assert mined.l_intra == plain.l_intra


def test_two_pixel_cross_cam_hand_case():
    # one image, one row of two pixels; view features disagree on the right pixel
    f_s = np.array([[[[2.0, 0.0]], [[0.0, 2.0]]]])
    f_t = np.array([[[[2.0, 2.0]], [[0.0, 0.1]]]])
    cam_w = np.eye(2)
    proj_w = np.eye(2)
    tags = np.ones((1, 2), bool)
    pair = build_view_pair(f_s, f_t, SpatialTransform(rescale=1.0), cam_w, proj_w, tags, 0.3, stride=1)
    cfg = ContrastConfig(k=1, mining=False, sampling=False)
    report, sel, _ = total_contrast_loss(pair, cfg, RngStream(0))
    assert sel.labels["source"].tolist() == [1, 2]
    assert sel.labels["target"].tolist() == [1, 1]
    hand = 0.0
    protos, rows = oracle.view_prototypes(pair, sel)
    for view, other in (("source", "target"), ("target", "source")):
        ps = protos[view]
        terms = [oracle.nce(rows[view][i], int(sel.labels[other][i]), ps, sorted(ps), 0.1)
                 for i in range(2) if int(sel.labels[other][i]) in ps]
        hand += sum(terms) / len(terms)
    assert abs(report.l_cc - hand) <= 1e-12
    aligned = oracle.nce(rows["source"][1], 1, protos["source"], sorted(protos["source"]), 0.1)
    assert aligned > 1.0   # the misaligned pixel is pulled toward the wrong prototype


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("shape", [(2, 3, 8), (2, 4, 16)])
def test_losses_match_loop_oracle(seed, shape):
    batch, classes, size = shape
    pair = random_pair(seed, batch=batch, num_classes=classes, size=size)
    for mining, sampling in ((True, True), (False, False), (True, False)):
        cfg, sel = frozen(pair, seed, k=4, n_per_class=4, mining=mining, sampling=sampling)
        report, _, _ = total_contrast_loss(pair, cfg, selection=sel)
        cp, cc, intra = oracle.loss_terms(pair, sel, mining=mining, sampling=sampling)
        assert abs(report.l_cp - cp) <= 1e-10
        assert abs(report.l_cc - cc) <= 1e-10
        assert abs(report.l_intra - intra) <= 1e-10


@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1), st.booleans(), st.booleans(), st.booleans())
def test_report_arithmetic(seed, alpha, beta, use_cp, use_cc, use_intra):
    pair = random_pair(seed)
    cfg = ContrastConfig(alpha=alpha, beta=beta, k=4, n_per_class=4,
                         use_cp=use_cp, use_cc=use_cc, use_intra=use_intra)
    r, _, _ = total_contrast_loss(pair, cfg, RngStream(seed))
    assert r.l_cross == (r.l_cp if use_cp else 0.0) + (r.l_cc if use_cc else 0.0)
    assert r.l_contrast - (alpha * r.l_cross + beta * (r.l_intra if use_intra else 0.0)) == 0
    assert math.isclose(float(np.sum(r.components)), r.l_contrast, rel_tol=1e-12, abs_tol=1e-14)
    assert min(r.l_cp, r.l_cc, r.l_intra) >= 0


def test_zero_weights_zero_loss():
    r, _, grads = total_contrast_loss(random_pair(2), ContrastConfig(alpha=0, beta=0), RngStream(2), need_grad=True)
    assert r.l_contrast == 0.0 and r.l_cp > 0
    assert all(not g.any() for g in grads.values())


def test_selection_replay_is_deterministic():
    pair = random_pair(5)
    a, sel, _ = total_contrast_loss(pair, ContrastConfig(k=4, n_per_class=4), RngStream(9))
    b, _, _ = total_contrast_loss(pair, ContrastConfig(k=4, n_per_class=4), RngStream(9))
    c, _, _ = total_contrast_loss(pair, ContrastConfig(k=4, n_per_class=4), selection=sel)
    assert a.l_intra == b.l_intra == c.l_intra


def test_fd_check_quadratic():
    gen = np.random.default_rng(0)
    a = gen.normal(size=(5, 5))
    a = a @ a.T
    x = gen.normal(size=5)

    def loss(p):
        return 0.5 * p["x"] @ a @ p["x"] + np.sin(p["y"]).sum()

    y = gen.normal(size=7)
    err = fd_check(loss, {"x": a @ x, "y": np.cos(y)}, {"x": x, "y": y}, n_coords=12)
    assert err <= 1e-9
    bad = fd_check(loss, {"x": 1.01 * (a @ x), "y": np.cos(y)}, {"x": x, "y": y}, n_coords=12)
    assert bad > 1e-3


@pytest.mark.parametrize("term", ["cp", "cc", "intra"])
@pytest.mark.parametrize("seed", range(3))
def test_embedding_gradients(term, seed):
    pair = random_pair(seed, num_classes=3)
    cfg, sel = frozen(pair, seed, k=4, n_per_class=4)
    loss_fn, grads, params = embedding_objective(pair, sel, single_term_config(cfg, term))
    assert fd_check(loss_fn, grads, params, h=1e-5, n_coords=200, rng=np.random.default_rng(seed)) <= 1e-6


def test_positive_only_gradient_vanishes():
    g = nce_grad_v(np.array([0.6, 0.8]), 0, np.array([[0.6, 0.8]]))
    assert not g.any()
