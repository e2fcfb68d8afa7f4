import hashlib
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apn import model as apn
from apn import tensor as T
from apn.tensor import Tensor, grad_check

from apn.training import TrainConfig
from conftest import full_config
from oracles import cpt_loops, similarity_loops, softmax_ce_scalar


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- encoder

def test_encode_zero_image_zero_weights():
    p = apn.init_params(4, (2, 4), seed=0, dtype=np.float64)
    for t in p.tensors():
        t.data[...] = 0
    f = apn.encode(np.zeros((3, 16, 16)), p)
    assert f.shape == (4, 4, 4)
    assert np.all(f.data == 0)


def test_encode_default_geometry():
    p = apn.init_params(12, seed=0)
    f = apn.encode(np.zeros((2, 3, 64, 64), dtype=np.float32), p)
    assert f.shape == (2, 8, 8, 64)


def test_encode_wrong_channels():
    p = apn.init_params(4, (2, 4), seed=0)
    with pytest.raises(ValueError, match="channels"):
        apn.encode(np.zeros((1, 1, 16, 16)), p)


def test_encode_deterministic():
    p = apn.init_params(12, seed=123, dtype=np.float64)
    img = np.random.default_rng(9).uniform(0, 1, size=(3, 64, 64))
    a, b = apn.encode(img, p).data, apn.encode(img, p).data
    assert hashlib.sha256(a.tobytes()).hexdigest() == hashlib.sha256(b.tobytes()).hexdigest()


def test_global_feature_is_spatial_mean():
    f = t64(np.random.default_rng(0).normal(size=(3, 5, 7)))
    np.testing.assert_allclose(apn.global_feature(f).data, f.data.mean(axis=(0, 1)), atol=1e-12)


# ---------------------------------------------------------------- BaseMod

def test_base_logits_self_similarity():
    phi = np.array([[1, 0, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]], dtype=float)
    V = t64(np.eye(4))
    logits = apn.base_logits(t64(phi[0]), V, phi).data
    assert logits[0] == pytest.approx(np.sum(phi[0] ** 2))
    assert np.argmax(logits) == 0


def test_base_logits_zero_feature():
    logits = apn.base_logits(t64(np.zeros(3)), t64(np.ones((3, 2))), np.ones((4, 2)))
    assert np.all(logits.data == 0)


def test_base_logits_triple_product():
    rng = np.random.default_rng(2)
    g, V, phi = rng.normal(size=5), rng.normal(size=(5, 3)), rng.uniform(size=(2, 3))
    expected = [sum(g[c] * V[c, k] * phi[j, k] for c in range(5) for k in range(3)) for j in range(2)]
    np.testing.assert_allclose(apn.base_logits(t64(g), t64(V), phi).data, expected, atol=1e-12)


def test_base_logits_empty_class_set():
    with pytest.raises(ValueError):
        apn.base_logits(t64(np.ones(2)), t64(np.ones((2, 2))), np.zeros((0, 2)))


def test_cls_loss_equal_logits():
    assert apn.cls_loss(t64([0.3, 0.3]), 5, [5, 9]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cls_loss_three_class_oracle():
    oracle = softmax_ce_scalar([1.0, 0.0, 0.0], 0)
    assert oracle == pytest.approx(0.5514, abs=1e-4)
    assert apn.cls_loss(t64([1.0, 0.0, 0.0]), 0, [0, 1, 2]).item() == pytest.approx(oracle, abs=1e-12)


def test_cls_loss_monotone_along_ray():
    vals = [apn.cls_loss(t64([t, 0.0, 0.5]), 0, [0, 1, 2]).item() for t in np.linspace(0, 30, 40)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-12


def test_cls_loss_rejects_unseen_target():
    with pytest.raises(ValueError, match="seen"):
        apn.cls_loss(t64([0.0, 0.0]), 7, [0, 1])


# ---------------------------------------------------------------- ProtoMod

def test_similarity_orthogonal_is_zero():
    f = np.zeros((3, 3, 4))
    f[..., :2] = np.random.default_rng(0).normal(size=(3, 3, 2))
    P = np.zeros((1, 4))
    P[0, 2:] = [1.0, -2.0]
    assert np.all(apn.similarity_maps(t64(f), t64(P)).data == 0)


def test_similarity_constant_feature():
    c = np.array([1.0, 2.0, -1.0])
    f = np.broadcast_to(c, (4, 5, 3)).copy()
    P = np.array([[0.5, 0.5, 0.5], [1.0, 0.0, 2.0]])
    M = apn.similarity_maps(t64(f), t64(P)).data
    assert M.shape == (2, 4, 5)
    np.testing.assert_allclose(M[0], P[0] @ c)
    np.testing.assert_allclose(M[1], P[1] @ c)


def test_similarity_matches_loops():
    rng = np.random.default_rng(4)
    f, P = rng.normal(size=(3, 3, 4)), rng.normal(size=(2, 4))
    np.testing.assert_allclose(apn.similarity_maps(t64(f), t64(P)).data, similarity_loops(f, P), atol=1e-12)


def test_predict_attributes_example():
    M = t64([[[0.2, 0.5], [0.1, 0.3]]])
    a, peaks = apn.predict_attributes(M)
    assert a.data[0] == 0.5
    assert tuple(peaks[0]) == (0, 1)


def test_predict_attributes_tie():
    _, peaks = apn.predict_attributes(t64(np.ones((1, 3, 3))))
    assert tuple(peaks[0]) == (0, 0)


def test_predict_attributes_permutation():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(3, 4, 4))
    perm = rng.permutation(16)
    Mp = M.reshape(3, -1)[:, perm].reshape(3, 4, 4)
    np.testing.assert_array_equal(apn.predict_attributes(t64(M))[0].data, apn.predict_attributes(t64(Mp))[0].data)


def test_reg_loss_cases():
    assert apn.reg_loss(t64([0.3, 0.7]), [0.3, 0.7]).item() == 0
    assert apn.reg_loss(t64([1.0, 0.0]), [0.0, 1.0]).item() == pytest.approx(2.0)
    rng = np.random.default_rng(6)
    a, phi = rng.normal(size=12), rng.uniform(size=12)
    assert apn.reg_loss(t64(a), phi).item() == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, phi)), abs=1e-12)


def test_ad_loss_cases():
    assert apn.ad_loss(t64(np.zeros((3, 2))), [[0, 1], [2]]).item() == 0
    assert apn.ad_loss(t64([[3.0, 0.0], [4.0, 0.0]]), [[0, 1]]).item() == pytest.approx(5.0)
    P = np.random.default_rng(7).normal(size=(4, 3))
    assert apn.ad_loss(t64(P), [[0], [1], [2], [3]]).item() == pytest.approx(np.abs(P).sum())


def test_ad_loss_ignores_ungrouped():
    P = np.random.default_rng(8).normal(size=(3, 2))
    base = apn.ad_loss(t64(P), [[0, 1]]).item()
    P[2] = 100.0
    assert apn.ad_loss(t64(P), [[0, 1]]).item() == base


@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_ad_loss_merging_groups_never_increases(seed, k):
    P = np.random.default_rng(seed).normal(size=(k, 3))
    split = k // 2
    separate = apn.ad_loss(t64(P), [list(range(split)), list(range(split, k))]).item()
    merged = apn.ad_loss(t64(P), [list(range(k))]).item()
    assert merged <= separate + 1e-12


def test_cpt_loss_zero_off_peak():
    M = np.zeros((2, 3, 3))
    M[0, 1, 2] = 4.0
    M[1, 0, 0] = 1.0
    _, peaks = apn.predict_attributes(t64(M))
    assert apn.cpt_loss(t64(M), peaks).item() == 0


def test_cpt_loss_tie_rule_example():
    M = t64([[[1.0, 1.0], [0.0, 0.0]]])
    _, peaks = apn.predict_attributes(M)
    assert tuple(peaks[0]) == (0, 0)
    assert apn.cpt_loss(M, peaks).item() == pytest.approx(0.25, abs=1e-12)


def test_cpt_loss_matches_loops_on_nonnegative_maps():
    M = np.random.default_rng(9).uniform(0, 2, size=(3, 4, 5))
    _, peaks = apn.predict_attributes(t64(M))
    assert apn.cpt_loss(t64(M), peaks).item() == pytest.approx(cpt_loops(M, peaks), abs=1e-12)


def test_cpt_loss_unclamped_matches_literal_formula():
    M = np.random.default_rng(10).normal(size=(3, 4, 5))
    _, peaks = apn.predict_attributes(t64(M))
    assert apn.cpt_loss(t64(M), peaks, clamp=False).item() == pytest.approx(cpt_loops(M, peaks), abs=1e-12)
    assert apn.cpt_loss(t64(M), peaks).item() == pytest.approx(cpt_loops(np.maximum(M, 0), peaks), abs=1e-12)


@given(st.integers(0, 2**31 - 1), st.one_of(st.just(0.0), st.floats(0.01, 5.0)))
def test_prototype_scaling(seed, alpha):
    rng = np.random.default_rng(seed)
    f = np.maximum(rng.normal(size=(3, 3, 4)), 0)
    P = rng.normal(size=(4, 4))
    M1 = apn.similarity_maps(t64(f), t64(P))
    M2 = apn.similarity_maps(t64(f), t64(alpha * P))
    a1, p1 = apn.predict_attributes(M1)
    a2, p2 = apn.predict_attributes(M2)
    np.testing.assert_allclose(a2.data, alpha * a1.data, atol=1e-9)
    if alpha > 0:
        np.testing.assert_array_equal(p1[np.ptp(M1.data.reshape(4, -1), axis=1) > 1e-9],
                                      p2[np.ptp(M1.data.reshape(4, -1), axis=1) > 1e-9])
    groups = [[0, 1], [2, 3]]
    assert apn.ad_loss(t64(alpha * P), groups).item() == pytest.approx(alpha * apn.ad_loss(t64(P), groups).item())
    assert apn.cpt_loss(M2, p1).item() == pytest.approx(alpha * apn.cpt_loss(M1, p1).item(), abs=1e-9)


# ---------------------------------------------------------------- zoom

def test_zoom_example_bottom_row():
    M = np.array([[[1.0, 2.0], [3.0, 6.0]]])
    image = np.random.default_rng(0).uniform(size=(3, 8, 8))
    r = apn.zoom_in(M, np.array([1.0]), [[0]], image)
    assert r.threshold == 3.0
    np.testing.assert_array_equal(r.mask, [[0, 0], [1, 1]])
    assert r.box == (0, 4, 7, 7)
    assert r.image.shape == image.shape


def test_zoom_constant_map_is_identity():
    M = np.full((2, 4, 4), 0.1, dtype=np.float32)
    image = np.random.default_rng(1).uniform(size=(3, 16, 16)).astype(np.float32)
    r = apn.zoom_in(M, np.array([0.1, 0.1]), [[0], [1]], image)
    assert r.mask.all()
    assert r.box == (0, 0, 15, 15)
    np.testing.assert_array_equal(r.image, image)


def test_zoom_selects_top_attribute_per_group():
    rng = np.random.default_rng(2)
    M = rng.normal(size=(4, 3, 3))
    a = np.array([0.1, 0.9, 0.5, 0.5])
    r = apn.zoom_in(M, a, [[0, 1], [2, 3]], rng.uniform(size=(3, 9, 9)))
    assert r.selected == [1, 2]
    np.testing.assert_allclose(r.informative_map, M[1] + M[2])
    assert r.threshold == pytest.approx((M[1] + M[2]).mean())


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_zoom_mask_and_box_invariants(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(4, 4, 4))
    a = rng.normal(size=4)
    r = apn.zoom_in(M, a, [[0, 1], [2, 3]], rng.uniform(size=(3, 16, 16)))
    assert r.mask.sum() >= 1
    big = apn.upsample_mask(r.mask.astype(bool), 16, 16)
    ys, xs = np.nonzero(big)
    assert r.box == (xs.min(), ys.min(), xs.max(), ys.max())


# ---------------------------------------------------------------- joint loss

def _run(micro, cfg):
    return apn.forward(micro["images"], micro["labels"], micro["params"], micro["phi"], micro["seen"],
                       micro["groups"], cfg)


TOGGLES = list(itertools.product([False, True], repeat=4))


@pytest.mark.parametrize("reg,ad,cpt,zoom", TOGGLES)
def test_total_is_weighted_sum(micro, reg, ad, cpt, zoom):
    cfg = full_config(reg=reg, ad=ad, cpt=cpt, zoom=zoom)
    _, losses = _run(micro, cfg)
    assert losses.total == pytest.approx(losses.weighted_sum(), abs=1e-6)
    for on, val in ((reg, losses.l_reg), (ad, losses.l_ad), (cpt, losses.l_cpt)):
        if not on:
            assert val == 0.0


def _grads(micro, cfg):
    p = micro["params"].copy()
    _, losses = apn.forward(micro["images"], micro["labels"], p, micro["phi"], micro["seen"], micro["groups"], cfg)
    losses.graph.backward()
    return {n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in p.named()}


@pytest.mark.parametrize("reg,ad,cpt,zoom", TOGGLES)
def test_disabled_terms_contribute_no_gradient(micro, reg, ad, cpt, zoom):
    # a disabled term must act exactly like the same term with weight 0
    got = _grads(micro, full_config(reg=reg, ad=ad, cpt=cpt, zoom=zoom))
    d = TrainConfig()
    weights = dict(lambda1=d.lambda1 if reg else 0.0, lambda2=d.lambda2 if ad else 0.0, lambda3=d.lambda3 if cpt else 0.0)
    ref = _grads(micro, full_config(zoom=zoom, **weights))
    for name in got:
        np.testing.assert_allclose(got[name], ref[name], rtol=1e-12, atol=1e-14, err_msg=name)
    if not (reg or ad or cpt):
        assert np.all(got["P"] == 0)


def test_all_toggles_off_is_plain_classification(micro):
    _, losses = _run(micro, full_config(reg=False, ad=False, cpt=False, zoom=False))
    p = micro["params"]
    g = apn.global_feature(apn.encode(micro["images"], p))
    expected = apn.cls_loss(apn.base_logits(g, p.V, micro["phi"]), micro["labels"], micro["seen"]).item()
    assert losses.total == expected


def test_zoom_off_logits_match_base_logits(micro):
    trace, _ = _run(micro, full_config(zoom=False))
    p = micro["params"]
    g = apn.global_feature(apn.encode(micro["images"], p))
    np.testing.assert_array_equal(trace.logits.data, apn.base_logits(g, p.V, micro["phi"]).data)


def test_full_model_components_recomputed(micro):
    cfg = full_config()
    trace, losses = _run(micro, cfg)
    p = micro["params"]
    f = apn.encode(micro["images"], p)
    M = apn.similarity_maps(f, p.P)
    a, peaks = apn.predict_attributes(M)
    logits = apn.base_logits(apn.global_feature(f), p.V, micro["phi"]).data
    crops = np.stack([apn.zoom_in(M.data[n], a.data[n], micro["groups"], micro["images"][n]).image
                      for n in range(2)])
    logits = logits + apn.base_logits(apn.global_feature(apn.encode(crops, p)), p.V, micro["phi"]).data
    l_cls = np.mean([softmax_ce_scalar(list(row), t) for row, t in zip(logits, [0, 1])])
    l_reg = np.mean([np.sum((a.data[n] - micro["phi"][n]) ** 2) for n in range(2)])
    l_ad = apn.ad_loss(p.P, micro["groups"]).item()
    l_cpt = np.mean([cpt_loops(np.maximum(M.data[n], 0), peaks[n]) for n in range(2)])
    expected = l_cls + cfg.lambda1 * l_reg + cfg.lambda2 * l_ad + cfg.lambda3 * l_cpt
    assert losses.total == pytest.approx(expected, abs=1e-10)


def test_zoom_logit_scaling_keeps_argmax(micro):
    trace, _ = _run(micro, full_config())
    z = trace.logits.data
    assert np.array_equal(np.argmax(z, axis=1), np.argmax(3.7 * z, axis=1))


def _loss_of(micro, cfg, name):
    """Total loss as a function of the single parameter tensor ``name``."""
    def fn(x):
        named = [(n, x if n == name else Tensor(t.data)) for n, t in micro["params"].named()]
        d = dict(named)
        nb = len(micro["params"].conv_weights)
        holder = apn.ModelParams([d[f"conv{i}.weight"] for i in range(nb)],
                                 [d[f"conv{i}.bias"] for i in range(nb)], d["V"], d["P"])
        _, losses = apn.forward(micro["images"], micro["labels"], holder, micro["phi"], micro["seen"],
                                micro["groups"], cfg)
        return losses.graph
    return fn


@pytest.mark.parametrize("name", ["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias", "V", "P"])
def test_full_loss_gradient(micro, name):
    cfg = full_config()
    point = dict(micro["params"].named())[name].data
    assert grad_check(_loss_of(micro, cfg, name), point) < 1e-4


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, micro):
    path = tmp_path / "m.apnckpt"
    apn.save_checkpoint(path, micro["params"], "lambda1 = 0.05\n")
    params, text = apn.load_checkpoint(path)
    assert params.equals(micro["params"])
    assert text == "lambda1 = 0.05\n"


def test_checkpoint_bad_magic(tmp_path, micro):
    path = tmp_path / "m.apnckpt"
    apn.save_checkpoint(path, micro["params"])
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(apn.BadMagicError):
        apn.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path, micro):
    path = tmp_path / "m.apnckpt"
    apn.save_checkpoint(path, micro["params"])
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(apn.TruncatedFileError):
        apn.load_checkpoint(path)
