import numpy as np
import pytest
from fdcheck import check_gradients

from mvfa import autograd as ag
from mvfa.adaptation import (Adapter, MVFAParams, adapt_forward, apply_adapter,
                             init_params, load_checkpoint, residual_mix,
                             save_checkpoint, similarity_logits)
from mvfa.autograd import Tensor, backward
from mvfa.backbone import BackboneConfig, forward_with_hooks, init_backbone
from mvfa.errors import ConfigError, FormatError, NormalizationError

TOY = BackboneConfig(image_size=8, patch_size=4, dim=8, blocks_per_stage=1,
                     heads=2, seed=3)


def toy_image(seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (8, 8)).astype(np.float32)


def toy_params(seed=1, gamma=0.1, randomize_up=False, dtype=np.float32, **kw):
    params = init_params(TOY.dim, seed=seed, gamma=gamma, dtype=dtype, **kw)
    if randomize_up and params.arch == "adapter":
        rng = np.random.default_rng(seed + 100)
        for dual in params.adapters:
            for adapter in {id(dual.cls): dual.cls, id(dual.seg): dual.seg}.values():
                adapter.w2.data = (rng.standard_normal(adapter.w2.shape) * 0.3
                                   ).astype(dtype)
    return params


# -- adapter and residual mix --------------------------------------------------

def test_apply_adapter_zero_cases():
    rng = np.random.default_rng(0)
    f = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    zero_up = Adapter(Tensor(rng.standard_normal((8, 2)).astype(np.float32)),
                      Tensor(np.zeros((2, 8), dtype=np.float32)))
    assert np.array_equal(apply_adapter(f, zero_up).data, np.zeros((4, 8)))
    any_adapter = Adapter(Tensor(rng.standard_normal((8, 2)).astype(np.float32)),
                          Tensor(rng.standard_normal((2, 8)).astype(np.float32)))
    zero_f = Tensor(np.zeros((4, 8), dtype=np.float32))
    assert np.array_equal(apply_adapter(zero_f, any_adapter).data, np.zeros((4, 8)))


def test_apply_adapter_matches_hand_matrix_arithmetic():
    f = np.array([[1.0, -2.0, 0.5, 3.0],
                  [0.0, 1.0, -1.0, 2.0]])
    w1 = np.array([[0.5, -1.0], [1.0, 0.0], [0.0, 2.0], [-0.5, 0.5]])
    w2 = np.array([[1.0, 0.0, -1.0, 2.0], [0.5, 1.0, 0.0, -1.0]])
    expected = np.maximum(f @ w1, 0.0) @ w2
    adapter = Adapter(Tensor(w1, dtype=np.float64), Tensor(w2, dtype=np.float64))
    out = apply_adapter(Tensor(f, dtype=np.float64), adapter)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_residual_mix_limits():
    rng = np.random.default_rng(1)
    f = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    adapted = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    assert np.array_equal(residual_mix(f, adapted, 0.0).data, f.data)
    assert np.array_equal(residual_mix(f, adapted, 1.0).data, adapted.data)
    zero = Tensor(np.zeros((4, 8), dtype=np.float32))
    assert np.allclose(residual_mix(f, zero, 0.1).data, 0.9 * f.data, atol=1e-7)
    with pytest.raises(ConfigError):
        residual_mix(f, adapted, 1.5)


def test_adapter_parameter_count_is_grid_independent():
    params = init_params(64, seed=0)
    for dual in params.adapters:
        assert dual.cls.w1.data.size + dual.cls.w2.data.size == 2 * 64 * 16
        assert dual.seg.w1.data.size + dual.seg.w2.data.size == 2 * 64 * 16


# -- adapted forward pass -------------------------------------------------------

def test_zero_weights_gamma_zero_reduces_to_frozen_features():
    backbone = init_backbone(TOY)
    params = init_params(TOY.dim, seed=2, gamma=0.0)
    params.projector.w_cls.data = np.zeros((8, 8), dtype=np.float32)
    params.projector.w_seg.data = np.zeros((8, 8), dtype=np.float32)
    image = toy_image()
    features, stage = adapt_forward(backbone, params, image)
    plain = forward_with_hooks(backbone, image)
    for level in range(3):
        assert np.array_equal(features.cls[level].data, plain.levels()[level].data)
        assert np.array_equal(features.seg[level].data, plain.levels()[level].data)
    assert np.array_equal(features.cls[3].data, np.zeros((TOY.grid_count, 8)))
    assert np.array_equal(features.seg[3].data, np.zeros((TOY.grid_count, 8)))


def test_gamma_zero_forward_equals_frozen_forward_bitwise():
    backbone = init_backbone(TOY)
    params = toy_params(gamma=0.0, randomize_up=True)
    image = toy_image(seed=5)
    _, stage = adapt_forward(backbone, params, image)
    plain = forward_with_hooks(backbone, image)
    for hooked, frozen in zip(stage.levels(), plain.levels()):
        assert np.array_equal(hooked.data, frozen.data)


def test_zero_up_projection_forwards_scaled_features():
    # untrained adapters (zero up-projection) with gamma=0.1 feed 0.9 * F_l onward
    backbone = init_backbone(TOY)
    params = toy_params(gamma=0.1)  # w2 zero by construction
    image = toy_image(seed=6)
    _, stage = adapt_forward(backbone, params, image)
    plain = forward_with_hooks(backbone, image)
    manual = backbone.run_stage(1, ag.scale(plain.f1, 0.9))
    assert np.abs(stage.f2.data - manual.data).max() <= 1e-6


def test_branch_independence_under_cls_feed():
    backbone = init_backbone(TOY)
    image = toy_image(seed=7)
    params = toy_params(seed=3, randomize_up=True, branch_feed="cls")
    before, _ = adapt_forward(backbone, params, image)
    for dual in params.adapters:
        dual.seg.w1.data = np.zeros_like(dual.seg.w1.data)
        dual.seg.w2.data = np.zeros_like(dual.seg.w2.data)
    after, _ = adapt_forward(backbone, params, image)
    for level in range(3):
        assert np.array_equal(before.cls[level].data, after.cls[level].data)
    assert not np.array_equal(before.seg[0].data, after.seg[0].data)


def test_trainable_set_closure():
    backbone = init_backbone(TOY)
    params = toy_params(randomize_up=True)
    features, _ = adapt_forward(backbone, params, toy_image())
    loss = ag.mean(ag.mul(features.cls[3], features.cls[3]))
    for level in range(3):
        loss = ag.add(loss, ag.mean(ag.mul(features.seg[level], features.seg[level])))
        loss = ag.add(loss, ag.mean(ag.mul(features.cls[level], features.cls[level])))
    loss = ag.add(loss, ag.mean(ag.mul(features.seg[3], features.seg[3])))
    grads = backward(loss)
    assert set(grads) == set(params.tensors())


def test_seg_adapter_gradient_propagates_through_later_stages():
    backbone = init_backbone(TOY, dtype=np.float64)
    params = toy_params(randomize_up=True, dtype=np.float64)
    features, stage = adapt_forward(backbone, params, toy_image(seed=8))
    # a loss reading only the final stage still reaches the level-1 seg adapter
    grads = backward(ag.mean(ag.mul(stage.f_vis, stage.f_vis)))
    g = grads[params.adapters[0].seg.w1].data
    assert np.abs(g).max() > 0


def test_adapted_forward_gradients_match_finite_differences():
    backbone = init_backbone(TOY, dtype=np.float64)
    params = toy_params(randomize_up=True, dtype=np.float64)
    image = toy_image(seed=9)

    def loss_fn():
        features, _ = adapt_forward(backbone, params, image)
        loss = None
        for level in range(4):
            term = ag.add(ag.mean(ag.mul(features.cls[level], features.cls[level])),
                          ag.mean(ag.mul(features.seg[level], features.seg[level])))
            loss = term if loss is None else ag.add(loss, term)
        return loss

    check_gradients(loss_fn, params.tensors(), rel_tol=1e-4)


def test_projector_arch_uses_isolated_projections():
    backbone = init_backbone(TOY)
    params = init_params(TOY.dim, seed=4, arch="projector")
    image = toy_image(seed=10)
    features, stage = adapt_forward(backbone, params, image)
    plain = forward_with_hooks(backbone, image)
    # the encoder run is untouched and level features are plain projections
    for hooked, frozen in zip(stage.levels(), plain.levels()):
        assert np.array_equal(hooked.data, frozen.data)
    expected = plain.f1.data @ params.level_projectors[0].w_cls.data
    assert np.allclose(features.cls[0].data, expected, atol=1e-6)
    assert len(params.named_tensors()) == 8


def test_single_adapter_style_shares_tensors():
    params = init_params(TOY.dim, seed=5, adapter_style="single")
    assert params.adapters[0].cls is params.adapters[0].seg
    assert len(params.named_tensors()) == 8  # 2 per level + 2 projections


# -- similarity logits ----------------------------------------------------------

def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def test_similarity_logits_self_row():
    tau = 0.07
    t_normal = unit([1.0, 0.2, 0.0, 0.5])
    t_abnormal = unit([0.1, 1.0, 0.3, 0.0])
    f_text = Tensor(np.stack([t_normal, t_abnormal]), dtype=np.float64)
    f = Tensor((2.5 * t_normal).reshape(1, 4), dtype=np.float64)
    logits = similarity_logits(f, f_text, tau).data
    assert logits[0, 0] == pytest.approx(1.0 / tau, rel=1e-6)
    assert logits[0, 1] == pytest.approx(float(t_normal @ t_abnormal) / tau, rel=1e-6)


def test_similarity_logits_orthogonal_row():
    f_text = Tensor(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), dtype=np.float64)
    f = Tensor(np.array([[0.0, 0, 2.0, 0]]), dtype=np.float64)
    logits = similarity_logits(f, f_text, 0.07)
    assert np.allclose(logits.data, 0.0, atol=1e-12)
    probs = ag.softmax_rows(logits).data
    assert np.allclose(probs, 0.5, atol=1e-12)


def test_similarity_cosine_gap_sets_anomaly_probability():
    # anomaly probability depends only on the cosine gap: 1/(1 + exp(-gap/tau))
    tau, gap = 0.07, 0.1
    t_normal = np.array([1.0, 0.0])
    t_abnormal = np.array([0.0, 1.0])
    a = (-gap + np.sqrt(2 - gap ** 2)) / 2.0
    f = np.array([[a, a + gap]])  # unit row with cos(abnormal) - cos(normal) = gap
    assert np.linalg.norm(f) == pytest.approx(1.0, abs=1e-12)
    logits = similarity_logits(Tensor(f, dtype=np.float64),
                               Tensor(np.stack([t_normal, t_abnormal]),
                                      dtype=np.float64), tau)
    prob = ag.softmax_rows(logits).data[0, 1]
    expected = 1.0 / (1.0 + np.exp(-gap / tau))
    assert prob == pytest.approx(expected, abs=1e-9)
    assert prob == pytest.approx(0.80668, abs=5e-4)


def test_similarity_rejects_zero_rows_and_bad_tau():
    f_text = Tensor(np.eye(2, 4), dtype=np.float64)
    with pytest.raises(NormalizationError, match="row 0"):
        similarity_logits(Tensor(np.zeros((1, 4)), dtype=np.float64), f_text, 0.07)
    with pytest.raises(ConfigError):
        similarity_logits(Tensor(np.ones((1, 4)), dtype=np.float64), f_text, 0.0)


# -- checkpoints ----------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {},
    {"adapter_style": "single"},
    {"arch": "projector"},
])
def test_checkpoint_round_trip(tmp_path, kwargs):
    params = init_params(TOY.dim, seed=6, gamma=0.25, **kwargs)
    if params.arch == "adapter":
        rng = np.random.default_rng(0)
        for dual in params.adapters:
            dual.cls.w2.data = rng.standard_normal(dual.cls.w2.shape).astype(np.float32)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, TOY, params)
    config, loaded = load_checkpoint(path)
    assert config == TOY
    assert loaded.arch == params.arch
    assert loaded.adapter_style == params.adapter_style
    assert loaded.gamma == pytest.approx(params.gamma)
    for (name_a, a), (name_b, b) in zip(params.named_tensors(), loaded.named_tensors()):
        assert name_a == name_b
        assert np.array_equal(a.data, b.data)
        assert b.requires_grad
    # byte-exact round trip
    second = tmp_path / "model2.ckpt"
    save_checkpoint(second, config, loaded)
    assert path.read_bytes() == second.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)
