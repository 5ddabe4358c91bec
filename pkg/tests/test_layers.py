"""Layer oracles: BatchNorm affine math by hand, weight-norm projection,
Adam against an independent transliteration, and the scale-invariance
properties the batch-normalized critic relies on."""

import math

import numpy as np
import pytest

import deskrl.autodiff as ad
from deskrl.autodiff import ContractError, NumericError, Tape, Tensor
from deskrl.gradcheck import assert_gradients_match, max_relative_error
from deskrl.layers import (MLP, Adam, BatchNormLayer, LinearLayer, MLPSpec,
                           effective_lr, load_params, save_params, wn_project)


def rng(seed):
    return np.random.default_rng(seed)


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_identity_on_standardized_batch():
    # columns have zero mean and unit biased variance already
    x = np.array([[1.0, -1.0], [-1.0, 1.0]])
    bn = BatchNormLayer(2, eps=1e-6)
    out = bn.forward(Tensor(x), mode="train").data
    assert np.max(np.abs(out - x)) <= 1e-6


def test_batchnorm_constant_batch_outputs_beta():
    bn = BatchNormLayer(2)
    bn.beta.data[...] = 5.0
    out = bn.forward(Tensor(np.full((4, 2), 3.7)), mode="train").data
    assert np.max(np.abs(out - 5.0)) < 1e-12


def test_batchnorm_eval_matches_hand_affine():
    bn = BatchNormLayer(2, eps=1e-5)
    bn.running_mean[...] = [1.0, -2.0]
    bn.running_var[...] = [4.0, 0.25]
    bn.gamma.data[...] = [2.0, 3.0]
    bn.beta.data[...] = [-1.0, 0.5]
    x = np.array([[1.0, -2.0], [3.0, 0.0], [-1.0, 2.0]])
    want = (x - np.array([1.0, -2.0])) / np.sqrt(np.array([4.0, 0.25]) + 1e-5)
    want = want * np.array([2.0, 3.0]) + np.array([-1.0, 0.5])
    out = bn.forward(Tensor(x), mode="eval").data
    assert np.allclose(out, want, rtol=0, atol=1e-12)


def test_batchnorm_train_oracle_and_running_update():
    r = rng(3)
    x = r.standard_normal((8, 4)) * 2.0 + 1.0
    bn = BatchNormLayer(4, momentum=0.01)
    bn.gamma.data[...] = r.standard_normal(4)
    bn.beta.data[...] = r.standard_normal(4)
    out = bn.forward(Tensor(x), mode="train").data
    mu = x.mean(axis=0)
    var = x.var(axis=0)  # ddof=0, matching the biased normalizer
    want = (x - mu) / np.sqrt(var + 1e-5) * bn.gamma.data + bn.beta.data
    assert np.allclose(out, want, atol=1e-12)
    assert np.allclose(bn.running_mean, 0.01 * mu, atol=1e-15)
    assert np.allclose(bn.running_var, 0.99 * 1.0 + 0.01 * var, atol=1e-15)


def test_batchnorm_update_running_flag_freezes_stats():
    bn = BatchNormLayer(2)
    before = (bn.running_mean.copy(), bn.running_var.copy())
    bn.forward(Tensor(rng(0).standard_normal((16, 2))), mode="train", update_running=False)
    assert np.array_equal(bn.running_mean, before[0])
    assert np.array_equal(bn.running_var, before[1])


def test_batchnorm_contract_and_numeric_errors():
    bn = BatchNormLayer(2)
    with pytest.raises(ContractError):
        bn.forward(Tensor(np.ones((1, 2))), mode="train")
    with pytest.raises(ContractError):
        bn.forward(Tensor(np.ones((3, 2))), mode="test")
    with pytest.raises(NumericError):
        bn.forward(Tensor(np.array([[1.0, np.nan], [0.0, 1.0]])), mode="train")


def test_batchnorm_eval_has_no_batch_coupling():
    bn = BatchNormLayer(2)
    bn.running_mean[...] = [0.5, -0.5]
    bn.running_var[...] = [2.0, 3.0]
    a = bn.forward(Tensor(np.array([[1.0, 2.0], [0.0, 0.0]])), mode="eval").data[0]
    b = bn.forward(Tensor(np.array([[1.0, 2.0], [9.0, -9.0]])), mode="eval").data[0]
    assert np.array_equal(a, b)


def test_running_var_stays_nonnegative():
    bn = BatchNormLayer(3, momentum=0.9)
    r = rng(0)
    for _ in range(200):
        bn.forward(Tensor(r.standard_normal((2, 3)) * r.uniform(0.0, 3.0)), mode="train")
        assert np.all(bn.running_var >= 0.0)


def test_running_stats_converge_to_population():
    bn = BatchNormLayer(3, momentum=0.01)
    r = rng(5)
    mean = np.array([3.0, -2.0, 4.0])
    std = np.array([2.0, 0.5, 1.5])
    for _ in range(2000):
        bn.forward(Tensor(mean + std * r.standard_normal((512, 3))), mode="train")
    assert np.max(np.abs(bn.running_mean - mean) / np.abs(mean)) < 0.01
    assert np.max(np.abs(bn.running_var - std ** 2) / std ** 2) < 0.01


# --------------------------------------------------------------- wn_project

def test_wn_project_row_345():
    lin = LinearLayer(2, 2, rng(0), wn_enabled=True)
    lin.W.data[...] = [[3.0, 4.0], [0.0, 1.0]]
    b_before = lin.b.data.copy()
    wn_project(lin)
    assert np.allclose(lin.W.data[0], [0.6, 0.8], atol=1e-15)
    assert np.array_equal(lin.b.data, b_before)


def test_wn_project_idempotent():
    lin = LinearLayer(3, 4, rng(1), wn_enabled=True)
    wn_project(lin)
    once = lin.W.data.copy()
    wn_project(lin)
    assert np.max(np.abs(lin.W.data - once)) <= 1e-12


def test_wn_project_zero_row_stays_zero():
    lin = LinearLayer(3, 2, rng(2), wn_enabled=True)
    lin.W.data[0, :] = 0.0
    wn_project(lin)
    assert np.array_equal(lin.W.data[0], np.zeros(3))


def test_wn_project_requires_flag():
    lin = LinearLayer(2, 2, rng(3), wn_enabled=False)
    with pytest.raises(ContractError):
        wn_project(lin)


# --------------------------------------------------------------------- adam

def test_adam_first_step_moves_by_lr():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    p.grad[...] = 1.0
    opt.step()
    assert abs(p.data[0] + 0.1) < 1e-6


def test_adam_zero_gradient_is_a_fixed_point():
    p = Tensor(rng(4).standard_normal(5), requires_grad=True)
    before = p.data.copy()
    opt = Adam([("p", p)], lr=0.5)
    for _ in range(30):
        opt.step()
    assert np.array_equal(p.data, before)


def test_adam_matches_reference_trajectory():
    # independent transliteration of the update rule, sharing no code
    r = rng(9)
    p = Tensor(r.standard_normal((3, 2)), requires_grad=True)
    opt = Adam([("p", p)], lr=0.01)
    ref = p.data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 8):
        g = r.standard_normal((3, 2))
        p.grad[...] = g
        opt.step()
        p.grad[...] = 0.0
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, ref, atol=1e-14)
        assert opt.t == t
        assert all(np.all(val >= 0.0) for val in opt.v.values())


def test_adam_projects_wn_rows_after_every_step():
    net = MLP(MLPSpec((4, 16, 16, 2), batchnorm=True, wn=True), rng(5))
    opt = Adam(net.named_parameters(), lr=3e-3, wn_layers=net.wn_layers())
    r = rng(6)
    for _ in range(100):
        for p in net.parameters():
            p.grad[...] = r.standard_normal(p.shape)
        opt.step()
    for lin in net.wn_layers():
        norms = np.linalg.norm(lin.W.data, axis=1)
        assert np.max(np.abs(norms - 1.0)) <= 1e-6
    # scale stays the last layer's job
    final = np.linalg.norm(net.linears[-1].W.data, axis=1)
    assert not np.allclose(final, 1.0)


def test_adam_nonfinite_gradient_names_the_parameter():
    p = Tensor(np.zeros(2), requires_grad=True)
    q = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([("actor.W", p), ("critic.W", q)])
    q.grad[...] = [0.0, np.inf]
    with pytest.raises(NumericError, match="critic.W"):
        opt.step()


def test_adam_rejects_duplicate_names():
    p = Tensor(np.zeros(1), requires_grad=True)
    q = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ContractError):
        Adam([("w", p), ("w", q)])


# ------------------------------------------------------------- effective_lr

def test_effective_lr_values():
    lin = LinearLayer(2, 2, rng(7))
    lin.W.data[...] = [[1.0, 0.0], [0.0, 0.0]]  # Frobenius norm 1
    assert effective_lr(lin, 1e-3) == pytest.approx(1e-3, rel=1e-12)
    lin.W.data *= 2.0
    assert effective_lr(lin, 1e-3) == pytest.approx(1e-3 / 4.0, rel=1e-12)
    lin.W.data[...] = 0.0
    assert effective_lr(lin, 1e-3) == math.inf


def test_effective_lr_constant_under_wn_training():
    net = MLP(MLPSpec((4, 16, 16, 2), batchnorm=True, wn=True), rng(0))
    opt = Adam(net.named_parameters(), lr=1e-3, wn_layers=net.wn_layers())
    base = [effective_lr(lin, 1e-3) for lin in net.wn_layers()]
    assert base[0] == pytest.approx(1e-3 / 16.0, rel=1e-9)  # ||W||_F^2 == out_dim
    r = rng(1)
    for _ in range(50):
        for p in net.parameters():
            p.grad[...] = r.standard_normal(p.shape)
        opt.step()
        for lin, b in zip(net.wn_layers(), base):
            assert abs(effective_lr(lin, 1e-3) - b) / b <= 1e-6


# ---------------------------------------------------------------------- mlp

ARCHS = [(3, 16, 1), (4, 8, 8, 2), (2, 32, 5), (6, 12, 12, 12, 1), (5, 24, 3)]


def _scale_hidden_weights(net, c):
    for lin, bn in zip(net.linears[:-1], net.bns):
        if bn is not None:
            lin.W.data *= c


def test_single_linear_spec_is_affine_map():
    net = MLP(MLPSpec((3, 2)), rng(4))
    x = rng(5).standard_normal((6, 3))
    out = net.forward(Tensor(x), mode="eval").data
    want = x @ net.linears[0].W.data.T + net.linears[0].b.data
    assert np.allclose(out, want, atol=1e-12)


def test_mlp_rejects_width_mismatch():
    net = MLP(MLPSpec((3, 4, 2)), rng(0))
    with pytest.raises(ContractError):
        net.forward(Tensor(np.ones((2, 5))))


def test_mlpspec_validation():
    with pytest.raises(ContractError):
        MLPSpec((3,))
    with pytest.raises(ContractError):
        MLPSpec((3, 0, 2))
    with pytest.raises(ContractError):
        MLPSpec((3, 4, 2), activation="selu")
    with pytest.raises(ContractError):
        MLPSpec((3, 4, 4, 2), batchnorm=(True,))
    with pytest.raises(ContractError):
        MLPSpec((3, 4, 2), dtype="float16")


def test_train_mode_scale_invariance_across_archs():
    # exact as bn eps -> 0, so the suite pins eps tiny; at eps=1e-5 the
    # distortion is O(eps/var) and can exceed 1e-5 for c < 1
    for seed in range(3):
        for widths in ARCHS:
            for c in (0.5, 2.0, 10.0):
                net = MLP(MLPSpec(widths, activation="tanh", batchnorm=True,
                                  bn_eps=1e-10), rng(seed))
                x = Tensor(rng(seed + 50).standard_normal((16, widths[0])))
                base = net.forward(x, mode="train", update_running=False).data.copy()
                _scale_hidden_weights(net, c)
                scaled = net.forward(x, mode="train", update_running=False).data
                rel = np.max(np.abs(scaled - base) / np.maximum(np.abs(base), 1e-6))
                assert rel <= 1e-5, f"widths={widths} c={c} rel={rel:.2e}"


def test_gradient_inverse_scaling():
    for seed in range(3):
        net = MLP(MLPSpec((4, 16, 8, 2), activation="relu", batchnorm=True,
                          bn_eps=1e-10), rng(seed))
        x = Tensor(rng(seed + 10).standard_normal((12, 4)))

        def grads():
            ad.zero_grad(net.parameters())
            with Tape() as tape:
                loss = ad.tsum(ad.tanh(net.forward(x, mode="train",
                                                   update_running=False)))
                tape.backward(loss)
            return {n: p.grad.copy() for n, p in net.named_parameters()}

        g1 = grads()
        c = 10.0
        _scale_hidden_weights(net, c)
        g2 = grads()
        for i, lin in enumerate(net.linears[:-1]):
            err = max_relative_error(g2[f"linear{i}.W"], g1[f"linear{i}.W"] / c)
            assert err <= 1e-5, f"layer {i}: {err:.2e}"


def test_eval_mode_scale_invariance_after_recalibration():
    # momentum 1.0 makes a single train pass re-estimate the running stats
    net = MLP(MLPSpec((3, 16, 16, 2), activation="tanh", batchnorm=True,
                      bn_momentum=1.0, bn_eps=1e-10), rng(0))
    calib = Tensor(rng(1).standard_normal((64, 3)))
    x = Tensor(rng(2).standard_normal((10, 3)))
    net.forward(calib, mode="train")
    base = net.forward(x, mode="eval").data.copy()
    _scale_hidden_weights(net, 10.0)
    net.forward(calib, mode="train")
    scaled = net.forward(x, mode="eval").data
    rel = np.max(np.abs(scaled - base) / np.maximum(np.abs(base), 1e-6))
    assert rel <= 1e-5


def test_scale_changes_outputs_without_batchnorm():
    # negative control: the invariance is a BN property, not a network one
    net = MLP(MLPSpec((3, 16, 2), activation="tanh", batchnorm=False), rng(0))
    x = Tensor(rng(1).standard_normal((8, 3)))
    base = net.forward(x, mode="train").data.copy()
    net.linears[0].W.data *= 10.0
    scaled = net.forward(x, mode="train").data
    assert np.max(np.abs(scaled - base)) > 1e-3


def test_mlp_batchnorm_gradients_match_finite_differences():
    net = MLP(MLPSpec((3, 8, 2), activation="tanh", batchnorm=True), rng(2))
    x = Tensor(rng(3).standard_normal((6, 3)))
    params = net.parameters()

    def loss_value():
        out = net.forward(x, mode="train", update_running=False)
        return float(np.sum(out.data * out.data))

    ad.zero_grad(params)
    with Tape() as tape:
        loss = ad.tsum(ad.square(net.forward(x, mode="train", update_running=False)))
        tape.backward(loss)
    assert_gradients_match(loss_value, params, tol=1e-4)


def test_mlp_parameter_names_unique_and_wn_scope():
    net = MLP(MLPSpec((3, 4, 5, 2), batchnorm=True, wn=True), rng(0))
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    assert net.wn_layers() == net.linears[:-1]
    assert not net.linears[-1].wn_enabled


def test_reset_matches_fresh_construction():
    spec = MLPSpec((3, 8, 2), batchnorm=True, wn=True)
    net = MLP(spec, rng(0))
    net.forward(Tensor(rng(1).standard_normal((16, 3))), mode="train")
    opt = Adam(net.named_parameters(), lr=1e-2, wn_layers=net.wn_layers())
    for p in net.parameters():
        p.grad[...] = 1.0
    opt.step()
    net.reset_parameters(rng(42))
    fresh = MLP(spec, rng(42))
    for (na, pa), (nb, pb) in zip(net.named_state(), fresh.named_state()):
        assert na == nb
        assert np.array_equal(_as_array(pa), _as_array(pb)), na


# -------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bitwise(tmp_path):
    net = MLP(MLPSpec((3, 4, 2), batchnorm=True), rng(8))
    named = net.named_state()
    path = str(tmp_path / "ck.params")
    save_params(path, named)
    back = load_params(path)
    assert list(back) == [n for n, _ in named]
    for name, arr in named:
        assert np.array_equal(back[name], _as_array(arr).astype(np.float64)), name
    with open(path, "rb") as fh:
        assert fh.readline() == b"deskrl-params v1\n"


def test_checkpoint_scalar_record(tmp_path):
    path = str(tmp_path / "s.params")
    save_params(path, [("alpha", np.float64(2.5))])
    back = load_params(path)
    assert back["alpha"].shape == ()
    assert float(back["alpha"]) == 2.5


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.params"
    bad.write_bytes(b"nope\n")
    with pytest.raises(ContractError):
        load_params(str(bad))

    path = str(tmp_path / "dup.params")
    save_params(path, [("w", np.zeros(2)), ("w", np.ones(2))])
    with pytest.raises(ContractError):
        load_params(path)

    path2 = str(tmp_path / "trunc.params")
    save_params(path2, [("w", np.zeros(4))])
    with open(path2, "rb") as fh:
        raw = fh.read()
    (tmp_path / "cut.params").write_bytes(raw[:-9])
    with pytest.raises(ContractError):
        load_params(str(tmp_path / "cut.params"))
