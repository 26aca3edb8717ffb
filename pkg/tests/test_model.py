import math

import numpy as np
import pytest

from rtivae import diffcore as dc
from rtivae import distributions as D
from rtivae import model as M
from rtivae import synthgen as sg
from rtivae.diffcore import Tensor

TINY = dict(d_model=16, num_heads=2, ff_dim=32, token_dim=8, encoder_blocks=1, decoder_blocks=1,
            dropout=0.0)


@pytest.fixture(scope="module")
def batch():
    ds = sg.generate_dataset(sg.DatasetConfig(n_per_class=4, seed=3))
    return M.collate(ds.samples[:4])


def tiny(**kw):
    return M.ModelConfig(**{**TINY, **kw})


def noise_for(cfg, b, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, cfg.z_o_dim)), rng.normal(size=(b, cfg.z_l_dim))


# ---------------------------------------------------------------- config

def test_config_defaults_and_validation():
    cfg = M.ModelConfig()
    assert (cfg.z_l_dim, cfg.z_o_dim, cfg.n_components, cfg.d_model, cfg.ff_dim) == (3, 2, 3, 64, 256)
    with pytest.raises(ValueError, match="variant"):
        M.ModelConfig(variant="lstm")
    with pytest.raises(ValueError):
        M.ModelConfig(gamma=-1.0)
    with pytest.raises(ValueError):
        M.ModelConfig(d_model=30, num_heads=4)
    with pytest.raises(ValueError, match="unknown"):
        M.ModelConfig.from_dict({"depth": 3})
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_params_deterministic():
    a, b = M.init_params(tiny(), 4), M.init_params(tiny(), 4)
    assert a.keys() == b.keys() and all(np.array_equal(a[k].data, b[k].data) for k in a)


# ---------------------------------------------------------------- encode

@pytest.mark.parametrize("variant", M.VARIANTS)
def test_encode_deterministic(batch, variant):
    cfg = tiny(variant=variant)
    params = M.init_params(cfg, 0)
    noise = noise_for(cfg, 4)
    a = M.encode(batch["frames"], batch["mask"], cfg, params, noise=noise)
    b = M.encode(batch["frames"], batch["mask"], cfg, params, noise=noise)
    assert np.array_equal(a.z_l.data, b.z_l.data) and np.array_equal(a.z_o.data, b.z_o.data)
    assert a.q_yl.probabilities.shape == (4, 3)


def test_encode_log_variance_floors(batch):
    cfg = tiny()
    params = M.init_params(cfg, 0)
    for name in ("zl", "zo"):
        params[f"enc.{name}.logvar.b"] = Tensor(np.full(params[f"enc.{name}.logvar.b"].shape, -50.0))
    post = M.encode(batch["frames"], batch["mask"], cfg, params, noise=noise_for(cfg, 4))
    assert np.all(post.q_zl.log_variance.data >= -4.0)
    assert np.all(post.q_zo.log_variance.data >= -6.0)
    assert np.any(post.q_zl.log_variance.data == -4.0)


def test_encode_empty_sequence_rejected():
    cfg = tiny()
    with pytest.raises(ValueError, match="empty"):
        M.encode(np.zeros((1, 0, 16)), np.zeros((1, 0), bool), cfg, M.init_params(cfg, 0))


def test_encoder_input_projection_grad_check(batch):
    cfg = tiny()
    params = M.init_params(cfg, 1)
    noise = noise_for(cfg, 4, 2)

    def f(w):
        p = dict(params)
        p["enc.in.w"] = w
        return M.forward_train(batch, cfg, p, noise=noise).l_total

    value = float(f(params["enc.in.w"]).data)
    rep = dc.grad_check(f, params["enc.in.w"].data, coords=40, floor=1e-6 * max(1.0, abs(value)))
    assert rep.passed, rep.max_relative_error


# ---------------------------------------------------------------- q_psi and L_MI

def test_qpsi_zero_weights_uniform():
    cfg = tiny()
    params = {k: Tensor(np.zeros(v.shape)) if k.startswith("qpsi") else v
              for k, v in M.init_params(cfg, 0).items()}
    probs = M.classify_q_psi(np.random.default_rng(0).normal(size=(5, 3)), params).data
    assert np.array_equal(probs, np.full((5, 2), 0.5))


def test_qpsi_sums_to_one_and_grad_check():
    params = M.init_params(tiny(), 0)
    z = np.random.default_rng(1).normal(size=(6, 3))
    assert np.allclose(M.classify_q_psi(z, params).data.sum(-1), 1.0, atol=1e-9)
    w = np.random.default_rng(2).normal(size=(6, 2))
    assert dc.grad_check(lambda t: (M.classify_q_psi(t, params) * w).sum(), z).passed
    rep = dc.grad_check(
        lambda t: (M.classify_q_psi(z, {**params, "qpsi.l0.w": t}) * w).sum(),
        params["qpsi.l0.w"].data)
    assert rep.passed


def test_qpsi_architecture():
    params = M.init_params(M.ModelConfig(), 0)
    assert [params[f"qpsi.l{i}.w"].shape for i in range(4)] == [(3, 8), (8, 8), (8, 8), (8, 8)]
    assert params["qpsi.out.w"].shape == (8, 2)


def test_l_mi_uniform_predictor():
    assert float(M.compute_l_mi([0.5, 0.5], 0).data) == pytest.approx(-math.log(2) - 0.5, abs=1e-12)


def test_l_mi_confident_correct():
    # the 1e-7 probability clamp contributes log(1 - 1e-7)
    assert float(M.compute_l_mi([1.0, 0.0], 0).data) == pytest.approx(-1.0, abs=2e-7)


def test_l_mi_bounds_random():
    rng = np.random.default_rng(3)
    for a in (2, 3, 5):
        probs = rng.dirichlet(np.ones(a) * 0.3, size=2000)
        vals = M.compute_l_mi(probs, rng.integers(0, a, 2000)).data
        assert np.all(vals >= -math.log(a) - 1 - 1e-12) and np.all(vals <= 1e-12)


def test_l_mi_monte_carlo_matches_single_sample_at_floor():
    # with a near-zero posterior variance every draw of z_l lands on the mean
    params = M.init_params(tiny(), 0)
    mean = Tensor(np.array([[0.3, -0.2, 0.9]]))
    q = D.DiagonalGaussian(mean, Tensor(np.full((1, 3), -40.0)))
    rng = np.random.default_rng(4)
    draws = [float(M.compute_l_mi(M.classify_q_psi(D.reparameterize(q, rng.normal(size=(1, 3))),
                                                   params), [1]).data[0]) for _ in range(50)]
    single = float(M.compute_l_mi(M.classify_q_psi(mean, params), [1]).data[0])
    assert np.mean(draws) == pytest.approx(single, abs=1e-8)


def _mi_grads(mode, z, y):
    cfg = tiny(mi_mode=mode)
    params = M.init_params(cfg, 5)
    zt = Tensor(z, requires_grad=True)
    qnames = sorted(k for k in params if k.startswith("qpsi"))
    loss, _ = M.mi_loss(zt, y, params, cfg)
    g = dc.backward(loss.sum(), [zt] + [params[k] for k in qnames])
    return float(loss.sum().data), g[zt].data, {k: g[params[k]].data for k in qnames}, params


def test_mi_modes_share_value_and_route_gradients():
    rng = np.random.default_rng(6)
    z, y = rng.normal(size=(8, 3)), rng.integers(0, 2, 8)
    joint = _mi_grads("joint", z, y)
    split = _mi_grads("split", z, y)
    adv = _mi_grads("adversarial", z, y)
    assert joint[0] == pytest.approx(split[0], abs=1e-12) == pytest.approx(adv[0], abs=1e-12)
    assert np.any(joint[1] != 0)
    params = joint[3]
    onehot = np.eye(2)[y]
    ent = dc.backward(M.mi_entropy_term(M.classify_q_psi(Tensor(z, requires_grad=True), params))
                      .sum(), [params["qpsi.out.w"]])[params["qpsi.out.w"]].data
    pred = dc.backward(-(M.classify_q_psi(z, params) * onehot).sum(),
                       [params["qpsi.out.w"]])[params["qpsi.out.w"]].data
    # split: both terms reach q_psi, only the entropy term reaches z_l
    assert np.allclose(split[2]["qpsi.out.w"], ent + pred, atol=1e-12)
    # adversarial: q_psi only sees the prediction term
    assert np.allclose(adv[2]["qpsi.out.w"], pred, atol=1e-12)
    assert np.allclose(split[1], adv[1], atol=1e-12)
    zt = Tensor(z, requires_grad=True)
    ent_z = dc.backward(M.mi_entropy_term(M.classify_q_psi(zt, params)).sum(), [zt])[zt].data
    assert np.allclose(adv[1], ent_z, atol=1e-12)


def test_entropy_term_reaches_encoder_head(batch):
    cfg = tiny()
    params = M.init_params(cfg, 0)
    post = M.encode(batch["frames"], batch["mask"], cfg, params, noise=noise_for(cfg, 4))
    l_mi, _ = M.mi_loss(post.z_l, batch["y_o"], params, cfg)
    w = params["enc.zl.mean.w"]
    assert np.any(dc.backward(l_mi.sum(), [w])[w].data != 0)


# ---------------------------------------------------------------- decode

def test_decode_deterministic_and_shaped():
    cfg = tiny()
    params = M.init_params(cfg, 0)
    tokens = [[1, 4, 2, 9]]
    a = M.decode(tokens, [[0.1, 0.2]], [[0.0, 0.5, 0.2]], cfg, params)
    b = M.decode(tokens, [[0.1, 0.2]], [[0.0, 0.5, 0.2]], cfg, params)
    assert np.array_equal(a[0], b[0]) and a[0].shape[1] == cfg.n_channels
    counts = M.repeat_counts(M.duration_logits(np.array(tokens), np.array([[0.0, 0.5, 0.2]]),
                                               params).data)
    assert a[0].shape[0] == counts.sum()


def test_repeat_counts_round_running_total():
    d = np.array([[1.4, 1.4, 1.4, 1.4, 2.6]])
    counts = M.repeat_counts(np.log(d))
    # per-token rounding would give 1+1+1+1+3 = 7; the summed duration is 8.2
    assert counts.tolist() == [[1, 2, 1, 2, 2]] and counts.sum() == 8
    assert M.repeat_counts(np.log([[0.2, 0.2, 3.0]])).tolist() == [[1, 1, 3]]
    masked = M.repeat_counts(np.log([[2.0, 2.0, 5.0]]), np.array([[True, True, False]]))
    assert masked.tolist() == [[2, 2, 0]]
    rng = np.random.default_rng(0)
    logd = rng.normal(1.0, 1.0, size=(50, 9))
    c = M.repeat_counts(logd)
    assert c.min() >= 1
    assert np.all(np.abs(c.sum(1) - np.maximum(1, np.exp(logd)).sum(1)) <= 0.5)


def test_decode_rejects_empty_tokens():
    cfg = tiny()
    with pytest.raises(ValueError):
        M.decode(np.zeros((1, 0), dtype=int), [[0.0, 0.0]], [[0.0, 0.0, 0.0]], cfg,
                 M.init_params(cfg, 0))


def test_alignment_helpers():
    idx = M.alignment_from_lengths(np.array([8, 4]), np.array([2, 4]))
    assert idx[0].tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert idx[1, :4].tolist() == [0, 1, 2, 3]
    idx, lens = M.alignment_from_counts(np.array([[2, 1, 3]]), np.array([[True, True, False]]))
    assert lens.tolist() == [3] and idx[0].tolist() == [0, 0, 1]


# ---------------------------------------------------------------- loss

@pytest.mark.parametrize("variant", M.VARIANTS)
def test_loss_additivity(batch, variant):
    cfg = tiny(variant=variant, beta=0.7, gamma=1.3)
    lb = M.forward_train(batch, cfg, M.init_params(cfg, 2), noise=noise_for(cfg, 4))
    v = lb.values()
    assert v["l_kl"] == pytest.approx(v["kl_zo"] + v["kl_zl_mixture"] + v["kl_yl"], abs=1e-12)
    assert v["l_cond"] == pytest.approx(0.7 * v["l_kl"] + 1.3 * v["l_mi"], abs=1e-12)
    assert v["l_total"] == pytest.approx(v["l_mel"] + v["l_cond"], abs=1e-12)
    assert v["l_mel"] == pytest.approx(v["l_frames"] + v["l_dur"], abs=1e-12)
    assert min(v["kl_zo"], v["kl_zl_mixture"], v["kl_yl"]) >= 0


def test_gamma_zero_drops_mi_term(batch):
    cfg = tiny(gamma=0.0)
    lb = M.forward_train(batch, cfg, M.init_params(cfg, 2), noise=noise_for(cfg, 4))
    v = lb.values()
    assert v["l_total"] == v["l_mel"] + v["l_kl"]
    assert v["l_mi"] != 0


def test_posterior_equals_prior_and_perfect_reconstruction():
    cfg = tiny()
    params = M.init_params(cfg, 0)
    # identical mixture components, so any responsibility vector gives zero KL
    params["prior.zl.means"] = Tensor(np.zeros((3, 3)))
    params["prior.zl.logvar"] = Tensor(np.full((3, 3), -1.0))
    params["dec.dur.w"] = Tensor(np.zeros_like(params["dec.dur.w"].data))
    params["dec.dur.b"] = Tensor(np.array([math.log(8.0)]))
    tokens = np.array([[2, 5, 7]])
    b = {"tokens": tokens, "tok_mask": np.ones((1, 3), bool), "n_tokens": np.array([3]),
         "lengths": np.array([24]), "mask": np.ones((1, 24), bool), "y_o": np.array([1])}
    q_zo = D.DiagonalGaussian(params["prior.zo.means"][1:2], params["prior.zo.logvar"][1:2])
    q_zl = D.DiagonalGaussian(Tensor(np.zeros((1, 3))), Tensor(np.full((1, 3), -1.0)))
    z_o, z_l = q_zo.mean, q_zl.mean
    q_yl = D.mixture_responsibilities(M.zl_prior(params), z_l)
    post = M.Posteriors(q_zo, q_zl, q_yl, z_o, z_l)
    idx = M.alignment_from_lengths(b["lengths"], b["n_tokens"])
    b["frames"] = M.decode_frames(tokens, idx, b["lengths"], z_o, z_l, cfg, params).data
    v = M.forward_train(b, cfg, params, posteriors=post).values()
    assert v["l_kl"] == pytest.approx(0.0, abs=1e-12)
    assert v["l_mel"] == pytest.approx(0.0, abs=1e-12)


def test_free_running_loss_aligns_lengths(batch):
    cfg = tiny()
    lb = M.forward_train(batch, cfg, M.init_params(cfg, 0), noise=noise_for(cfg, 4),
                         teacher_forcing=False)
    assert np.isfinite(float(lb.l_total.data))


# ---------------------------------------------------------------- traversal

def test_traverse_endpoints_and_single_step():
    cfg = tiny()
    params = M.init_params(cfg, 0)
    marg = D.marginal_prior_stats(M.zl_prior(params))
    values, decoded = M.traverse_latent(params, cfg, 1, 5, [1, 2, 3])
    assert values[0] == pytest.approx(marg.mean.data[1] - 3 * marg.std[1], abs=1e-12)
    assert values[-1] == pytest.approx(marg.mean.data[1] + 3 * marg.std[1], abs=1e-12)
    assert len(decoded) == 5
    one, _ = M.traverse_latent(params, cfg, 1, 1, [1, 2, 3])
    assert one.tolist() == [marg.mean.data[1]]
    with pytest.raises(ValueError):
        M.traverse_latent(params, cfg, 3, 5, [1, 2, 3])


def test_encode_samples_in_input_order():
    ds = sg.generate_dataset(sg.DatasetConfig(n_per_class=3, seed=0))
    cfg = tiny()
    params = M.init_params(cfg, 0)
    enc = M.encode_samples(ds.samples, cfg, params, batch_size=2)
    s = ds.samples[4]
    post = M.encode(s.frames[None], np.ones((1, s.length), bool), cfg, params,
                    noise=(np.zeros((1, 2)), np.zeros((1, 3))))
    assert np.allclose(enc["z_l"][4], post.q_zl.mean.data[0], atol=1e-12)
    assert enc["y_o"].tolist() == [x.y_o for x in ds.samples]
    assert np.allclose(enc["qpsi"].sum(1), 1.0)
