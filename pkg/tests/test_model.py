import numpy as np
import pytest

from landuq.autodiff import Tape, Tensor
from landuq.errors import ConfigError, ShapeError
from landuq.graph import normalize_adjacency
from landuq.model import (
    LatentDistribution,
    ModelConfig,
    PredictionEnsemble,
    Weights,
    decode,
    decode_plain,
    decode_skip,
    encode,
    init_weights,
    load_checkpoint,
    predict_mean,
    reparameterize,
    sample_predictions,
    save_checkpoint,
)


def tiny_cfg(variant="plain"):
    return ModelConfig(
        variant=variant,
        latent_dim=4,
        encoder_channels=(2, 3),
        decoder_widths=(6, 4, 2),
        skip_stage=2,
        image_hw=(8, 8),
        topology=(("a", 3, True), ("b", 3, True)),
    )


def setup(variant="plain", seed=0):
    cfg = tiny_cfg(variant)
    weights = init_weights(cfg, seed)
    adj = normalize_adjacency(cfg.build_topology())
    rng = np.random.default_rng(seed + 1)
    image = Tensor(rng.uniform(0, 1, size=(1, 8, 8)).astype(np.float32))
    return cfg, weights, adj, image


def zeroed(weights):
    return Weights({n: Tensor(np.zeros_like(t.data), requires_grad=True) for n, t in weights.params.items()})


def test_encode_zero_weights_gives_bias():
    cfg, weights, _, image = setup()
    zw = zeroed(weights)
    zw.params["enc.mu.b"].data[:] = [1, 2, 3, 4]
    zw.params["enc.logvar.b"].data[:] = [-1, 0, 1, 2]
    dist, fmaps = encode(Tape(), image, zw, cfg)
    np.testing.assert_allclose(dist.mu.data, [1, 2, 3, 4], atol=0)
    np.testing.assert_allclose(dist.log_var.data, [-1, 0, 1, 2], atol=0)
    assert len(fmaps) == 2 and fmaps[1].shape == (3, 2, 2)


def test_encode_deterministic_and_shapes():
    cfg, weights, _, image = setup()
    d1, _ = encode(Tape(), image, weights, cfg)
    d2, _ = encode(Tape(), image, weights, cfg)
    assert np.array_equal(d1.mu.data, d2.mu.data)
    assert np.array_equal(d1.log_var.data, d2.log_var.data)
    assert d1.mu.shape == (4,) and d1.log_var.shape == (4,)


def test_encode_rejects_wrong_size():
    cfg, weights, _, _ = setup()
    with pytest.raises(ShapeError):
        encode(Tape(), Tensor(np.zeros((1, 9, 8))), weights, cfg)


def test_encode_clamps_log_var():
    cfg, weights, _, image = setup()
    zw = zeroed(weights)
    zw.params["enc.logvar.b"].data[:] = 50.0
    dist, _ = encode(Tape(), image, zw, cfg)
    assert (dist.log_var.data == 10.0).all()


def test_reparameterize_zero_eps_returns_mu():
    dist = LatentDistribution(mu=Tensor([1.0, -2.0]), log_var=Tensor([0.3, -0.7]))
    z = reparameterize(Tape(), dist, eps=np.zeros(2, dtype=np.float32))
    assert np.array_equal(z.data, dist.mu.data)


def test_reparameterize_clamps_log_var():
    dist = LatentDistribution(mu=Tensor([0.0]), log_var=Tensor([-1e6]))
    z = reparameterize(Tape(), dist, eps=np.ones(1, dtype=np.float32))
    assert z.data[0] == pytest.approx(np.exp(-5.0), rel=1e-5)


def test_reparameterize_clt_mean():
    mu = np.array([0.5, -1.0, 2.0, 0.0], dtype=np.float32)
    log_var = np.array([0.0, 1.0, -1.0, 0.5], dtype=np.float32)
    dist = LatentDistribution(mu=Tensor(mu), log_var=Tensor(log_var))
    rng = np.random.default_rng(42)
    n = 100_000
    eps = rng.standard_normal((n, 4)).astype(np.float32)
    z = reparameterize(Tape(), dist, eps=eps)
    sigma = np.exp(0.5 * log_var)
    bound = 3.0 * sigma / np.sqrt(n)
    assert (np.abs(z.data.mean(axis=0) - mu) <= bound).all()


def test_decode_plain_zero_weights_lands_on_bias():
    cfg, weights, adj, _ = setup()
    zw = zeroed(weights)
    zw.params["dec.gc1.b"].data[:] = [0.25, 0.75]
    out = decode_plain(Tape(), Tensor(np.zeros(4, dtype=np.float32)), zw, adj, cfg)
    assert out.shape == (6, 2)
    np.testing.assert_allclose(out.data, np.tile([0.25, 0.75], (6, 1)), atol=0)


def test_decode_plain_batched_matches_single():
    cfg, weights, adj, _ = setup()
    rng = np.random.default_rng(3)
    zs = rng.normal(size=(5, 4)).astype(np.float32)
    batched = decode_plain(Tape(), Tensor(zs), weights, adj, cfg).data
    for i in range(5):
        single = decode_plain(Tape(), Tensor(zs[i]), weights, adj, cfg).data
        assert np.array_equal(batched[i], single)


def test_decode_variant_mismatch_rejected():
    cfg, weights, adj, image = setup()
    with pytest.raises(ConfigError):
        decode_skip(Tape(), Tensor(np.zeros(4, dtype=np.float32)), [], weights, adj, cfg)


def test_decode_skip_zero_features_matches_truncated_plain():
    """With the sampled features forced to zero the skip decoder reduces to a
    plain decoder whose last layer ignores the skip rows."""
    cfg, weights, adj, image = setup(variant="skip")
    tape = Tape()
    dist, fmaps = encode(tape, image, weights, cfg)
    zero_fmaps = [Tensor(np.zeros_like(f.data)) for f in fmaps]
    z = Tensor(np.random.default_rng(0).normal(size=4).astype(np.float32))
    out_skip = decode_skip(tape, z, zero_fmaps, weights, adj, cfg).data

    plain_cfg = tiny_cfg("plain")
    pw = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in weights.params.items() if not n.startswith("dec.readout")}
    last = f"dec.gc{len(cfg.decoder_widths) - 2}.w"
    pw[last] = Tensor(weights[last].data[: cfg.decoder_widths[-2]].copy(), requires_grad=True)
    out_plain = decode_plain(Tape(), z, Weights(pw), adj, plain_cfg).data
    np.testing.assert_allclose(out_skip, out_plain, atol=1e-6)


def test_decode_skip_out_of_range_intermediate_is_finite():
    cfg, weights, adj, image = setup(variant="skip")
    # huge readout bias pushes intermediate coordinates far outside [0, 1]
    weights.params["dec.readout.b"].data[:] = [50.0, -50.0]
    tape = Tape()
    dist, fmaps = encode(tape, image, weights, cfg)
    out = decode_skip(tape, Tensor(np.zeros(4, dtype=np.float32)), fmaps, weights, adj, cfg)
    assert np.isfinite(out.data).all()


def test_decode_skip_gradient_reaches_encoder_through_skip():
    """Freeze z as a constant so the only route from loss to the conv weights
    is the feature-sampling path, then finite-difference one weight."""
    cfg, weights, adj, image = setup(variant="skip")
    z_const = np.random.default_rng(5).normal(size=4).astype(np.float32)

    def forward():
        tape = Tape()
        _, fmaps = encode(tape, image, weights, cfg)
        out = decode_skip(tape, Tensor(z_const), fmaps, weights, adj, cfg)
        return tape, tape.sum(tape.mul(out, out))

    tape, loss = forward()
    conv_w = weights["enc.conv0.w"]
    grads = tape.backward(loss, [conv_w])
    g = grads[conv_w]
    assert np.abs(g).max() > 0

    idx = np.unravel_index(np.abs(g).argmax(), g.shape)
    h = 1e-3
    orig = conv_w.data[idx]
    conv_w.data[idx] = orig + h
    _, lp = forward()
    conv_w.data[idx] = orig - h
    _, lm = forward()
    conv_w.data[idx] = orig
    fd = (lp.item() - lm.item()) / (2 * h)
    assert abs(fd - g[idx]) <= max(2e-3 * abs(fd), 1e-3)


@pytest.mark.parametrize("variant", ["plain", "skip"])
def test_sample_predictions_collapsed_posterior(variant):
    cfg, weights, adj, image = setup(variant)
    # force log_var to the clamp floor: sigma ~ e^-5
    weights.params["enc.logvar.w"].data[:] = 0
    weights.params["enc.logvar.b"].data[:] = -1e9
    dist, ens = sample_predictions(image, weights, cfg, adj, n=20, rng=np.random.default_rng(0))
    node_std = np.sqrt((ens.node_std_xy**2).sum(axis=1))
    assert node_std.max() < 1e-3
    np.testing.assert_allclose(
        ens.node_mean, predict_mean(image, weights, cfg, adj), atol=1e-3
    )


def test_sample_predictions_deterministic():
    cfg, weights, adj, image = setup()
    _, a = sample_predictions(image, weights, cfg, adj, n=50, rng=np.random.default_rng(9))
    _, b = sample_predictions(image, weights, cfg, adj, n=50, rng=np.random.default_rng(9))
    assert np.array_equal(a.samples, b.samples)


def test_sample_predictions_batched_equals_sequential():
    cfg, weights, adj, image = setup()
    _, ens = sample_predictions(image, weights, cfg, adj, n=8, rng=np.random.default_rng(4))

    tape = Tape()
    dist, fmaps = encode(tape, image, weights, cfg)
    rng = np.random.default_rng(4)
    singles = []
    for _ in range(8):
        z = reparameterize(tape, dist, rng=rng)
        singles.append(decode(tape, z, fmaps, weights, cfg=cfg, adj=adj).data)
    assert np.array_equal(ens.samples, np.stack(singles))


def test_sample_predictions_rejects_small_n():
    cfg, weights, adj, image = setup()
    with pytest.raises(ConfigError):
        sample_predictions(image, weights, cfg, adj, n=1, rng=np.random.default_rng(0))


def test_ensemble_statistics():
    samples = np.zeros((2, 1, 2), dtype=np.float32)
    samples[1, 0, 0] = 0.2
    ens = PredictionEnsemble.from_samples(samples)
    np.testing.assert_allclose(ens.node_mean, [[0.1, 0.0]], atol=1e-7)
    np.testing.assert_allclose(ens.node_std_xy, [[0.1, 0.0]], atol=1e-7)


@pytest.mark.parametrize("variant", ["plain", "skip"])
def test_end_to_end_gradcheck_ten_params(variant):
    """Analytic gradients of a scalar readout match finite differences for 10
    randomly chosen parameters (float32 budget, rel err < 1e-3)."""
    cfg, weights, adj, image = setup(variant, seed=7)
    rng = np.random.default_rng(100)
    m = cfg.node_count()
    probe = Tensor(rng.uniform(0.2, 1.0, size=(m, 2)).astype(np.float32))

    def forward():
        tape = Tape()
        dist, fmaps = encode(tape, image, weights, cfg)
        z = reparameterize(tape, dist, eps=np.full(4, 0.3, dtype=np.float32))
        out = decode(tape, z, fmaps, weights, adj, cfg)
        loss = tape.add(
            tape.sum(tape.mul(out, probe)), tape.sum(tape.mul(dist.log_var, dist.log_var))
        )
        return tape, loss

    tape, loss = forward()
    params = weights.tensors()
    tape.backward(loss, params)

    names = weights.names()
    picks = rng.choice(len(names), size=10, replace=False)
    h = 1e-3
    fd_vec, an_vec = [], []
    for pick in picks:
        tensor = weights[names[pick]]
        flat_idx = int(rng.integers(tensor.size))
        idx = np.unravel_index(flat_idx, tensor.data.shape)
        orig = tensor.data[idx]
        tensor.data[idx] = orig + h
        _, lp = forward()
        tensor.data[idx] = orig - h
        _, lm = forward()
        tensor.data[idx] = orig
        fd_vec.append((lp.item() - lm.item()) / (2 * h))
        an_vec.append(float(tensor.grad[idx]))
    fd_vec = np.array(fd_vec)
    an_vec = np.array(an_vec)
    scale = max(np.abs(fd_vec).max(), np.abs(an_vec).max())
    rel = np.abs(fd_vec - an_vec).max() / scale
    assert rel < 1e-3, f"vector rel err {rel:.2e} over params {[names[p] for p in picks]}"


def test_checkpoint_round_trip(tmp_path):
    cfg, weights, adj, image = setup("skip", seed=3)
    save_checkpoint(tmp_path / "ckpt", weights, cfg, seed=3, step=17)
    loaded, cfg2, manifest = load_checkpoint(tmp_path / "ckpt")
    assert cfg2 == cfg
    assert manifest["step"] == 17
    assert loaded.names() == weights.names()
    for name in weights.names():
        assert np.array_equal(loaded[name].data, weights[name].data)
    # loaded weights drive an identical forward
    np.testing.assert_allclose(
        predict_mean(image, loaded, cfg2, adj), predict_mean(image, weights, cfg, adj), atol=0
    )


def test_checkpoint_length_validated(tmp_path):
    from landuq.errors import DataError

    cfg, weights, _, _ = setup()
    save_checkpoint(tmp_path / "ckpt", weights, cfg, seed=0, step=0)
    blob = (tmp_path / "ckpt" / "weights.bin").read_bytes()
    (tmp_path / "ckpt" / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "ckpt")


def test_param_count_accessor():
    cfg, weights, _, _ = setup()
    total = sum(np.prod(t.data.shape) for t in weights.tensors())
    assert weights.param_count() == total
