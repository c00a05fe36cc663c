import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanewise import vqvae
from lanewise.vqvae import EarlyStopping, VQVAE, quantize, to_model_range, vq_loss

from _helpers import rel_err


def test_quantize_examples():
    book = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert quantize(np.array([0.9, 0.8]), book)[0][0] == 1
    assert quantize(np.array([0.5, 0.5]), book)[0][0] == 0


def test_quantize_matches_brute_force():
    rng = np.random.default_rng(0)
    book = rng.normal(size=(64, 32))
    z = rng.normal(size=(1000, 32))
    brute = [min(range(64), key=lambda j: (np.sum((zi - book[j]) ** 2), j)) for zi in z]
    idx, e = quantize(z, book)
    assert list(idx) == brute
    assert np.array_equal(e, book[idx])


def test_loss_examples():
    z = np.ones((1, 4))
    assert vq_loss(np.zeros(3), np.zeros(3), z, z)[0] == 0.0
    assert vq_loss(np.array([0.5]), np.array([0.25]), z, z)[0] == pytest.approx(0.0625)
    ze, ek = np.array([1.0, 2.0]), np.array([0.0, 0.0])
    a, b = vq_loss(np.zeros(1), np.zeros(1), ze, ek, 0.25), vq_loss(np.zeros(1), np.zeros(1), ze, ek, 0.5)
    assert b[3] == pytest.approx(2 * a[3]) and b[1:3] == a[1:3]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 2.0))
def test_loss_decomposition(seed, beta):
    rng = np.random.default_rng(seed)
    x, r, ze, ek = (rng.normal(size=s) for s in [(2, 5), (2, 5), (3, 4), (3, 4)])
    total, rec, cb, commit = vq_loss(x, r, ze, ek, beta)
    assert min(rec, cb, commit) >= 0
    assert total == pytest.approx(rec + cb + beta * (commit / beta))


def test_shapes_and_range():
    m = VQVAE(seed=0)
    out = m.forward(np.zeros((2, 1, 32, 32)))
    assert out["recon"].shape == (2, 1, 32, 32)
    assert out["z_e"].shape == (2, 32, 8, 8) and out["indices"].shape == (2, 8, 8)
    assert np.all(np.abs(out["recon"]) <= 1)
    assert m.codebook.shape == (64, 32) and np.all(np.abs(m.codebook) <= 1 / 64)
    assert np.array_equal(to_model_range(np.array([0.0, 0.5, 1.0])), [-1.0, 0.0, 1.0])


def _model64(seed):
    m = VQVAE(seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for bn in (m.bn1, m.bn2, m.bn3):
        bn.track_stats = False
        bn.params["gamma"][:] = rng.uniform(0.5, 1.5, bn.params["gamma"].shape)
        bn.params["beta"][:] = rng.normal(0, 0.1, bn.params["beta"].shape)
    m.codebook = rng.normal(0, 0.5, m.codebook.shape)
    m.codebook_grad = np.zeros_like(m.codebook)
    return m, rng


def _surrogate(m, x, idx0, ze0, ek0):
    """Loss with the quantizer replaced by z_e + stop_gradient(e_k - z_e), indices frozen."""
    ze = m.encode(x, True)
    ek = m.codebook[idx0.reshape(-1)].reshape(ze0.shape[0], 8, 8, -1).transpose(0, 3, 1, 2)
    zq = ze + (ek0 - ze0)  # straight-through offset held at the base point
    recon = m.decode(zq, True)
    rec = np.mean((recon - x) ** 2)
    cb = np.mean((ze0 - ek) ** 2)  # sg on z_e: moves only with the codebook
    commit = m.beta * np.mean((ze - ek0) ** 2)  # sg on e_k: moves only with the encoder
    return rec + cb + commit


def full_gradient_check(seed, per_param=3, eps=1e-7):
    # BN centres pre-activations on the ReLU kink; a small step keeps central differences on one side
    m, rng = _model64(seed)
    x = np.tanh(rng.normal(size=(2, 1, 32, 32)))
    m.zero_grad()
    out = m.loss_and_grad(x, train=True)
    idx0, ze0 = out["indices"], m.encode(x, True)
    ek0 = m.quantize_latent(ze0)[1]
    targets = [(l.params[n], l.grads[n]) for l in m.layers for n in l.params]
    targets.append((m.codebook, m.codebook_grad))
    analytic, numeric = [], []
    for p, g in targets:
        g = g.copy()
        for flat in rng.choice(p.size, min(per_param, p.size), replace=False):
            i = np.unravel_index(flat, p.shape)
            old = p[i]
            p[i] = old + eps
            hi = _surrogate(m, x, idx0, ze0, ek0)
            p[i] = old - eps
            lo = _surrogate(m, x, idx0, ze0, ek0)
            p[i] = old
            analytic.append(g[i])
            numeric.append((hi - lo) / (2 * eps))
    return rel_err(analytic, numeric)


@pytest.mark.parametrize("seed", range(4))
def test_full_loss_gradient(seed):
    assert full_gradient_check(seed) < 1e-4


def test_straight_through_matches_identity_quantizer():
    m, rng = _model64(7)
    x = np.tanh(rng.normal(size=(1, 1, 32, 32)))
    # eval-mode BN, codebook holding the input's own 64 latent vectors: z_q == z_e exactly
    ze = m.encode(x, False)
    m.codebook = ze.transpose(0, 2, 3, 1).reshape(64, 32).copy()
    m.codebook_grad = np.zeros_like(m.codebook)
    m.zero_grad()
    m.loss_and_grad(x, train=False)
    st_grads = [l.grads[n].copy() for l in m.encoder for n in l.params]

    m.zero_grad()
    recon = m.decode(m.encode(x, False), False)
    d = 2.0 * (recon - x) / recon.size
    for layer in reversed(m.decoder):
        d = layer.backward(d)
    for layer in reversed(m.encoder):
        d = layer.backward(d)
    ident = [l.grads[n] for l in m.encoder for n in l.params]
    for a, b in zip(st_grads, ident):
        assert rel_err(a, b) < 1e-5


def test_early_stopping_patience():
    stop = EarlyStopping(patience=10)
    losses = [5, 4, 3, 2, 1] + [1 + i for i in range(1, 30)]
    epoch = next(e for e, l in enumerate(losses, start=1) if stop.update(l))
    assert epoch == 15 and stop.best_epoch == 5


def test_min_delta_counts_as_no_improvement():
    stop = EarlyStopping(patience=2, min_delta=0.1)
    assert not stop.update(1.0)
    assert not stop.update(0.95)
    assert stop.update(0.93)


def _specs(n, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(32)
    base = 0.5 + 0.4 * np.sin(2 * np.pi * t / rng.uniform(4, 30, size=(n, 1)))[:, None, :]
    return np.clip(base + rng.normal(0, 0.02, (n, 32, 32)), 0, 1)


def test_training_is_deterministic_and_logged():
    cfg = vqvae.TrainConfig(max_epochs=2, batch_size=16, seed=3)
    a, ra = vqvae.train(_specs(40, 0), _specs(10, 1), cfg)
    b, rb = vqvae.train(_specs(40, 0), _specs(10, 1), cfg)
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k]), k
    assert ra.loss_log() == rb.loss_log()
    assert ra.loss_log().splitlines()[0] == "epoch,train_loss,val_loss" and len(ra.loss_log().splitlines()) == 3
    assert ra.stopping_epoch == 2


def test_training_errors():
    with pytest.raises(ValueError):
        vqvae.train(_specs(1, 0), _specs(2, 1))
    with pytest.raises(ValueError):
        vqvae.train(_specs(4, 0), _specs(0, 1))
    with pytest.raises(ValueError):
        vqvae.train(_specs(4, 0), _specs(2, 1), vqvae.TrainConfig(optimizer="lbfgs", max_epochs=1))
    with pytest.raises(vqvae.TrainingDiverged), np.errstate(all="ignore"):
        vqvae.train(_specs(8, 0), _specs(2, 1), vqvae.TrainConfig(lr=1e12, max_epochs=5, optimizer="sgd"))


def test_reconstruction_error_batch_invariant():
    m = VQVAE(seed=1)
    x = _specs(12, 5)
    assert np.allclose(m.reconstruction_errors(x, batch_size=1), m.reconstruction_errors(x, batch_size=256),
                       rtol=1e-5, atol=1e-7)
    assert np.all(m.reconstruction_errors(x) >= 0)


def test_state_round_trip():
    m = VQVAE(seed=2)
    m.bn1.running_mean[:] = 0.3
    n = VQVAE(seed=9)
    n.load_state_dict(m.state_dict())
    x = _specs(3, 0)
    assert np.array_equal(m.reconstruction_errors(x), n.reconstruction_errors(x))


@pytest.fixture(scope="module")
def trained_500():
    from lanewise import dataio, pipeline, synth, wavelet

    samples, _, _ = synth.generate(synth.ScenarioConfig(hours=24, injections=[], seed=0))
    raw = pipeline.spectrograms(dataio.build_windows(samples), None, (2.0, 30.0))
    x = wavelet.normalize(raw, wavelet.fit_normalizer(raw))
    model, report = vqvae.train(x[:500], x[500:], vqvae.TrainConfig(max_epochs=30))
    return model, report, x[500:]


def test_500_window_loss_halves(trained_500):
    _, report, _ = trained_500
    assert report.stopping_epoch == 30
    assert report.train_loss[-1] < 0.5 * report.train_loss[0]
    # seeded reference run: first epoch 2.6319, epoch 30 1.1962
    assert report.train_loss[0] == pytest.approx(2.6319, rel=1e-2)
    assert report.train_loss[-1] == pytest.approx(1.1962, rel=1e-2)


def test_codebook_usage(trained_500):
    model, _, val = trained_500
    used = np.unique(model.forward(to_model_range(val).reshape(-1, 1, 32, 32))["indices"])
    assert len(used) >= 8
