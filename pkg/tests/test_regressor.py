import numpy as np
import pytest

from csdetect.encoding import PatchShape, make_geometry
from csdetect.errors import ConfigError, NumericError
from csdetect.recovery import RecoveryConfig, ista_recover_batch
from csdetect.regressor import (LossConfig, TrainLabel, TrainState, backward,
                                encode_records, forward, forward_batch,
                                init_model, load_checkpoint, loss,
                                make_labels, save_checkpoint, train)
from csdetect.rng import CounterRng
from csdetect.sensing import make_sensing_matrix
from csdetect.synthdata import SynthConfig, generate


def tiny_setup(seed=0, h=24, w=24, L=3, m=16, cells=(1, 2), hidden=(12,),
               alpha=1.3, mode="ecnncs2", **state_kw):
    shape = PatchShape(h, w)
    geometry = make_geometry(shape, L, margin=10.0, seed=seed)
    D = make_sensing_matrix(m, geometry.code_len, seed=seed + 1)
    synth = SynthConfig(shape=shape, cells_min=cells[0], cells_max=cells[1],
                        blob_radius=4.0, clutter_min=0, clutter_max=0, seed=seed)
    records = generate(synth, 4)
    codes = encode_records(records, geometry)
    model = init_model(shape, hidden, L * m + 1, seed=seed + 2, out_scale=25.0)
    state = TrainState(model=model, D=D, geometry=geometry,
                       recovery=RecoveryConfig(lam=0.39, max_iters=400, tol=1e-10),
                       loss_cfg=LossConfig(alpha=alpha, beta=0.2, lam=0.39),
                       mode=mode, seed=seed, **state_kw)
    labels = make_labels(codes, [len(r.points) for r in records], D, 0.2)
    return state, records, codes, labels


def test_zero_weights_produce_zero_output():
    model = init_model(PatchShape(8, 8), [4], 5, seed=0)
    for W in model.weights:
        W[:] = 0.0
    x_hat, c_hat = forward(model, np.full((8, 8), 77, dtype=np.uint8))
    assert not x_hat.any() and c_hat == 0.0


def test_forward_is_deterministic():
    a = init_model(PatchShape(8, 8), [6], 5, seed=3)
    b = init_model(PatchShape(8, 8), [6], 5, seed=3)
    img = CounterRng(1).integers(0, 256, (8, 8)).astype(np.uint8)
    assert np.array_equal(forward(a, img)[0], forward(b, img)[0])


def test_output_length_with_reference_hyperparameters():
    # m=112, L=27: dense code plus one count slot
    model = init_model(PatchShape(16, 16), [8], 27 * 112 + 1, seed=0)
    x_hat, _ = forward(model, np.zeros((16, 16), dtype=np.uint8))
    assert x_hat.shape == (27 * 112,)


def test_input_pool_must_divide():
    with pytest.raises(ConfigError):
        init_model(PatchShape(10, 10), [4], 3, seed=0, input_pool=3)
    model = init_model(PatchShape(10, 10), [4], 3, seed=0, input_pool=2)
    assert model.sizes[0] == 25


def test_loss_zero_at_perfect_fit():
    label = TrainLabel(x=np.array([1.0, -2.0]), count=3, beta=0.2)
    a = np.array([5.0, 0.0, -1.0])
    assert loss(label.x, 0.2 * 3, a, label, a, LossConfig(alpha=1.3)) == 0.0


def test_loss_alpha_zero_is_pure_l2():
    label = TrainLabel(x=np.array([1.0, 1.0]), count=0, beta=0.2)
    val = loss(np.array([2.0, 1.0]), 0.0, np.array([9.0]), label,
               np.array([0.0]), LossConfig(alpha=0.0))
    assert val == 0.5


def test_loss_l1_term_scaling():
    label = TrainLabel(x=np.array([0.0]), count=0, beta=0.2)
    got = loss(np.array([0.0]), 0.0, np.array([2.0, 0.0]), label,
               np.array([0.0, 0.0]), LossConfig(alpha=1.3))
    assert np.isclose(got, 2.6)


def test_label_concatenation():
    label = TrainLabel(x=np.arange(4.0), count=5, beta=0.2)
    full = label.full()
    assert full.shape == (5,)
    assert full[-1] == 1.0


def test_alpha_zero_output_gradient_is_residual():
    state, records, codes, labels = tiny_setup(alpha=0.0, mode="ecnncs2")
    imgs = np.stack([r.image for r in records])
    _, dW, db, _ = backward(state, imgs, labels, codes)
    # residual path only: gradients equal the plain L2 backward pass
    Y, cache = forward_batch(state.model, imgs)
    from csdetect.regressor import backward_batch
    dW2, db2 = backward_batch(state.model, cache, (Y - labels) / len(records))
    for g, h in zip(dW, dW2):
        assert np.array_equal(g, h)


def test_cnncs_ignores_recovery_entirely():
    state, records, codes, labels = tiny_setup(mode="cnncs", alpha=1.3)
    imgs = np.stack([r.image for r in records])
    loss1, dW1, _, _ = backward(state, imgs, labels, codes)
    state2, *_ = tiny_setup(mode="cnncs", alpha=0.0)
    loss2, dW2, _, _ = backward(state2, imgs, labels, codes)
    for g, h in zip(dW1, dW2):
        assert np.array_equal(g, h)


def test_perfect_prediction_zero_gradients_l2_mode():
    state, records, codes, labels = tiny_setup(mode="cnncs")
    imgs = np.stack([r.image for r in records])
    Y, _ = forward_batch(state.model, imgs)
    _, dW, db, _ = backward(state, imgs, Y, codes)
    for g in dW + db:
        assert np.abs(g).max() <= 1e-12


def layer_fd_check(state, imgs, labels, codes, entries, rel_tol, smooth_eps=0.0):
    """Central finite differences of the batch loss against backward()."""
    from csdetect.recovery_grad import smoothed_recover

    def batch_loss():
        Y, _ = forward_batch(state.model, imgs)
        resid = Y - labels
        total = 0.5 * float(np.sum(resid * resid))
        if state.mode != "cnncs" and state.loss_cfg.alpha > 0:
            L, m = state.geometry.num_lines, state.D.m
            X = Y[:, :L * m].reshape(-1, m).T
            A_true = np.concatenate([c.per_line for c in codes], axis=0).T
            if smooth_eps > 0:
                cols = [smoothed_recover(X[:, j], state.D, state.loss_cfg.lam,
                                         smooth_eps) for j in range(X.shape[1])]
                A = np.stack(cols, axis=1)
                diff = np.sqrt((A - A_true) ** 2 + smooth_eps ** 2)
            else:
                A = ista_recover_batch(X, state.D, state.recovery)
                diff = np.abs(A - A_true)
            total += state.loss_cfg.alpha * float(np.sum(diff))
        return total / len(imgs)

    _, dW, db, _ = backward(state, imgs, labels, codes)
    grads = {"W": dW, "b": db}
    h = 1e-5
    for (kind, li, idx) in entries:
        param = state.model.weights[li] if kind == "W" else state.model.biases[li]
        orig = param[idx]
        param[idx] = orig + h
        fp = batch_loss()
        param[idx] = orig - h
        fm = batch_loss()
        param[idx] = orig
        fd = (fp - fm) / (2 * h)
        got = grads[kind][li][idx]
        scale = max(abs(fd), 1e-8)
        assert abs(fd - got) / scale <= rel_tol, (kind, li, idx, fd, got)


def test_layer_gradients_match_fd_l2_only():
    state, records, codes, labels = tiny_setup(mode="cnncs")
    imgs = np.stack([r.image for r in records])
    entries = [("W", 0, (3, 100)), ("W", 0, (7, 40)), ("W", 1, (5, 2)),
               ("b", 0, (4,)), ("b", 1, (9,))]
    layer_fd_check(state, imgs, labels, codes, entries, rel_tol=1e-5)


def test_end_to_end_gradient_matches_fd_through_recovery():
    # support-stable setup: predictions near the labels, exact rule active
    state, records, codes, labels = tiny_setup(mode="ecnncs2", alpha=1.3,
                                               grad_rule="exact")
    state.recovery = RecoveryConfig(lam=0.39, max_iters=4000, tol=1e-12)
    imgs = np.stack([r.image for r in records[:1]])
    labels = labels[:1]
    codes = codes[:1]
    # steer the network output close to the label so supports are stable
    Y, _ = forward_batch(state.model, imgs)
    state.model.biases[-1] += (labels[0] - Y[0]) / state.model.out_scale
    entries = [("W", 0, (3, 100)), ("W", 1, (5, 2)), ("b", 1, (9,)), ("b", 0, (2,))]
    layer_fd_check(state, imgs, labels, codes, entries, rel_tol=1e-3,
                   smooth_eps=1e-6)


def test_ecnncs1_backward_matches_fd_through_unroll():
    state, records, codes, labels = tiny_setup(mode="ecnncs1", alpha=1.3,
                                               lista_T=6)
    imgs = np.stack([r.image for r in records[:1]])
    labels = labels[:1]
    codes = codes[:1]
    Y, _ = forward_batch(state.model, imgs)
    state.model.biases[-1] += (labels[0] - Y[0]) / state.model.out_scale

    from csdetect.recovery import ListaParams, lista_forward_batch

    def unroll_loss():
        Yc, _ = forward_batch(state.model, imgs)
        resid = Yc - labels
        total = 0.5 * float(np.sum(resid * resid))
        L, m = state.geometry.num_lines, state.D.m
        X = Yc[:, :L * m].reshape(-1, m).T
        A_true = np.concatenate([c.per_line for c in codes], axis=0).T
        params = ListaParams.ista_init(state.D, state.recovery, state.lista_T)
        A = lista_forward_batch(X, params)
        total += state.loss_cfg.alpha * float(np.sum(np.abs(A - A_true)))
        return total

    _, dW, db, _ = backward(state, imgs, labels, codes)
    h = 1e-6
    for (kind, li, idx) in [("W", 1, (5, 2)), ("b", 1, (3,))]:
        param = state.model.weights[li] if kind == "W" else state.model.biases[li]
        orig = param[idx]
        param[idx] = orig + h
        fp = unroll_loss()
        param[idx] = orig - h
        fm = unroll_loss()
        param[idx] = orig
        fd = (fp - fm) / (2 * h)
        got = (dW if kind == "W" else db)[li][idx]
        assert abs(fd - got) / max(abs(fd), 1e-8) <= 1e-3


def test_single_sample_descent():
    state, records, codes, labels = tiny_setup(mode="cnncs")
    state.lr = 1e-4
    h1 = train(state, records[:1], codes[:1], epochs=1, batch_size=1)
    h2 = train(state, records[:1], codes[:1], epochs=1, batch_size=1)
    assert h2[-1]["train_loss"] < h1[-1]["train_loss"]


def test_training_is_deterministic(tmp_path):
    out = []
    for _ in range(2):
        state, records, codes, labels = tiny_setup(mode="ecnncs2")
        train(state, records, codes, epochs=2, batch_size=2)
        path = tmp_path / f"ck{len(out)}.bin"
        save_checkpoint(state, path)
        out.append(path.read_bytes())
    assert out[0] == out[1]


def test_alpha_zero_trajectory_matches_cnncs_bitwise():
    state_a, records, codes, labels = tiny_setup(mode="ecnncs2", alpha=0.0)
    state_b, *_ = tiny_setup(mode="cnncs", alpha=0.0)
    train(state_a, records, codes, epochs=2, batch_size=2)
    train(state_b, records, codes, epochs=2, batch_size=2)
    for Wa, Wb in zip(state_a.model.weights, state_b.model.weights):
        assert np.array_equal(Wa, Wb)


def test_divergence_raises_numeric_error():
    state, records, codes, labels = tiny_setup(mode="cnncs")
    state.model.weights[0][0, 0] = np.inf
    with pytest.raises(NumericError):
        train(state, records, codes, epochs=1, batch_size=2)


def test_empty_training_set_rejected():
    state, records, codes, labels = tiny_setup()
    with pytest.raises(ConfigError):
        train(state, [], [], epochs=1, batch_size=1)


def test_train_d_updates_matrix_and_labels():
    state, records, codes, labels = tiny_setup(mode="ecnncs2", train_D=True)
    before = state.D.entries.copy()
    train(state, records, codes, epochs=1, batch_size=2)
    assert not np.array_equal(before, state.D.entries)


def test_checkpoint_roundtrip(tmp_path):
    state, records, codes, labels = tiny_setup(mode="ecnncs1", train_D=True)
    train(state, records, codes, epochs=1, batch_size=2)
    path = tmp_path / "ck.bin"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert back.mode == state.mode
    assert back.epoch == state.epoch
    assert back.model.sizes == state.model.sizes
    assert back.model.out_scale == state.model.out_scale
    for a, b in zip(back.model.weights, state.model.weights):
        assert np.array_equal(a, b)
    assert np.array_equal(back.D.entries, state.D.entries)
    assert np.array_equal(back.geometry.anchors, state.geometry.anchors)
    assert back.recovery == state.recovery
    assert back.loss_cfg == state.loss_cfg
    img = records[0].image
    assert np.array_equal(forward(back.model, img)[0], forward(state.model, img)[0])


def test_checkpoint_magic(tmp_path):
    state, *_ = tiny_setup()
    path = tmp_path / "ck.bin"
    save_checkpoint(state, path)
    assert path.read_bytes()[:7] == b"SPCKPT1"
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT")
    with pytest.raises(ConfigError):
        load_checkpoint(bad)
