import numpy as np
import pytest

from kdlab.data import LabeledDataset, TransferSet, full_transfer_set, remove_class
from kdlab.errors import BadMagicError, DivergenceError, LengthMismatchError, ShapeError, VersionMismatchError
from kdlab.losses import softmax_t
from kdlab.nn import Dense, ModelSpec, Output, init_params, predict_logits
from kdlab.presets import preset
from kdlab.tensor import SeededRng, derive_seed
from kdlab.train import (Adam, Checkpoint, DistillConfig, SGDMomentum, SoftLabelMatrix, TrainConfig,
                         distill_student, evaluate, generate_soft_labels, load_checkpoint, save_checkpoint,
                         train_teacher)

LINEAR = ModelSpec((Dense(2, 2), Output(2)), (2,), "linear")


def separable(n=80, seed=0):
    rng = SeededRng(seed)
    x = rng.normal((n, 2)) * 0.5
    y = (np.arange(n) % 2).astype(np.int64)
    x[:, 0] += np.where(y == 1, 2.0, -2.0)
    return LabeledDataset(x.astype(np.float32), y, 2, name="toy")


def three_blobs(n=90, seed=1):
    rng = SeededRng(seed)
    y = np.arange(n) % 3
    centres = np.array([[0, 3], [3, -2], [-3, -2]], dtype=np.float64)
    x = centres[y] + rng.normal((n, 2)) * 0.6
    return LabeledDataset(x.astype(np.float32), y, 3, name="blobs")


# -- configs and optimizers ------------------------------------------------


def test_train_config_validation():
    for bad in ({"batch_size": 0}, {"epochs": -1}, {"lr": 0}, {"optimizer": "rmsprop"}, {"loss": "hinge"},
                {"alpha_ls": 2.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        DistillConfig(alpha_kd=1.2)
    with pytest.raises(ValueError):
        DistillConfig(T=0)


def test_sgd_momentum_update_rule():
    opt = SGDMomentum(lr=0.1, momentum=0.5)
    p = [{"w": np.array([1.0])}]
    opt.step(p, [{"w": np.array([2.0])}])
    assert p[0]["w"][0] == pytest.approx(1.0 - 0.1 * 2.0)
    opt.step(p, [{"w": np.array([2.0])}])
    assert p[0]["w"][0] == pytest.approx(0.8 - 0.1 * (0.5 * 2.0 + 2.0))


def test_adam_first_step_moves_by_lr():
    opt = Adam(lr=0.01)
    p = [{"w": np.array([1.0, -1.0])}]
    opt.step(p, [{"w": np.array([3.0, -0.2])}])
    np.testing.assert_allclose(p[0]["w"], [1.0 - 0.01, -1.0 + 0.01], rtol=1e-6)


# -- teacher training ------------------------------------------------------


def test_zero_epochs_returns_init():
    cfg = TrainConfig(epochs=0, seed=3)
    ckpt, hist = train_teacher(LINEAR, separable(), cfg)
    init = init_params(LINEAR, SeededRng(derive_seed(3, "init")))
    assert ckpt.model.flat_params().tobytes() == init.flat_params().tobytes()
    assert hist == []


def test_separable_toy_reaches_full_accuracy():
    ds = separable()
    ckpt, hist = train_teacher(LINEAR, ds, TrainConfig(epochs=200, batch_size=16, lr=0.01))
    assert evaluate(ckpt, ds)[0] == 1.0
    assert hist[-1]["loss"] < hist[0]["loss"]
    assert {"epoch", "loss", "train_accuracy", "entropy"} <= set(hist[0])


def test_training_is_deterministic():
    ds = three_blobs()
    spec = ModelSpec((Dense(2, 8), Dense(8, 3), Output(3)), (2,))
    cfg = TrainConfig(epochs=5, batch_size=7, seed=11)
    a, ha = train_teacher(spec, ds, cfg)
    b, hb = train_teacher(spec, ds, cfg)
    assert a.blob() == b.blob() and a.id == b.id
    assert ha == hb
    c, _ = train_teacher(spec, ds, TrainConfig(epochs=5, batch_size=7, seed=12))
    assert c.blob() != a.blob()


def test_partial_last_batch_is_used():
    ds = separable(n=10)
    cfg = TrainConfig(epochs=1, batch_size=4, optimizer="sgd_momentum", lr=0.1, momentum=0.0, shuffle=False)
    ckpt, _ = train_teacher(LINEAR, ds, cfg)
    # replay by hand with three steps of sizes 4, 4, 2
    from kdlab.losses import ce_loss
    from kdlab.nn import backward, forward

    m = init_params(LINEAR, SeededRng(derive_seed(cfg.seed, "init")))
    for s in (slice(0, 4), slice(4, 8), slice(8, 10)):
        logits, _, caches = forward(m, ds.images[s])
        _, d = ce_loss(ds.labels[s], logits)
        for p, g in zip(m.params, backward(m, caches, d)):
            for k in p:
                p[k] -= 0.1 * g[k]
    np.testing.assert_array_equal(ckpt.model.flat_params(), m.flat_params())


def test_label_smoothing_teacher_runs():
    ckpt, hist = train_teacher(LINEAR, separable(), TrainConfig(epochs=3, loss="ls", alpha_ls=0.2))
    assert np.isfinite(hist[-1]["loss"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_step():
    ds = separable()
    ds.images[5] = np.inf
    with pytest.raises(DivergenceError) as info:
        train_teacher(LINEAR, ds, TrainConfig(epochs=2, batch_size=8, shuffle=False))
    assert info.value.epoch == 0 and info.value.step == 0


def test_incompatible_dataset():
    with pytest.raises(ShapeError):
        train_teacher(preset("mnist-baseline"), separable(), TrainConfig(epochs=1))


# -- evaluation ------------------------------------------------------------


class _Fixed:
    """Stand-in model whose logits are given up front."""

    def __init__(self, logits):
        self.logits = logits


def _eval_with_logits(monkeypatch, logits, labels, C):
    import kdlab.train as train

    monkeypatch.setattr(train, "predict_logits", lambda model, images: logits)
    ds = LabeledDataset(np.zeros((len(labels), 1)), np.asarray(labels), C)
    return evaluate(_Fixed(logits), ds)


def test_evaluate_oracle_and_constant(monkeypatch):
    labels = np.array([0, 1, 2, 2, 1])
    overall, per = _eval_with_logits(monkeypatch, np.eye(3)[labels], labels, 3)
    assert overall == 1.0 and np.all(per == 1.0)
    overall, per = _eval_with_logits(monkeypatch, np.tile([0.0, 0.0, 1.0], (5, 1)), labels, 3)
    np.testing.assert_array_equal(per, [0, 0, 1])
    assert overall == pytest.approx(2 / 5)


def test_evaluate_ties_go_to_lowest_class(monkeypatch):
    overall, per = _eval_with_logits(monkeypatch, np.ones((2, 3)), np.array([0, 1]), 3)
    np.testing.assert_array_equal(per[:2], [1, 0])
    assert np.isnan(per[2])


def test_overall_is_count_weighted_mean():
    ds = three_blobs()
    ckpt, _ = train_teacher(ModelSpec((Dense(2, 3), Output(3)), (2,)), ds, TrainConfig(epochs=2))
    overall, per = evaluate(ckpt, ds)
    counts = ds.class_counts()
    assert overall == pytest.approx(float((counts * per).sum() / counts.sum()), abs=1e-12)


# -- checkpoints -----------------------------------------------------------


def _trained(tmp_path=None):
    ds = three_blobs()
    from kdlab.nn import BatchNorm, ReLU

    spec = ModelSpec((Dense(2, 4), BatchNorm(4), ReLU(), Dense(4, 3), Output(3)), (2,))
    return train_teacher(spec, ds, TrainConfig(epochs=3, batch_size=10))[0], ds


def test_checkpoint_round_trip(tmp_path):
    ckpt, ds = _trained()
    path = save_checkpoint(tmp_path / "t.kdlb", ckpt)
    back = load_checkpoint(path)
    assert back.blob() == ckpt.blob()
    assert back.spec == ckpt.spec and back.provenance == ckpt.provenance
    assert back.id == ckpt.id
    a, pa = evaluate(ckpt, ds)
    b, pb = evaluate(back, ds)
    assert a == b and np.array_equal(pa, pb)
    assert (tmp_path / "t.kdlb").read_bytes()[:4] == b"KDLB"


def test_checkpoint_errors(tmp_path):
    ckpt, _ = _trained()
    raw = save_checkpoint(tmp_path / "t.kdlb", ckpt).read_bytes()
    (tmp_path / "magic.kdlb").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "magic.kdlb")
    (tmp_path / "ver.kdlb").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(tmp_path / "ver.kdlb")
    (tmp_path / "short.kdlb").write_bytes(raw[:-4])
    with pytest.raises(LengthMismatchError):
        load_checkpoint(tmp_path / "short.kdlb")


# -- soft labels and distillation -----------------------------------------


def test_soft_labels():
    ckpt, ds = _trained()
    ts = full_transfer_set(ds)
    for T in (3, 6, 9, 12, 15, 20):
        soft = generate_soft_labels(ckpt, ts, T)
        assert np.all(np.abs(soft.probs.sum(axis=1) - 1) < 1e-5)
        assert len(soft) == len(ts)
    before = ckpt.blob()
    a = generate_soft_labels(ckpt, ts, 9.0)
    b = generate_soft_labels(ckpt, ts, 9.0)
    assert np.array_equal(a.probs, b.probs) and ckpt.blob() == before
    assert ckpt.model.stats[1]["mean"].tobytes() == load_bytes(ckpt)
    hot = generate_soft_labels(ckpt, ts, 1e6)
    assert np.abs(hot.probs - 1 / 3).max() < 1e-3
    assert a.teacher_id == ckpt.id
    with pytest.raises(ValueError):
        generate_soft_labels(ckpt, ts, 0)


def load_bytes(ckpt):
    return ckpt.model.stats[1]["mean"].tobytes()


def test_soft_label_csv_round_trip(tmp_path):
    ckpt, ds = _trained()
    soft = generate_soft_labels(ckpt, full_transfer_set(ds), 9.0)
    soft.to_csv(tmp_path / "s.csv")
    head = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert head == "index,label,p_0,p_1,p_2,T"
    back = SoftLabelMatrix.from_csv(tmp_path / "s.csv")
    assert np.array_equal(back.probs, soft.probs) and back.T == 9.0
    assert np.array_equal(back.indices, soft.indices) and np.array_equal(back.labels, soft.labels)


def test_distill_alpha_zero_matches_supervised_training():
    ds = three_blobs()
    spec = ModelSpec((Dense(2, 6), Dense(6, 3), Output(3)), (2,))
    teacher, _ = train_teacher(spec, ds, TrainConfig(epochs=2, seed=5))
    ts = full_transfer_set(ds)
    cfg = TrainConfig(epochs=4, batch_size=9, seed=7)
    soft = generate_soft_labels(teacher, ts, 9.0)
    student, hs = distill_student(spec, ts, soft, DistillConfig(alpha_kd=0.0, T=9.0, train=cfg))
    plain, hp = train_teacher(spec, ds, cfg)
    assert student.blob() == plain.blob()
    assert [h["loss"] for h in hs] == [h["loss"] for h in hp]


def test_self_distillation_is_stationary_under_sgd():
    ds = three_blobs()
    spec = ModelSpec((Dense(2, 3), Output(3)), (2,))
    cfg = TrainConfig(epochs=2, optimizer="sgd_momentum", lr=0.5, seed=2)
    init = init_params(spec, SeededRng(derive_seed(cfg.seed, "init")))
    ts = full_transfer_set(ds)
    probs = softmax_t(predict_logits(init, ds.images).astype(np.float64), 4.0)
    soft = SoftLabelMatrix(probs, 4.0, ds.labels.copy(), ts.indices.copy())
    student, _ = distill_student(spec, ts, soft, DistillConfig(alpha_kd=1.0, T=4.0, train=cfg))
    np.testing.assert_allclose(student.model.flat_params(), init.flat_params(), atol=1e-6)


def test_student_of_perfect_teacher_matches_it():
    ds = separable(n=200)
    teacher, _ = train_teacher(LINEAR, ds, TrainConfig(epochs=100, batch_size=16, lr=0.01))
    t_acc = evaluate(teacher, ds)[0]
    ts = full_transfer_set(ds)
    soft = generate_soft_labels(teacher, ts, 2.0)
    student, _ = distill_student(LINEAR, ts, soft, DistillConfig(T=2.0, train=TrainConfig(epochs=100, lr=0.01,
                                                                                          batch_size=16)))
    assert abs(evaluate(student, ds)[0] - t_acc) <= 0.02


def test_distill_guards():
    ckpt, ds = _trained()
    ts = full_transfer_set(ds)
    soft = generate_soft_labels(ckpt, ts, 6.0)
    with pytest.raises(ValueError, match="T="):
        distill_student(ckpt.spec, ts, soft, DistillConfig(T=9.0))
    other = TransferSet(ds, ts.indices[:-1])
    with pytest.raises(ValueError, match="transfer set"):
        distill_student(ckpt.spec, other, soft, DistillConfig(T=6.0))


def test_missing_class_student_still_scored_on_that_class():
    ds = three_blobs()
    spec = ModelSpec((Dense(2, 3), Output(3)), (2,))
    teacher, _ = train_teacher(spec, ds, TrainConfig(epochs=5))
    ts = full_transfer_set(remove_class(ds, 2))
    assert not np.any(ts.labels == 2)
    soft = generate_soft_labels(teacher, ts, 9.0)
    student, _ = distill_student(spec, ts, soft, DistillConfig(train=TrainConfig(epochs=3)))
    per = evaluate(student, ds)[1]
    assert np.isfinite(per[2])


def test_checkpoint_dataclass_defaults():
    ckpt = Checkpoint(init_params(LINEAR, SeededRng(0)))
    assert ckpt.header()["param_count"] == 6 and len(ckpt.blob()) == 24
