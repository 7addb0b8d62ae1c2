import hashlib

import numpy as np
import pytest

from xmic import kernels
from xmic.adapters import compose, read_checkpoint
from xmic.encoders import SyntheticSpec, synth_cross_domain, synth_generate
from xmic.errors import BadLabelError, BadShapeError, BadSpecError, MissingLabelError
from xmic.eval import predict, top1_accuracy
from xmic.tensor import Tensor, backward
from xmic.training import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    batch_loss,
    build_model,
    make_clips,
    train_run,
    train_step,
)


def cfg(**kw):
    base = dict(lr=1e-3, epochs=1, batch_size=16, seed=0)
    base.update(kw)
    return TrainConfig(**base).validate()


# ---------------------------------------------------------------- config

def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lr, c.betas, c.weight_decay, c.epochs, c.frames, c.temperature) == (1e-6, (0.9, 0.999), 0.01, 15, 16, 0.01)
    for bad in (dict(lr=0), dict(temperature=-1), dict(betas=(0.999, 0.9)), dict(betas=(0.0, 0.5)),
                dict(task="both"), dict(norm="n5"), dict(dtype="float16")):
        with pytest.raises((BadSpecError, ValueError)):
            TrainConfig(**bad).validate()
    with pytest.raises(BadSpecError):
        TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})
    assert TrainConfig.from_dict(TrainConfig(lr=0.5).to_dict()) == TrainConfig(lr=0.5)


# ---------------------------------------------------------------- adamw

def test_adamw_zero_grad_is_pure_decay(rng):
    w0 = rng.normal(size=(4, 3))
    p = {"w": Tensor(w0.copy())}
    c = cfg(lr=0.1, weight_decay=0.01)
    adamw_step(p, {"w": np.zeros((4, 3))}, OptimizerState(), c)
    np.testing.assert_allclose(p["w"].data, w0 * (1 - 0.1 * 0.01), rtol=1e-15, atol=0)
    adamw_step(p, {}, OptimizerState(), c)  # missing gradient also counts as zero
    np.testing.assert_allclose(p["w"].data, w0 * (1 - 0.1 * 0.01) ** 2, rtol=1e-14)


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_adamw_first_step_is_signed_lr(g):
    p = {"w": Tensor(np.array([0.7]))}
    adamw_step(p, {"w": np.array([g])}, OptimizerState(), cfg(lr=0.01, weight_decay=0.0))
    np.testing.assert_allclose(p["w"].data, 0.7 - 0.01 * np.sign(g), atol=1e-6)


def test_adamw_two_steps_on_quadratic_match_scalar_recurrence():
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01
    w, m, v = 1.5, 0.0, 0.0
    p = {"w": Tensor(np.array([1.5]))}
    st = OptimizerState()
    c = cfg(lr=lr, weight_decay=wd)
    for t in (1, 2):
        g = 2 * (w - 0.3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * ((m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps) + wd * w)
        adamw_step(p, {"w": np.array([2 * (p["w"].data[0] - 0.3)])}, st, c)
        assert p["w"].data[0] == pytest.approx(w, rel=1e-14)
    assert st.t == 2


def test_adamw_lr_zero_identity_and_shape_check(rng):
    w0 = rng.normal(size=5)
    p = {"w": Tensor(w0.copy())}
    c = cfg()
    c.lr = 0.0
    adamw_step(p, {"w": rng.normal(size=5)}, OptimizerState(), c)
    np.testing.assert_array_equal(p["w"].data, w0)
    with pytest.raises(BadShapeError):
        adamw_step(p, {"w": np.ones(4)}, OptimizerState(), cfg())


@pytest.mark.parametrize("name", sorted(kernels.backends()))
def test_adamw_backends_agree(name, rng):
    impl = kernels.backends()[name]
    ref = kernels.backends()["python"]
    args = [rng.normal(size=50) for _ in range(2)] + [np.zeros(50), np.zeros(50)]
    other = [a.copy() for a in args]
    for step in (1, 2, 3):
        impl.adamw_update(*args, 1e-2, 0.9, 0.999, 1e-8, 0.01, step)
        ref.adamw_update(*other, 1e-2, 0.9, 0.999, 1e-8, 0.01, step)
    np.testing.assert_allclose(args[0], other[0], rtol=1e-12)


# ---------------------------------------------------------------- train_step

@pytest.fixture(scope="module")
def shift_task():
    b = synth_cross_domain(SyntheticSpec(visual_shift=4.0, clips_per_class=20))
    cls = b["train"].classifier
    return b, cls, make_clips(b["train"].records, cls, "noun"), make_clips(b["test"].records, cls, "noun")


def zero_shot_ce(clips, cls, temperature):
    ev = np.stack([(c.v.full / np.linalg.norm(c.v.full, axis=1, keepdims=True)).mean(0) for c in clips])
    ev /= np.linalg.norm(ev, axis=1, keepdims=True)
    logits = ev @ cls.matrix.T / temperature
    z = logits - logits.max(1, keepdims=True)
    lse = np.log(np.exp(z).sum(1))
    return float(np.mean(lse - z[np.arange(len(clips)), [c.label for c in clips]]))


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_first_step_loss_is_zero_shot_cross_entropy(dtype, shift_task):
    _, cls, train, _ = shift_task
    c = cfg(dtype=dtype, frames=16)
    model = build_model(cls, c)
    batch = train[:16]
    loss = train_step(batch, model, c, OptimizerState(), np.random.default_rng(0))
    assert loss == pytest.approx(zero_shot_ce(batch, cls, c.temperature), abs=1e-5, rel=1e-5)


def digest(tensors):
    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(tensors[k].data).tobytes())
    return h.hexdigest()


@pytest.mark.parametrize("strategy", ["xmic", "early-uni,xmic", "early-cross,xmic,Tt,Vv"])
def test_frozen_contract(strategy, shift_task):
    _, cls, train, _ = shift_task
    c = cfg(strategy=strategy, batch_size=8)
    model = build_model(cls, c)
    frozen = digest(model.frozen_tensors())
    before = {k: t.data.copy() for k, t in model.named_parameters().items()}
    st, rng = OptimizerState(), np.random.default_rng(0)
    for i in range(3):
        train_step(train[i * 8:(i + 1) * 8], model, c, st, rng)
    assert digest(model.frozen_tensors()) == frozen
    changed = [k for k, t in model.named_parameters().items() if not np.array_equal(t.data, before[k])]
    assert changed


def test_missing_or_unknown_label(shift_task):
    b, cls, _, _ = shift_task
    rec = b["train"].records[0]
    rec2 = type(rec)(rec.id, rec.full, rec.hand, "", "", rec.dataset)
    with pytest.raises(MissingLabelError):
        make_clips([rec2], cls, "noun")
    rec3 = type(rec)(rec.id, rec.full, rec.hand, "unicorn", "", rec.dataset)
    with pytest.raises(BadLabelError):
        make_clips([rec3], cls, "noun")


def test_loss_decreases_over_200_steps(shift_task):
    _, cls, train, _ = shift_task
    c = cfg(batch_size=16)
    model = build_model(cls, c)
    st, rng = OptimizerState(), np.random.default_rng(0)
    order = np.random.default_rng(1)
    losses = []
    for _ in range(200):
        idx = order.choice(len(train), size=16, replace=False)
        losses.append(train_step([train[i] for i in idx], model, c, st, rng))
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0]
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("dtype,tol", [("float64", 1e-5), ("float32", 1e-3)])
def test_step_gradient_matches_finite_differences(dtype, tol):
    spec = SyntheticSpec(C=3, D=8, clips_per_class=1, frames_per_clip=4, visual_shift=1.0, text_scale=2.0)
    ds = synth_generate(spec)
    clips = make_clips(ds.records[:2], ds.classifier, "noun")
    c = cfg(dtype=dtype, frames=4, temperature=0.5, zero_init=False)
    model = build_model(ds.classifier, c)
    rng = np.random.default_rng(3)
    for t in model.named_parameters().values():
        t.data = t.data + (rng.normal(size=t.shape) * 0.2).astype(t.dtype)
    params = model.named_parameters()
    loss = batch_loss(model, clips, c, mode="uniform")
    backward(loss, inputs=list(params.values()))
    analytic = {k: p.grad.astype(np.float64).copy() for k, p in params.items()}

    c64 = cfg(dtype="float64", frames=4, temperature=0.5)
    model64 = build_model(ds.classifier, c64)
    p64 = model64.named_parameters()
    for k in params:
        p64[k].data = params[k].data.astype(np.float64)
    h = 1e-6
    worst = 0.0
    for k, p in p64.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(batch_loss(model64, clips, c64, mode="uniform").data)
            flat[i] = old - h
            down = float(batch_loss(model64, clips, c64, mode="uniform").data)
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-3))
    assert worst < tol, worst


# ---------------------------------------------------------------- train_run

def test_epochs_zero_is_initialization_and_zero_shot(tmp_path, shift_task):
    _, cls, train, test = shift_task
    c = cfg(epochs=0)
    model, metrics = train_run(train, cls, c, {"test": (test, None)}, ckpt_path=tmp_path / "c.ckpt")
    init = build_model(cls, c)
    _, arrays = read_checkpoint(tmp_path / "c.ckpt")
    for k, t in init.named_parameters().items():
        np.testing.assert_array_equal(arrays[k], t.data.astype(np.float32))
    zs = compose(["zero-shot"], cls, np.random.default_rng(0))
    assert metrics[0]["acc_test"] == top1_accuracy(predict(zs, test), [x.label for x in test])


def test_same_seed_identical_logs_and_checkpoints(tmp_path, shift_task):
    _, cls, train, test = shift_task
    for run in ("a", "b"):
        train_run(train, cls, cfg(epochs=2), {"test": (test, None)}, log_path=tmp_path / f"{run}.jsonl",
                  ckpt_path=tmp_path / f"{run}.ckpt")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    train_run(train, cls, cfg(epochs=2, seed=1), ckpt_path=tmp_path / "c.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() != (tmp_path / "a.ckpt").read_bytes()


def test_metrics_log_fields(tmp_path, shift_task):
    _, cls, train, test = shift_task
    _, metrics = train_run(train, cls, cfg(epochs=2), {"test": (test, None)})
    assert [m["epoch"] for m in metrics] == [1, 2]
    assert set(metrics[0]) == {"epoch", "step", "loss", "lr", "acc_test"}


# ---------------------------------------------------------------- joint noun+verb

def verb_classifier(cls):
    """A second vocabulary over the same names in reverse order, with its own rows."""
    from xmic.datastore import ClassVocabulary
    from xmic.encoders import build_text_classifier

    names = cls.vocab.names[::-1]
    raw = np.random.default_rng(9).normal(size=(len(names), cls.dim))
    return build_text_classifier(raw, ClassVocabulary(names, "verb"))


def test_joint_labels_and_initial_loss_is_sum(shift_task):
    b, cls, _, _ = shift_task
    vcls = verb_classifier(cls)
    clips = make_clips(b["train"].records, cls, "noun", joint=(vcls, "verb"))
    C = cls.num_classes
    assert all(c.label2 == C - 1 - c.label for c in clips)
    c = cfg(joint=True, dtype="float64")
    model = build_model(cls, c)
    joint_model = model.with_classifier(vcls)
    batch = clips[:8]
    total = float(batch_loss(model, batch, c, mode="uniform", joint_model=joint_model).data)
    noun = float(batch_loss(model, batch, c, mode="uniform").data)
    verb_clips = [type(x)(x.v, x.v2, x.label2) for x in batch]
    verb = float(batch_loss(joint_model, verb_clips, c, mode="uniform").data)
    assert total == pytest.approx(noun + verb, rel=1e-12)


def test_joint_run_trains_one_adapter(shift_task):
    b, cls, _, _ = shift_task
    vcls = verb_classifier(cls)
    clips = make_clips(b["train"].records, cls, "noun", joint=(vcls, "verb"))
    with pytest.raises(BadSpecError):
        train_run(clips, cls, cfg(joint=True))
    solo, _ = train_run(clips, cls, cfg())
    joint, metrics = train_run(clips, cls, cfg(joint=True), joint_classifier=vcls)
    assert np.isfinite(metrics[-1]["loss"])
    assert set(joint.named_parameters()) == set(solo.named_parameters())
    # the verb loss moves the shared parameters away from the noun-only run
    diff = sum(np.abs(joint.named_parameters()[k].data - solo.named_parameters()[k].data).sum()
               for k in solo.named_parameters())
    assert diff > 0
    unlabeled = make_clips(b["train"].records, cls, "noun")
    with pytest.raises(BadSpecError):
        train_run(unlabeled, cls, cfg(joint=True), joint_classifier=vcls)
