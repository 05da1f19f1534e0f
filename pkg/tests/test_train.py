import copy

import numpy as np
import pytest

import gradcheck
from ternvpr.config import ModelConfig, SyntheticDatasetConfig, TrainConfig
from ternvpr.errors import DimensionError, NumericError, UsageError
from ternvpr.gate import topk_mask
from ternvpr.model import _LinearCache, dequantized_twin, forward_batch, init_model
from ternvpr.modelio import deserialize_model, serialize_model
from ternvpr.retrieval import ImageSet, gen_synthetic_dataset
from ternvpr.tensor import Prng
from ternvpr.ternary import TernaryTensor
from ternvpr.train import (
    Adam,
    FreezeMask,
    _linear_backward,
    backward,
    default_freeze_mask,
    distill_loss,
    multisim_loss,
    train_distill,
    train_finetune,
    write_loss_curve,
)

SMALL = gradcheck.SMALL_MODEL


@pytest.fixture(scope="module")
def small_data():
    ds = gen_synthetic_dataset(
        SyntheticDatasetConfig(num_places=10, queries_per_place=3, image=SMALL.image, max_shift_px=1), seed=3)
    return ImageSet.concat(ds.references, ds.queries)


# -- gradients -------------------------------------------------------------

@pytest.mark.parametrize("path", sorted(gradcheck.SUBPATHS))
def test_subpath_matches_finite_differences(path):
    errors = [gradcheck.SUBPATHS[path](seed) for seed in range(20)]
    assert max(errors) <= 1e-3


@pytest.mark.parametrize("quantized, s", [(False, 0.0), (True, 0.0), (True, 0.4)])
def test_model_backward_matches_finite_differences(quantized, s):
    assert max(gradcheck.check_model_backward(seed, quantized, s) for seed in range(4)) <= 1e-3


def test_masked_input_gradient_exactly_zero():
    r = np.random.default_rng(0)
    x = r.normal(size=(17, 32))
    w = r.normal(size=(16, 32))
    mask = topk_mask(x, 0.5)
    grads = {}
    dx = _linear_backward(w, r.normal(size=(17, 16)), _LinearCache(x, mask), grads, "l")
    dropped = ~mask.dense()
    assert dropped.sum() == 17 * 16
    assert (dx[dropped] == 0).all()
    assert (dx[~dropped] != 0).all()
    # masked-out activations contribute nothing to the weight gradient either
    x2 = np.where(dropped, 1e3, x)
    grads2 = {}
    _linear_backward(w, np.ones((17, 16)), _LinearCache(x2, mask), grads2, "l")
    _linear_backward(w, np.ones((17, 16)), _LinearCache(x, mask), grads, "l")
    np.testing.assert_array_equal(grads["l.weight"], grads2["l.weight"])


def test_ste_latent_gradient_equals_effective_weight_gradient():
    student = init_model(SMALL, Prng(1))
    twin = dequantized_twin(student)
    images = np.random.default_rng(1).normal(size=(3, *SMALL.image)).astype(np.float32)
    up = np.random.default_rng(2).normal(size=(3, SMALL.tokens, SMALL.dim))
    g_s = backward(student, forward_batch(student, images, 0.0, keep_cache=True, dtype=np.float64)[1], up)
    g_t = backward(twin, forward_batch(twin, images, 0.0, keep_cache=True, dtype=np.float64)[1], up)
    for name in student.latents:
        np.testing.assert_allclose(g_s[name], g_t[name], rtol=1e-9, atol=1e-12)


def test_ste_adam_updates_latents_with_raw_gradient():
    student = init_model(SMALL, Prng(2))
    name = "blocks.0.mlp.fc1.weight"
    before = student.latents[name].astype(np.float64)
    g = np.random.default_rng(0).normal(size=before.shape)
    cfg = TrainConfig(learning_rate=1e-2)
    Adam(student, cfg).step({name: g})
    expected = (before - cfg.learning_rate * g / (np.abs(g) + cfg.adam_eps)).astype(np.float32)
    np.testing.assert_array_equal(student.latents[name], expected)
    assert isinstance(student.params[name], TernaryTensor)
    from ternvpr.ternary import quantize_ternary
    q = quantize_ternary(expected, name=name)
    assert student.params[name].codes == q.codes and student.params[name].gamma == q.gamma


def test_backward_rejects_foreign_cache():
    a = init_model(SMALL, Prng(0))
    b = init_model(SMALL.twin(False).__class__(image=(8, 8, 1), patch=4, dim=8, depth=1, heads=2), Prng(0))
    _, cache = forward_batch(b, np.zeros((1, 8, 8, 1), np.float32), keep_cache=True)
    with pytest.raises(UsageError):
        backward(a, cache, np.zeros((1, 5, 8)))
    with pytest.raises(UsageError):
        backward(a, None, np.zeros((1, 5, 8)))


# -- losses ----------------------------------------------------------------

def test_distill_loss_examples():
    t = np.random.default_rng(0).normal(size=(2, 3))
    assert distill_loss(t, t) == 0.0
    assert distill_loss(t + 2, t) == pytest.approx(4.0, rel=1e-12)
    with pytest.raises(DimensionError):
        distill_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def test_distill_loss_permutation_invariant():
    r = np.random.default_rng(1)
    s, t = r.normal(size=(17, 8)), r.normal(size=(17, 8))
    perm = r.permutation(17)
    assert distill_loss(s[perm], t[perm]) == pytest.approx(distill_loss(s, t), rel=1e-12)


def test_multisim_closed_form():
    # two places, two orthogonal-axis descriptors each: positives S=1, negatives S=-1
    e = np.array([1.0, 0.0])
    x = np.stack([e, e, -e, -e])
    labels = [0, 0, 1, 1]
    alpha, beta = 2.0, 50.0
    expected = np.log(1 + 1) / alpha + np.log1p(2 * np.exp(-2 * beta)) / beta
    assert multisim_loss(x, labels) == pytest.approx(expected, rel=1e-12)


def test_multisim_empty_negatives():
    x = np.array([[0.6, 0.8], [0.6, 0.8]])
    assert multisim_loss(x, [5, 5]) == pytest.approx(np.log(2) / 2, rel=1e-12)


def test_multisim_requires_positive_pair():
    with pytest.raises(UsageError):
        multisim_loss(np.eye(3), [0, 1, 2])


# -- optimizer -------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    model = init_model(SMALL.twin(False), Prng(0))
    before = serialize_model(model)
    Adam(model, TrainConfig()).step({n: np.zeros(np.shape(p)) for n, p in model.params.items()})
    assert serialize_model(model) == before


# -- distillation ----------------------------------------------------------

def test_identical_twin_distills_to_zero(small_data):
    teacher = init_model(SMALL.twin(False), Prng(4))
    student = copy.deepcopy(teacher)
    records = train_distill(student, teacher, small_data, TrainConfig(steps=10, batch_size=4), seed=1)
    assert [r.loss for r in records] == [0.0] * 10


def test_distill_is_deterministic(small_data):
    teacher = init_model(SMALL.twin(False), Prng(5))
    runs = []
    for _ in range(2):
        student = init_model(SMALL, Prng(6))
        recs = train_distill(student, teacher, small_data, TrainConfig(steps=8, batch_size=4), seed=9)
        runs.append(([(r.step, r.sparsity, r.loss) for r in recs], serialize_model(student, True)))
    assert runs[0] == runs[1]


def test_distill_sparsity_follows_schedule(small_data):
    teacher = init_model(SMALL.twin(False), Prng(5))
    student = init_model(SMALL, Prng(6))
    cfg = TrainConfig(steps=20, batch_size=2)
    recs = train_distill(student, teacher, small_data, cfg, seed=2)
    for r in recs:
        assert cfg.s_start <= r.sparsity <= cfg.s_start + (cfg.s_end - cfg.s_start) * r.step / cfg.steps + 1e-12


def test_distill_resume_matches_uninterrupted(small_data):
    teacher = init_model(SMALL.twin(False), Prng(5))
    cfg = TrainConfig(steps=10, batch_size=4)

    full = init_model(SMALL, Prng(6))
    full_recs = train_distill(full, teacher, small_data, cfg, seed=3)

    class Stop(Exception):
        pass

    def stop_at_four(rec):
        if rec.step == 4:
            raise Stop

    part = init_model(SMALL, Prng(6))
    with pytest.raises(Stop):
        train_distill(part, teacher, small_data, cfg, seed=3, callback=stop_at_four)
    resumed = deserialize_model(serialize_model(part, include_state=True))
    rest = train_distill(resumed, teacher, small_data, cfg, seed=3, resume=True)
    assert [r.step for r in rest] == list(range(5, 10))
    assert [r.loss for r in rest] == [r.loss for r in full_recs[5:]]
    assert serialize_model(resumed, True) == serialize_model(full, True)


def test_distill_rejects_mismatched_models(small_data):
    teacher = init_model(ModelConfig(image=(8, 8, 1), patch=4, dim=8, depth=1, heads=2, quantized=False), Prng(0))
    with pytest.raises(UsageError):
        train_distill(init_model(SMALL, Prng(0)), teacher, small_data, TrainConfig(steps=1))
    with pytest.raises(UsageError):
        train_distill(init_model(SMALL, Prng(0)), init_model(SMALL, Prng(1)), small_data, TrainConfig(steps=1))


def test_divergent_learning_rate_raises():
    ds = gen_synthetic_dataset(SyntheticDatasetConfig(num_places=4), seed=0)
    data = ImageSet.concat(ds.references, ds.queries)
    teacher = init_model(ModelConfig(quantized=False), Prng(0))
    student = init_model(ModelConfig(), Prng(1))
    with pytest.raises(NumericError, match="float32 range"):
        train_distill(student, teacher, data, TrainConfig(steps=200, batch_size=4, learning_rate=1e3), seed=0)


def test_adam_overflow_leaves_model_untouched():
    model = init_model(SMALL.twin(False), Prng(0))
    before = serialize_model(model)
    grads = {n: np.full(np.shape(p), 1e30) for n, p in model.params.items()}
    with pytest.raises(NumericError):
        Adam(model, TrainConfig()).step(grads)
    assert serialize_model(model) == before
    assert not model.train_state


def test_loss_curve_format(tmp_path, small_data):
    teacher = init_model(SMALL.twin(False), Prng(5))
    recs = train_distill(init_model(SMALL, Prng(6)), teacher, small_data, TrainConfig(steps=3, batch_size=2))
    path = tmp_path / "curve.csv"
    write_loss_curve(recs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,sparsity,loss"
    assert len(lines) == 4
    step, s, loss = lines[1].split(",")
    assert step == "0" and len(s.split(".")[1]) == 4 and float(loss) == pytest.approx(recs[0].loss, rel=1e-5)


# -- fine-tuning -----------------------------------------------------------

def test_default_freeze_mask_structure():
    model = init_model(ModelConfig(), Prng(0))
    mask = default_freeze_mask(model)
    expected = {"norm.weight", "norm.bias"} | {n for n in model.names() if n.startswith(("blocks.2.", "blocks.3."))}
    assert mask.trainable == expected
    assert len(expected) == 2 + 2 * 12


def test_empty_freeze_mask_rejected(small_data):
    model = init_model(SMALL, Prng(0))
    with pytest.raises(UsageError):
        train_finetune(model, small_data, TrainConfig(steps=1), FreezeMask(frozenset()))
    with pytest.raises(UsageError):
        train_finetune(model, small_data, TrainConfig(steps=1), FreezeMask({"nope"}))


@pytest.mark.parametrize("quantized", [True, False])
def test_finetune_leaves_frozen_tensors_untouched(small_data, quantized):
    model = init_model(SMALL.twin(quantized), Prng(7))
    before = {n: serialize_model(model) for n in ("all",)}["all"]
    original = copy.deepcopy(model.params)
    mask = default_freeze_mask(model)
    cfg = TrainConfig(steps=100, places_per_batch=4, images_per_place=2, sparsity=0.3 if quantized else 0.0)
    train_finetune(model, small_data, cfg, mask, seed=1)
    changed = set()
    for name, p in model.params.items():
        a, b = original[name], p
        same = a.codes == b.codes and a.gamma == b.gamma if isinstance(a, TernaryTensor) else a.tobytes() == b.tobytes()
        if not same:
            changed.add(name)
    assert changed <= mask.trainable
    assert changed, "fine-tuning should move some trainable tensors"
    assert serialize_model(model) != before


def test_finetune_records_fixed_sparsity(small_data):
    model = init_model(SMALL, Prng(7))
    recs = train_finetune(model, small_data, TrainConfig(steps=3, places_per_batch=4, images_per_place=2,
                                                         sparsity=0.25))
    assert all(r.sparsity == 0.25 for r in recs)
