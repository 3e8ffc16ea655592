import numpy as np
import pytest

from fedcodec.toytask import ToyModel, ToyTaskSpec, make_toy_task

SMALL = ToyTaskSpec(
    n=12, r=2, layers=2, module_tags=("q", "v"), classes=3,
    clients=4, samples_per_client=10, eval_samples=32,
)


def test_spec_validation():
    with pytest.raises(ValueError, match="classes"):
        ToyTaskSpec(classes=1)
    with pytest.raises(ValueError, match="r <= n"):
        ToyTaskSpec(n=4, r=5)
    with pytest.raises(ValueError, match="layer"):
        ToyTaskSpec(layers=0)
    with pytest.raises(ValueError, match="distinct"):
        ToyTaskSpec(module_tags=("q", "q"))
    with pytest.raises(ValueError, match="clients"):
        ToyTaskSpec(clients=0)
    with pytest.raises(ValueError, match="correction_scale"):
        ToyTaskSpec(correction_scale=0.0)


def test_spec_slots_forward_order():
    assert SMALL.slots == ((0, "q"), (0, "v"), (1, "q"), (1, "v"))
    assert SMALL.train_samples == 40


def test_make_toy_task_deterministic():
    t1 = make_toy_task(SMALL, seed=3)
    t2 = make_toy_task(SMALL, seed=3)
    np.testing.assert_array_equal(t1.eval_x, t2.eval_x)
    np.testing.assert_array_equal(t1.shards[0][0], t2.shards[0][0])
    for slot in SMALL.slots:
        np.testing.assert_array_equal(t1.base[slot], t2.base[slot])
    t3 = make_toy_task(SMALL, seed=4)
    assert not np.array_equal(t1.eval_x, t3.eval_x)


def test_task_shapes_and_shard_partition():
    task = make_toy_task(SMALL, seed=1)
    assert len(task.shards) == SMALL.clients
    for x, y in task.shards:
        assert x.shape == (SMALL.samples_per_client, SMALL.n)
        assert y.shape == (SMALL.samples_per_client,)
        assert y.dtype == np.int64
        assert set(np.unique(y)) <= set(range(SMALL.classes))
    assert task.eval_x.shape == (SMALL.eval_samples, SMALL.n)
    assert task.head.shape == (SMALL.n, SMALL.classes)
    for slot in SMALL.slots:
        assert task.base[slot].shape == (SMALL.n, SMALL.n)
        assert np.linalg.matrix_rank(task.corrections[slot]) <= SMALL.r


def test_labels_come_from_teacher_with_margin():
    task = make_toy_task(SMALL, seed=2)
    teacher = ToyModel(task)
    # plant the exact corrections as adapters: W - A @ B == base + corr
    for slot in SMALL.slots:
        u, s, vt = np.linalg.svd(task.corrections[slot])
        k = SMALL.r
        teacher.adapters[slot] = [-u[:, :k] * s[:k], vt[:k]]
        np.testing.assert_allclose(
            teacher.effective(slot), task.base[slot] + task.corrections[slot],
            rtol=0, atol=1e-12,
        )
    assert teacher.accuracy(task.eval_x, task.eval_y) == 1.0
    logits = teacher.logits(task.eval_x)
    top2 = np.partition(logits, -2, axis=1)
    assert np.all(top2[:, -1] - top2[:, -2] > SMALL.label_margin)


def test_base_model_has_headroom():
    # at n=12 the default tiny corrections are below the label margin, so
    # plant larger ones to make the base model measurably wrong
    spec = ToyTaskSpec(
        n=12, r=2, layers=2, module_tags=("q", "v"), classes=3,
        clients=4, samples_per_client=10, eval_samples=32, correction_scale=0.3,
    )
    task = make_toy_task(spec, seed=5)
    model = ToyModel(task)
    acc = model.accuracy(task.eval_x, task.eval_y)
    assert acc < 1.0  # the planted corrections matter


def test_zero_adapters_and_init():
    task = make_toy_task(SMALL, seed=6)
    model = ToyModel(task)
    x = task.eval_x[:8]
    base_logits = model.logits(x)
    model.init_adapters(np.random.default_rng(0), a_scale=0.05)
    for slot in SMALL.slots:
        a, b = model.adapters[slot]
        assert np.any(a != 0.0)
        np.testing.assert_array_equal(b, 0.0)
    # B = 0 keeps the product zero: logits unchanged by initialization
    np.testing.assert_array_equal(model.logits(x), base_logits)


def test_loss_and_grads_match_finite_differences():
    task = make_toy_task(SMALL, seed=7)
    model = ToyModel(task)
    rng = np.random.default_rng(8)
    for slot in SMALL.slots:
        model.adapters[slot] = [
            rng.normal(0.0, 0.1, (SMALL.n, SMALL.r)),
            rng.normal(0.0, 0.1, (SMALL.r, SMALL.n)),
        ]
    x, y = task.shards[0]
    loss, grads = model.loss_and_grads(x, y)
    assert loss == pytest.approx(model.loss(x, y), rel=1e-12)
    eps = 1e-6
    for slot in (SMALL.slots[0], SMALL.slots[-1]):
        for part in (0, 1):
            g = grads[slot][part]
            for idx in [(0, 0), (1, 1), (g.shape[0] - 1, g.shape[1] - 1)]:
                orig = model.adapters[slot][part][idx]
                model.adapters[slot][part][idx] = orig + eps
                up = model.loss(x, y)
                model.adapters[slot][part][idx] = orig - eps
                dn = model.loss(x, y)
                model.adapters[slot][part][idx] = orig
                fd = (up - dn) / (2 * eps)
                assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_base_grads_match_finite_differences():
    task = make_toy_task(SMALL, seed=9)
    model = ToyModel(task)
    x, y = task.shards[1]
    _, _, gbase = model.loss_and_grads(x, y, base_grads=True)
    eps = 1e-6
    slot = SMALL.slots[1]
    for idx in [(0, 0), (3, 7)]:
        orig = model.base[slot][idx]
        model.base[slot][idx] = orig + eps
        up = model.loss(x, y)
        model.base[slot][idx] = orig - eps
        dn = model.loss(x, y)
        model.base[slot][idx] = orig
        fd = (up - dn) / (2 * eps)
        assert gbase[slot][idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_sgd_adapters_descends():
    task = make_toy_task(SMALL, seed=10)
    model = ToyModel(task)
    model.init_adapters(np.random.default_rng(1))
    x, y = task.shards[0]
    before = model.loss(x, y)
    for _ in range(20):
        _, grads = model.loss_and_grads(x, y)
        model.sgd_adapters(grads, lr=0.5)
    assert model.loss(x, y) < before


def test_adapter_grads_as_lora_copies():
    task = make_toy_task(SMALL, seed=11)
    model = ToyModel(task)
    model.init_adapters(np.random.default_rng(2))
    packaged = model.adapter_grads_as_lora(epoch=3)
    assert set(packaged) == set(SMALL.slots)
    slot = SMALL.slots[0]
    g = packaged[slot]
    assert (g.layer, g.module_tag, g.epoch) == (slot[0], slot[1], 3)
    np.testing.assert_array_equal(g.a, model.adapters[slot][0])
    g.a[0, 0] += 1.0  # mutating the package must not touch the model
    assert g.a[0, 0] != model.adapters[slot][0][0, 0]


def test_fold_update_moves_base():
    task = make_toy_task(SMALL, seed=12)
    model = ToyModel(task)
    slot = SMALL.slots[0]
    g = np.ones((SMALL.n, SMALL.n))
    before = model.base[slot].copy()
    model.fold_update({slot: g}, lr=0.25)
    np.testing.assert_allclose(model.base[slot], before - 0.25, rtol=1e-15)
    with pytest.raises(ValueError, match="mismatch"):
        model.fold_update({slot: np.ones((2, 2))}, lr=0.1)


def test_loss_and_grads_rejects_bad_batches():
    task = make_toy_task(SMALL, seed=13)
    model = ToyModel(task)
    with pytest.raises(ValueError, match="batch"):
        model.loss_and_grads(np.zeros((0, SMALL.n)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError, match="batch"):
        model.loss_and_grads(np.zeros((3, SMALL.n)), np.zeros(2, dtype=np.int64))
