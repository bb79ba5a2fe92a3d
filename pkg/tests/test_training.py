import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eamnet import TrainingDivergedError, ValidationError
from eamnet.dataio import SyntheticShapesSpec, generate_shapes
from eamnet.model import Model, build_backbone, default_blocks, make_variant
from eamnet.training import (
    ArrayDataset,
    EarlyStopping,
    SplitSpec,
    TrainConfig,
    _allocate,
    crossval,
    lr_at_epoch,
    stratified_kfold,
    stratified_split,
    train,
)


class TestSchedule:
    def test_schedule_values(self):
        cfg = TrainConfig()
        assert lr_at_epoch(cfg, 1) == 1e-4
        assert lr_at_epoch(cfg, 2) == 1e-4
        for e in range(3, 60):
            assert abs(lr_at_epoch(cfg, e) - 1e-4 * 0.97 ** (e - 2)) <= 1e-15

    def test_epochs_are_one_based(self):
        with pytest.raises(ValidationError):
            lr_at_epoch(TrainConfig(), 0)

    @pytest.mark.parametrize("kw", [dict(decay_factor=0), dict(patience=0), dict(base_lr=-1), dict(monitor="accuracy"), dict(batch_size=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)


class TestEarlyStopping:
    def test_stops_exactly_patience_after_best(self):
        es = EarlyStopping(3)
        losses = [1.0, 0.8, 0.9, 0.7, 0.75, 0.71, 0.72, 0.1]
        stopped_at = next(e for e, l in enumerate(losses, start=1) if es.update(e, l))
        assert stopped_at == 4 + 3
        assert es.best_epoch == 4

    def test_equal_loss_is_not_improvement(self):
        es = EarlyStopping(1)
        assert not es.update(1, 0.5)
        assert es.update(2, 0.5)

    def test_no_patience_never_stops(self):
        es = EarlyStopping(None)
        assert not any(es.update(e, 1.0) for e in range(1, 100))


def check_partition_proportional(labels, parts, ratios):
    labels = np.asarray(labels)
    allidx = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(allidx, np.arange(len(labels)))
    for c in np.unique(labels):
        n_c = (labels == c).sum()
        for part, r in zip(parts, ratios):
            assert abs((labels[part] == c).sum() - r * n_c) <= 1


class TestSplits:
    def test_allocate_sums(self):
        # 6.5 / 1.5 / 2.0: the tied remainder goes to the first share
        assert _allocate(10, (0.65, 0.15, 0.2)) == [7, 1, 2]
        assert sum(_allocate(7, (0.5, 0.5))) == 7

    @given(st.lists(st.integers(3, 60), min_size=2, max_size=6), st.integers(0, 1000))
    @settings(max_examples=60)
    def test_stratified_split_proportions(self, sizes, seed):
        labels = np.repeat(np.arange(len(sizes)), sizes)
        tr, va, te = stratified_split(labels, SplitSpec((0.65, 0.15, 0.20), True, seed))
        check_partition_proportional(labels, [tr, va, te], (0.65, 0.15, 0.20))

    def test_two_way_split(self):
        labels = np.repeat([0, 1], 10)
        tr, va, te = stratified_split(labels, SplitSpec((0.8, 0.2)))
        assert len(va) == 0 and len(tr) == 16 and len(te) == 4

    def test_unstratified_split_covers_everything(self):
        labels = np.repeat([0, 1, 2], [5, 9, 13])
        parts = stratified_split(labels, SplitSpec((0.65, 0.15, 0.2), False, 3))
        assert sorted(np.concatenate(parts).tolist()) == list(range(27))

    def test_small_class_named(self):
        with pytest.raises(ValidationError, match="class 1"):
            stratified_split(np.array([0, 0, 0, 1, 1]))

    def test_ratios_validated(self):
        with pytest.raises(ValidationError):
            SplitSpec((0.5, 0.6))

    def test_seed_determinism(self):
        labels = np.repeat([0, 1, 2], 20)
        a = stratified_split(labels, SplitSpec(seed=4))
        b = stratified_split(labels, SplitSpec(seed=4))
        c = stratified_split(labels, SplitSpec(seed=5))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], c[0])

    @given(st.lists(st.integers(5, 50), min_size=2, max_size=6), st.integers(0, 1000))
    @settings(max_examples=60)
    def test_kfold_partition(self, sizes, seed):
        labels = np.repeat(np.arange(len(sizes)), sizes)
        folds = stratified_kfold(labels, 5, seed)
        tests = [t for _, t in folds]
        check_partition_proportional(labels, tests, [0.2] * 5)
        for train_idx, test_idx in folds:
            assert not set(train_idx) & set(test_idx)
            assert len(train_idx) + len(test_idx) == len(labels)
        # fold sizes differ by at most one overall
        sizes_ = [len(t) for t in tests]
        assert max(sizes_) - min(sizes_) <= 1

    def test_kfold_rejects_small_class(self):
        with pytest.raises(ValidationError):
            stratified_kfold(np.repeat([0, 1], [10, 3]), 5)


@pytest.fixture(scope="module")
def tiny():
    ds = generate_shapes(SyntheticShapesSpec(("square", "circle"), samples_per_class=24, resolution=16, scale=(0.2, 0.3)))
    graph = build_backbone(default_blocks(1, (4, 8)), 2, (1, 16, 16))
    return ds, graph


def test_early_stopping_restores_best_weights(tiny):
    ds, graph = tiny
    tr, va, _ = stratified_split(ds.y, SplitSpec(seed=1))
    model = Model(graph, seed=0)
    snapshots = {}
    cfg = TrainConfig(base_lr=0.05, max_epochs=40, patience=2, batch_size=8, seed=0)
    _, hist = train(model, ds.subset(tr), ds.subset(va), cfg, on_epoch=lambda r: snapshots.setdefault(r.epoch, model.state()))
    assert hist.stopped_early
    losses = hist.val_loss
    best = int(np.argmin(losses)) + 1
    assert hist.best_epoch == best
    assert len(hist.records) == best + cfg.patience
    for k, v in snapshots[best].items():
        np.testing.assert_array_equal(model.params[k], v)


def test_training_is_deterministic(tiny):
    ds, graph = tiny
    tr, va, _ = stratified_split(ds.y)
    cfg = TrainConfig(base_lr=1e-3, max_epochs=3, seed=2)
    runs = []
    for _ in range(2):
        m = Model(graph, seed=2)
        _, h = train(m, ds.subset(tr), ds.subset(va), cfg)
        runs.append((h.train_loss, m.params["head.weight"]))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_loss_decreases_and_lr_logged(tiny):
    ds, graph = tiny
    cfg = TrainConfig(base_lr=3e-3, max_epochs=6, seed=0, batch_size=8)
    _, h = train(Model(graph), ds, None, cfg)
    assert h.train_loss[-1] < h.train_loss[0]
    assert [r.lr for r in h.records] == [lr_at_epoch(cfg, e) for e in range(1, 7)]
    assert h.best_epoch == 6 and not h.stopped_early
    assert h.secs_per_epoch > 0


def test_frozen_blocks_do_not_move(tiny):
    ds, graph = tiny
    m = Model(graph, seed=0)
    before = m.state()
    train(m, ds, None, TrainConfig(base_lr=1e-2, max_epochs=1, freeze_fraction=0.5))
    np.testing.assert_array_equal(m.params["block_1.conv_1.weight"], before["block_1.conv_1.weight"])
    assert not np.array_equal(m.params["block_2.conv_1.weight"], before["block_2.conv_1.weight"])


def test_divergence_raises(tiny):
    ds, graph = tiny
    bad = ArrayDataset(np.full_like(ds.x, np.nan), ds.y, ds.class_names)
    with pytest.raises(TrainingDivergedError) as exc:
        train(Model(graph), bad, None, TrainConfig(max_epochs=2))
    assert exc.value.epoch == 1


def test_class_count_mismatch(tiny):
    ds, _ = tiny
    g = build_backbone(default_blocks(1, (4, 8)), 3, (1, 16, 16))
    with pytest.raises(ValidationError):
        train(Model(g), ds, None, TrainConfig(max_epochs=1))


def test_dataset_validation():
    with pytest.raises(ValidationError):
        ArrayDataset(np.zeros((3, 1, 4, 4)), np.array([0, 1]), ["a", "b"])


def test_crossval_runs_every_fold(tiny):
    ds, graph = tiny
    seen = []
    rep = crossval(
        lambda f: Model(make_variant(graph, "baseline"), seed=f),
        ds,
        3,
        TrainConfig(base_lr=3e-3, max_epochs=2, seed=0),
        on_fold=lambda f, r, h: seen.append(f),
    )
    assert seen == [1, 2, 3]
    assert len(rep.folds) == 3
    assert rep.mean["accuracy"] == pytest.approx(np.mean([f.accuracy for f in rep.folds]), abs=1e-15)
