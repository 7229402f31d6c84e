"""Evaluation protocols: metrics math, neighbor audits, stability plumbing."""

import numpy as np
import pytest

from pixelda.data import Dataset, UnlabeledDataError
from pixelda.evaluation import (
    MetricsReport,
    StabilityReport,
    evaluate,
    nearest_neighbors,
    nn_audit,
    stability_study,
    unseen_class_protocol,
    write_report,
)
from pixelda.models import (
    DiscriminatorConfig,
    GeneratorConfig,
    TaskClassifier,
    TaskClassifierConfig,
    build_models,
)
from pixelda.trainer import DivergenceError, TrainConfig, train_classifier


def rng(seed=0):
    return np.random.default_rng(seed)


def banded_dataset(n=30, classes=3, split="test", seed=0):
    """Trivially separable: every pixel equals label * 100 + 20."""
    labels = rng(seed).integers(0, classes, size=n).astype(np.int64)
    images = np.zeros((n, 8, 8, 1), dtype=np.uint8)
    for i, lab in enumerate(labels):
        images[i] = lab * 100 + 20
    return Dataset(split=split, domain="target", images=images, labeled=True,
                   class_count=classes, _labels=labels)


def small_classifier(seed=0, pose_head=False):
    return TaskClassifier(
        TaskClassifierConfig(8, 8, class_count=3, source_channels=1,
                             adapted_channels=1,
                             private_layers="conv:4,relu,pool:2",
                             shared_layers="flatten,fc:8,relu",
                             pose_head=pose_head),
        seed=seed,
    )


# ---- evaluate -----------------------------------------------------------------

def test_evaluate_reports_perfect_accuracy_when_fit():
    ds = banded_dataset(seed=1)
    clf = small_classifier(seed=2)
    train_classifier(clf, ds, TrainConfig(total_steps=300, batch_size=5, seed=0,
                                          metrics_interval=100))
    report = evaluate(clf, ds, stream="source")
    assert report.accuracy > 95.0
    assert report.sample_count == len(ds)
    assert set(report.per_class_accuracy) <= {0, 1, 2}


def test_evaluate_rejects_unlabeled():
    ds = banded_dataset(seed=3).as_unlabeled()
    with pytest.raises(UnlabeledDataError):
        evaluate(small_classifier(), ds)


def test_evaluate_angle_errors_only_with_pose_head_and_poses():
    ds = banded_dataset(seed=4)
    report = evaluate(small_classifier(seed=5), ds, stream="source")
    assert report.mean_angle_error is None

    q = rng(6).normal(size=(len(ds), 4))
    ds.poses = (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)
    report = evaluate(small_classifier(seed=5, pose_head=True), ds, stream="source")
    assert report.mean_angle_error is not None
    assert 0.0 <= report.median_angle_error <= 180.0


def test_report_lines_render():
    report = MetricsReport(split="t", sample_count=4, accuracy=75.0,
                           per_class_accuracy={0: 50.0, 1: 100.0})
    text = "\n".join(report.lines())
    assert "accuracy: 75.00%" in text
    assert "class 0: 50.00%" in text


def test_write_report(tmp_path):
    report = MetricsReport(split="t", sample_count=1, accuracy=100.0,
                           per_class_accuracy={})
    write_report(tmp_path / "r.txt", report)
    assert "accuracy: 100.00%" in (tmp_path / "r.txt").read_text()


# ---- nearest neighbors ------------------------------------------------------------

def test_nearest_neighbors_matches_brute_force():
    g = rng(7)
    queries = g.normal(size=(20, 12))
    corpus = g.normal(size=(50, 12))
    idx, dists = nearest_neighbors(queries, corpus)
    for i in range(len(queries)):
        want = ((corpus - queries[i]) ** 2).sum(axis=1)
        assert idx[i] == want.argmin()
        assert dists[i] == pytest.approx(want.min(), rel=1e-12)


def test_nearest_neighbors_identity_corpus():
    g = rng(8)
    corpus = g.normal(size=(10, 5))
    idx, dists = nearest_neighbors(corpus, corpus)
    np.testing.assert_array_equal(idx, np.arange(10))
    np.testing.assert_allclose(dists, np.zeros(10), atol=1e-12)


def test_nearest_neighbors_dim_mismatch():
    with pytest.raises(ValueError):
        nearest_neighbors(np.zeros((2, 3)), np.zeros((4, 5)))


def test_nn_audit_copy_generator_has_zero_distance():
    g = rng(9)
    targets = g.integers(0, 256, size=(30, 8, 8, 1), dtype=np.uint8)
    generated = targets[5:15].copy()  # "generator" that copies real targets
    matches, grid = nn_audit(generated, targets, sample_count=10, seed=0)
    assert len(matches) == 10
    for gi, ti, dist in matches:
        assert dist == 0.0
        np.testing.assert_array_equal(generated[gi], targets[ti])
    assert grid.dtype == np.uint8
    assert grid.ndim == 3 and grid.shape[2] == 3


def test_nn_audit_grid_has_three_rows_with_sources():
    g = rng(10)
    targets = g.integers(0, 256, size=(12, 6, 6, 1), dtype=np.uint8)
    generated = g.integers(0, 256, size=(8, 6, 6, 1), dtype=np.uint8)
    sources = g.integers(0, 256, size=(8, 6, 6, 1), dtype=np.uint8)
    _, grid2 = nn_audit(generated, targets, sample_count=4)
    _, grid3 = nn_audit(generated, targets, sample_count=4, sources=sources)
    assert grid3.shape[0] > grid2.shape[0]


def test_nn_audit_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        nn_audit(np.zeros((2, 4, 4, 1), dtype=np.uint8),
                 np.zeros((2, 5, 5, 1), dtype=np.uint8))


def test_nn_audit_deterministic_under_seed():
    g = rng(11)
    targets = g.integers(0, 256, size=(20, 4, 4, 1), dtype=np.uint8)
    generated = g.integers(0, 256, size=(15, 4, 4, 1), dtype=np.uint8)
    a, _ = nn_audit(generated, targets, sample_count=5, seed=3)
    b, _ = nn_audit(generated, targets, sample_count=5, seed=3)
    assert a == b


# ---- stability ----------------------------------------------------------------------

def fake_report(acc):
    return MetricsReport(split="t", sample_count=10, accuracy=acc,
                         per_class_accuracy={})


def test_stability_study_std_math():
    table = {0: 50.0, 1: 60.0, 2: 70.0}
    report = stability_study([0, 1, 2], lambda s: fake_report(table[s]))
    assert report.accuracy_mean == pytest.approx(60.0)
    assert report.accuracy_std == pytest.approx(np.std([50.0, 60.0, 70.0]))
    assert report.diverged == []


def test_stability_study_diverged_runs_tracked():
    def run_one(seed):
        if seed == 1:
            raise DivergenceError("blew up", step=5)
        return fake_report(80.0)

    report = stability_study([0, 1, 2], run_one)
    assert report.diverged == [1]
    assert report.accuracy_std == pytest.approx(0.0)
    assert report.accuracy_std_with_diverged == pytest.approx(
        np.std([80.0, 0.0, 80.0]))


def test_stability_study_rejects_duplicates_and_singletons():
    with pytest.raises(ValueError):
        stability_study([1, 1], lambda s: fake_report(1.0))
    with pytest.raises(ValueError):
        stability_study([1], lambda s: fake_report(1.0))


def test_stability_report_lines():
    report = StabilityReport(seeds=[0, 1], reports={0: fake_report(10.0)},
                             diverged=[1], accuracy_std=0.0,
                             accuracy_std_with_diverged=5.0, accuracy_mean=10.0)
    text = "\n".join(report.lines())
    assert "seed 1: diverged" in text


# ---- unseen-class protocol --------------------------------------------------------------

def build_tiny(seed):
    return build_models(
        GeneratorConfig(8, 8, 1, residual_blocks=1, filters=4, noise_dim=3),
        DiscriminatorConfig(8, 8, 1, base_filters=4),
        TaskClassifierConfig(8, 8, class_count=3, source_channels=1,
                             adapted_channels=1,
                             private_layers="conv:4,relu,pool:2",
                             shared_layers="flatten,fc:8,relu"),
        seed=seed,
    )


def test_unseen_class_protocol_mechanics():
    src = banded_dataset(n=40, split="src-train", seed=12)
    tgt = banded_dataset(n=40, split="tgt-train", seed=13)
    tst = banded_dataset(n=30, split="tgt-test", seed=14)
    cfg = TrainConfig(total_steps=3, batch_size=4, seed=0, metrics_interval=10)
    held, full = unseen_class_protocol(cfg, build_tiny, src, tgt, tst,
                                       held_out=[2], classifier_steps=40)
    assert held.sample_count == int((tst.labels == 2).sum())
    assert full.sample_count == len(tst)
    assert set(held.per_class_accuracy) == {2}


def test_unseen_class_protocol_rejects_bad_holdout():
    src = banded_dataset(n=20, seed=15)
    tgt = banded_dataset(n=20, seed=16)
    tst = banded_dataset(n=20, seed=17)
    cfg = TrainConfig(total_steps=1, batch_size=4, seed=0)
    with pytest.raises(ValueError):
        unseen_class_protocol(cfg, build_tiny, src, tgt, tst, held_out=[])
    with pytest.raises(ValueError):
        unseen_class_protocol(cfg, build_tiny, src, tgt, tst, held_out=[0, 1, 2])
