"""Evaluation protocols: metrics, neighbor audits, stability, unseen classes.

Everything here runs networks in eval mode (batch-norm uses running
statistics, regularizers are off) and covers every sample exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import coverage_batches, normalize
from .grids import assemble_grid
from .losses import quaternion_angle
from .nn_ops import EVAL
from .trainer import DivergenceError


@dataclass
class MetricsReport:
    split: str
    sample_count: int
    accuracy: float
    per_class_accuracy: dict
    mean_angle_error: float | None = None
    median_angle_error: float | None = None
    seed: int | None = None

    def lines(self):
        out = [
            f"split: {self.split}",
            f"samples: {self.sample_count}",
            f"accuracy: {self.accuracy:.2f}%",
        ]
        for cls in sorted(self.per_class_accuracy):
            out.append(f"  class {cls}: {self.per_class_accuracy[cls]:.2f}%")
        if self.mean_angle_error is not None:
            out.append(f"mean angle error: {self.mean_angle_error:.3f} deg")
            out.append(f"median angle error: {self.median_angle_error:.3f} deg")
        return out


def evaluate(classifier, dataset, stream="adapted", batch_size=256, seed=None):
    """Accuracy (and pose error when both sides have quaternions) over a split."""
    labels = dataset.labels  # raises on unlabeled splits, by design
    predictions = np.empty(len(dataset), dtype=np.int64)
    angles = [] if (dataset.poses is not None and classifier.pose_head_layer is not None) else None
    cursor = 0
    for batch in coverage_batches(dataset, batch_size):
        out = classifier.forward(Tensor(batch.images), stream, EVAL)
        predictions[cursor : cursor + len(batch)] = out.logits.data.argmax(axis=1)
        if angles is not None:
            angles.append(quaternion_angle(out.quaternion.data, batch.poses))
        cursor += len(batch)

    correct = predictions == labels
    per_class = {}
    for cls in range(dataset.class_count):
        members = labels == cls
        if members.any():
            per_class[cls] = 100.0 * correct[members].mean()
    report = MetricsReport(
        split=dataset.split,
        sample_count=len(dataset),
        accuracy=100.0 * correct.mean(),
        per_class_accuracy=per_class,
        seed=seed,
    )
    if angles is not None:
        allangles = np.concatenate(angles)
        report.mean_angle_error = float(allangles.mean())
        report.median_angle_error = float(np.median(allangles))
    return report


# ---- nearest-neighbor audit ---------------------------------------------------


def nearest_neighbors(queries, corpus):
    """Index of the exact L2-nearest corpus row for every query row.

    Plain float64 squared distances, accumulated the same way a literal
    loop would, so the result is bit-for-bit what brute force gives.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(len(queries), -1)
    c = np.asarray(corpus, dtype=np.float64).reshape(len(corpus), -1)
    if q.shape[1] != c.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != corpus dim {c.shape[1]}")
    out = np.empty(len(q), dtype=np.int64)
    dists = np.empty(len(q), dtype=np.float64)
    for i in range(len(q)):
        d = ((c - q[i]) ** 2).sum(axis=1)
        out[i] = d.argmin()
        dists[i] = d[out[i]]
    return out, dists


def nn_audit(generated, targets, sample_count=8, sources=None, seed=0):
    """Match generated images to their nearest real target neighbors.

    Distances run over normalized pixels. Returns (matches, grid) where
    matches is a list of (generated_index, target_index, distance) for
    `sample_count` sampled rows and grid is a 2- or 3-row uint8 preview
    (source row on top when sources are given).
    """
    if len(generated) == 0 or len(targets) == 0:
        raise ValueError("nn_audit needs non-empty generated and target sets")
    if generated.shape[1:] != targets.shape[1:]:
        raise ValueError(
            f"generated {generated.shape[1:]} and target {targets.shape[1:]} images differ"
        )
    sample_count = min(sample_count, len(generated))
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(generated), size=sample_count, replace=False))
    gnorm = normalize(np.ascontiguousarray(generated[picks]))
    tnorm = normalize(targets)
    idx, dists = nearest_neighbors(gnorm, tnorm)
    matches = [(int(p), int(i), float(d)) for p, i, d in zip(picks, idx, dists)]
    rows = []
    if sources is not None:
        rows.append(sources[picks])
    rows.append(generated[picks])
    rows.append(targets[idx])
    return matches, assemble_grid(rows)


# ---- stability across seeds -----------------------------------------------------


@dataclass
class StabilityReport:
    seeds: list
    reports: dict            # seed -> MetricsReport for runs that finished
    diverged: list           # seeds whose runs blew up
    accuracy_std: float      # over finished runs only
    accuracy_std_with_diverged: float  # diverged runs counted as 0% accuracy
    accuracy_mean: float
    flags: dict = field(default_factory=dict)

    def lines(self):
        out = [f"seeds: {self.seeds}"]
        for seed in self.seeds:
            if seed in self.reports:
                out.append(f"  seed {seed}: {self.reports[seed].accuracy:.2f}%")
            else:
                out.append(f"  seed {seed}: diverged")
        out.append(f"mean accuracy (finished): {self.accuracy_mean:.2f}%")
        out.append(f"accuracy std (finished): {self.accuracy_std:.4f}")
        out.append(
            f"accuracy std (diverged as 0%): {self.accuracy_std_with_diverged:.4f}"
        )
        return out


def stability_study(seeds, run_one, flags=None):
    """Run `run_one(seed) -> MetricsReport` per seed and spread the results.

    Divergent runs are recorded, not fatal: they are excluded from the
    primary population standard deviation and pulled back in at 0% accuracy
    for the pessimistic variant. Duplicate seeds are rejected since they
    would fake agreement.
    """
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds in {seeds}")
    if len(seeds) < 2:
        raise ValueError("stability needs at least 2 seeds")
    reports, diverged = {}, []
    for seed in seeds:
        try:
            reports[seed] = run_one(seed)
        except DivergenceError:
            diverged.append(seed)
    finished = [reports[s].accuracy for s in seeds if s in reports]
    everything = [reports[s].accuracy if s in reports else 0.0 for s in seeds]
    return StabilityReport(
        seeds=seeds,
        reports=reports,
        diverged=diverged,
        accuracy_mean=float(np.mean(finished)) if finished else 0.0,
        accuracy_std=float(np.std(finished)) if len(finished) > 1 else 0.0,
        accuracy_std_with_diverged=float(np.std(everything)),
        flags=dict(flags or {}),
    )


# ---- unseen-class transfer ------------------------------------------------------


def unseen_class_protocol(config, build_models_fn, source_train, target_train,
                          target_test, held_out, classifier_config=None,
                          classifier_steps=None):
    """Train the GAN without some classes, then classify them anyway.

    The generator/discriminator pair trains on source and target sets with
    `held_out` classes removed. The generator is then frozen, the full
    source set is pushed through it, and a fresh classifier trains on those
    adapted images (all classes). Returns (held_out_report, full_report)
    over the untouched target test set.
    """
    from . import trainer as trainer_mod
    from .models import TaskClassifier

    held_out = sorted(set(held_out))
    all_classes = set(range(source_train.class_count))
    if not held_out:
        raise ValueError("held_out must name at least one class")
    if not set(held_out) < all_classes:
        raise ValueError(
            f"held_out {held_out} is not a proper subset of classes {sorted(all_classes)}"
        )
    retained = sorted(all_classes - set(held_out))

    src_kept = source_train.filter_classes(retained)
    tgt_kept = target_train.filter_classes(retained).as_unlabeled()
    models = build_models_fn(config.seed)
    trainer_mod.run_training(
        config, models, trainer_mod.TrainingData(src_kept, tgt_kept)
    )

    adapted = trainer_mod.adapt_dataset(models.generator, source_train,
                                        noise_seed=config.seed)
    fresh = TaskClassifier(
        classifier_config or models.classifier.config, seed=config.seed + 1
    )
    steps = classifier_steps if classifier_steps is not None else config.total_steps
    cls_config = _replace_steps(config, steps)
    trainer_mod.train_classifier(fresh, adapted, cls_config, stream="adapted")

    held_report = evaluate(fresh, target_test.filter_classes(held_out), "adapted")
    full_report = evaluate(fresh, target_test, "adapted")
    return held_report, full_report


def _replace_steps(config, steps):
    from dataclasses import replace

    return replace(config, total_steps=steps)


def write_report(path, report):
    Path(path).write_text("\n".join(report.lines()) + "\n")
