"""Alternating adversarial training and checkpointing.

One iteration is a discriminator phase followed by a generator phase. The
discriminator phase updates D (ascending the domain loss) and the task
network (descending the task loss) while treating generated pixels as
constants; the generator phase updates G against the frozen D and T. Phase
isolation is enforced by routing: backward() only deposits gradients into
the parameter set a phase owns, so a frozen network cannot move even by a
bug in the loss wiring.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .autodiff import Tape, Tensor, backward
from .data import BatchStream, sample_noise
from .formats import read_checkpoint, write_checkpoint
from .grids import assemble_grid, write_grid
from .losses import LossWeights, combined_objective
from .models import ModelBundle
from .nn_ops import EVAL, TRAIN, softmax_cross_entropy
from .optim import Adam, lr_schedule


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; the last checkpoint survives."""

    def __init__(self, message, step, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    total_steps: int
    base_learning_rate: float = 1e-3
    decay_factor: float = 0.95
    decay_interval: int = 20000
    batch_size: int = 32
    weight_decay: float = 1e-5
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    metrics_interval: int = 100
    checkpoint_interval: int = 2000
    grid_interval: int = 0
    debug_checks: bool = False
    profile: str = ""

    def validate(self):
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.metrics_interval < 1 or self.checkpoint_interval < 1:
            raise ValueError("metrics and checkpoint intervals must be >= 1")
        if self.grid_interval < 0:
            raise ValueError(f"grid_interval must be >= 0, got {self.grid_interval}")
        lr_schedule(self.base_learning_rate, 0, self.decay_factor, self.decay_interval)
        self.loss_weights.validate()
        return self


@dataclass
class TrainingData:
    source_train: "Dataset"
    target_train: "Dataset"
    labeled_target: "Dataset | None" = None


@dataclass
class TrainResult:
    models: ModelBundle
    step: int
    records: list
    checkpoint_path: Path | None = None


def _snapshot(net):
    return {k: v.value.data.copy() for k, v in net.params.items()}


def _assert_unchanged(net, snap, phase):
    for k, v in net.params.items():
        if not np.array_equal(snap[k], v.value.data):
            raise AssertionError(f"{phase} modified frozen parameter {net.name}/{k}")


class Trainer:
    """Owns the three networks, their optimizers, and the phase logic."""

    def __init__(self, config, models):
        self.config = config.validate()
        self.models = models
        wd = config.weight_decay
        self.opt_g = Adam(models.generator.parameters(), weight_decay=wd)
        self.opt_d = Adam(models.discriminator.parameters(), weight_decay=wd)
        self.opt_t = Adam(models.classifier.parameters(), weight_decay=wd)
        noise_seed, reg_seed = _trainer_seeds(config.seed)
        self.noise_rng = np.random.default_rng(noise_seed)
        self.reg_rng = np.random.default_rng(reg_seed)
        self.step_index = 0

    @property
    def learning_rate(self):
        c = self.config
        return lr_schedule(c.base_learning_rate, self.step_index, c.decay_factor,
                           c.decay_interval)

    def _noise_for(self, count):
        dim = self.models.generator.config.noise_dim
        return Tensor(sample_noise(count, dim, self.noise_rng))

    def d_step(self, batch_source, batch_target, batch_labeled_target=None):
        """Update D and T on one source/target batch pair.

        Generated pixels enter as constants: the generator runs outside the
        tape, so nothing can flow back into it. Returns the scalar records
        for this phase.
        """
        g, d, t = self.models.generator, self.models.discriminator, self.models.classifier
        w = self.config.loss_weights
        lr = self.learning_rate
        records = {}

        xs = Tensor(batch_source.images)
        z = self._noise_for(len(batch_source))
        x_fake = g.forward(xs, z, TRAIN)  # off-tape: already detached

        snap = _snapshot(g) if self.config.debug_checks else None

        d.zero_grads()
        t.zero_grads()
        with Tape() as tape:
            domain = task = None
            if w.domain_weight > 0:
                d_real = d.forward(Tensor(batch_target.images), TRAIN, self.reg_rng)
                d_fake = d.forward(x_fake, TRAIN, self.reg_rng)
                domain = losses.domain_loss(d_real, d_fake)
                records["d/domain"] = domain.item()
            if w.task_weight > 0:
                task = self._task_term(t, xs, x_fake, batch_source, w)
                if batch_labeled_target is not None:
                    extra = self._labeled_target_term(t, batch_labeled_target, w)
                    records["d/task_labeled_target"] = extra.item()
                    task = task + extra
                records["d/task"] = task.item()
            total = combined_objective(w, losses.D_STEP, domain=domain, task=task)
            if total is not None:
                records["d/total"] = total.item()
                backward(tape, total, parameters=d.parameters() + t.parameters())
        self.opt_d.step(lr)
        self.opt_t.step(lr)

        if snap is not None:
            _assert_unchanged(g, snap, "d_step")
        return records

    def _task_term(self, t, xs, x_fake, batch_source, w):
        if batch_source.onehot is None:
            raise ValueError("task loss needs a labeled source batch")
        onehot = Tensor(batch_source.onehot)
        src_out = fake_out = None
        if w.train_t_on_source:
            src_out = t.forward(xs, t.SOURCE, TRAIN, self.reg_rng)
        if w.train_t_on_adapted:
            fake_out = t.forward(x_fake, t.ADAPTED, TRAIN, self.reg_rng)
        quats = {}
        if w.pose_weight > 0:
            if batch_source.poses is None:
                raise ValueError("pose_weight > 0 but the source batch has no poses")
            quats = dict(
                source_quat=None if src_out is None else src_out.quaternion,
                adapted_quat=None if fake_out is None else fake_out.quaternion,
                true_quat=Tensor(batch_source.poses),
            )
        return losses.task_loss(
            w,
            onehot,
            source_logits=None if src_out is None else src_out.logits,
            adapted_logits=None if fake_out is None else fake_out.logits,
            **quats,
        )

    def _labeled_target_term(self, t, batch, w):
        # the few labeled target images train the adapted-stream head directly
        out = t.forward(Tensor(batch.images), t.ADAPTED, TRAIN, self.reg_rng)
        term = softmax_cross_entropy(out.logits, Tensor(batch.onehot))
        if w.pose_weight > 0 and batch.poses is not None:
            term = term + w.pose_weight * losses.pose_term(
                out.quaternion, Tensor(batch.poses)
            )
        return term

    def g_step(self, batch_source):
        """Update G against frozen D and T on a fresh noise draw."""
        g, d, t = self.models.generator, self.models.discriminator, self.models.classifier
        w = self.config.loss_weights
        lr = self.learning_rate
        records = {}

        snap_d = _snapshot(d) if self.config.debug_checks else None
        snap_t = _snapshot(t) if self.config.debug_checks else None

        xs = Tensor(batch_source.images)
        z = self._noise_for(len(batch_source))

        g.zero_grads()
        with Tape() as tape:
            x_fake = g.forward(xs, z, TRAIN)
            adv = task = content = None
            if w.generator_adversarial_weight > 0:
                d_fake = d.forward(x_fake, TRAIN, self.reg_rng)
                adv = losses.generator_adversarial_loss(
                    d_fake, saturating=w.saturating_generator_loss
                )
                records["g/adversarial"] = adv.item()
            if w.task_weight_in_g_step > 0:
                if batch_source.onehot is None:
                    raise ValueError("task feedback into G needs a labeled source batch")
                out = t.forward(x_fake, t.ADAPTED, TRAIN, self.reg_rng)
                task = softmax_cross_entropy(out.logits, Tensor(batch_source.onehot))
                if w.pose_weight > 0:
                    if batch_source.poses is None:
                        raise ValueError("pose_weight > 0 but the source batch has no poses")
                    task = task + w.pose_weight * losses.pose_term(
                        out.quaternion, Tensor(batch_source.poses)
                    )
                records["g/task"] = task.item()
            if w.content_weight > 0:
                if batch_source.masks is None:
                    raise ValueError("content_weight > 0 but the source batch has no masks")
                content = losses.masked_pmse(xs, x_fake, Tensor(batch_source.masks))
                records["g/content"] = content.item()
            total = combined_objective(
                w, losses.G_STEP, generator_adversarial=adv, task=task, content=content
            )
            if total is not None:
                records["g/total"] = total.item()
                backward(tape, total, parameters=g.parameters())
        self.opt_g.step(lr)

        if snap_d is not None:
            _assert_unchanged(d, snap_d, "g_step")
            _assert_unchanged(t, snap_t, "g_step")
        return records

    # ---- checkpointing ----------------------------------------------------

    def state_tensors(self):
        out = {}
        for prefix, net in (("G", self.models.generator),
                            ("D", self.models.discriminator),
                            ("T", self.models.classifier)):
            for name, arr in net.state_arrays().items():
                out[f"{prefix}/{name}"] = arr
        for prefix, opt in (("G", self.opt_g), ("D", self.opt_d), ("T", self.opt_t)):
            for name, arr in opt.state_arrays().items():
                out[f"opt/{prefix}/{name}"] = arr
        return out

    def _meta(self, streams):
        return {
            "adam_t": {"G": self.opt_g.t, "D": self.opt_d.t, "T": self.opt_t.t},
            "rng": {
                "noise": self.noise_rng.bit_generator.state,
                "reg": self.reg_rng.bit_generator.state,
            },
            "streams": {name: s.state() for name, s in streams.items()},
        }

    def save_checkpoint(self, path, streams=None):
        write_checkpoint(path, self.step_index, self.state_tensors(),
                         self._meta(streams or {}))

    def load_checkpoint(self, path, streams=None):
        step, tensors, meta = read_checkpoint(path)
        expected = self.state_tensors()
        missing = sorted(set(expected) - set(tensors))
        surplus = sorted(set(tensors) - set(expected))
        if missing or surplus:
            raise ValueError(
                f"checkpoint does not match the model: missing {missing[:3]}, "
                f"unexpected {surplus[:3]}"
            )
        for name, arr in tensors.items():
            target = expected[name]
            if target.shape != arr.shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, model "
                    f"expects {target.shape}"
                )
            target[...] = arr
        self.opt_g.t = meta["adam_t"]["G"]
        self.opt_d.t = meta["adam_t"]["D"]
        self.opt_t.t = meta["adam_t"]["T"]
        self.noise_rng.bit_generator.state = meta["rng"]["noise"]
        self.reg_rng.bit_generator.state = meta["rng"]["reg"]
        for name, stream in (streams or {}).items():
            stream.restore(meta["streams"][name])
        self.step_index = step
        return step


def _trainer_seeds(seed):
    ss = np.random.SeedSequence(seed).spawn(2)
    return [int(s.generate_state(1)[0]) for s in ss]


def _stream_seeds(seed):
    ss = np.random.SeedSequence((seed, 1)).spawn(3)
    return [int(s.generate_state(1)[0]) for s in ss]


def run_training(config, models, training_data, out_dir=None, resume_from=None):
    """Drive the alternating loop for config.total_steps iterations.

    Writes metrics, periodic checkpoints, and (image, adapted) preview grids
    under out_dir when given. On a non-finite loss the last periodic
    checkpoint is left in place and DivergenceError carries its path.
    total_steps == 0 returns the untouched initialization.
    """
    trainer = Trainer(config, models)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    s_src, s_tgt, s_lab = _stream_seeds(config.seed)
    streams = {
        "source": BatchStream(training_data.source_train, config.batch_size, s_src),
        "target": BatchStream(training_data.target_train, config.batch_size, s_tgt),
    }
    if training_data.labeled_target is not None:
        streams["labeled_target"] = BatchStream(
            training_data.labeled_target,
            min(config.batch_size, len(training_data.labeled_target)),
            s_lab,
        )

    last_checkpoint = None
    if resume_from is not None:
        trainer.load_checkpoint(resume_from, streams)
        last_checkpoint = Path(resume_from)

    records = []
    metrics_file = None
    if out_dir is not None:
        metrics_file = open(out_dir / "metrics.csv", "a")
        if metrics_file.tell() == 0:
            metrics_file.write("step,name,value\n")

    try:
        while trainer.step_index < config.total_steps:
            batch_source = streams["source"].next_batch()
            batch_target = streams["target"].next_batch()
            batch_labeled = (
                streams["labeled_target"].next_batch()
                if "labeled_target" in streams
                else None
            )
            try:
                rec = trainer.d_step(batch_source, batch_target, batch_labeled)
                batch_source_g = streams["source"].next_batch()
                rec.update(trainer.g_step(batch_source_g))
            except FloatingPointError as exc:
                raise DivergenceError(
                    f"non-finite value at step {trainer.step_index + 1}: {exc}",
                    trainer.step_index + 1,
                    last_checkpoint,
                ) from exc
            trainer.step_index += 1
            step = trainer.step_index

            bad = [k for k, v in rec.items() if not np.isfinite(v)]
            if bad:
                raise DivergenceError(
                    f"non-finite loss terms {bad} at step {step}", step, last_checkpoint
                )

            if step % config.metrics_interval == 0 or step == config.total_steps:
                rec["lr"] = trainer.learning_rate
                records.append((step, dict(rec)))
                if metrics_file is not None:
                    for name in sorted(rec):
                        metrics_file.write(f"{step},{name},{rec[name]:.9g}\n")
                    metrics_file.flush()

            if out_dir is not None and config.grid_interval and (
                step % config.grid_interval == 0 or step == config.total_steps
            ):
                _write_preview(trainer, batch_source_g, out_dir / f"grid_{step:07d}.ppm")

            if out_dir is not None and (
                step % config.checkpoint_interval == 0 or step == config.total_steps
            ):
                last_checkpoint = out_dir / f"checkpoint_{step:07d}.pxda"
                trainer.save_checkpoint(last_checkpoint, streams)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if out_dir is not None and config.total_steps == 0:
        last_checkpoint = out_dir / "checkpoint_0000000.pxda"
        trainer.save_checkpoint(last_checkpoint, streams)
    return TrainResult(models=models, step=trainer.step_index, records=records,
                       checkpoint_path=last_checkpoint)


def _write_preview(trainer, batch, path, rows_extra=None):
    from .data import denormalize

    count = min(8, len(batch))
    xs = Tensor(batch.images[:count])
    z = Tensor(sample_noise(count, trainer.models.generator.config.noise_dim,
                            np.random.default_rng(0)))
    fake = trainer.models.generator.forward(xs, z, EVAL)
    rows = [denormalize(batch.images[:count].transpose(0, 2, 3, 1)),
            denormalize(fake.data.transpose(0, 2, 3, 1))]
    if rows_extra:
        rows += rows_extra
    write_grid(path, assemble_grid(rows))


def adapt_dataset(generator, dataset, noise_seed=0, batch_size=64):
    """Run every image through the frozen generator (eval mode).

    Labels, poses, and masks carry over; pixels are re-quantized to uint8.
    The z per image comes from `noise_seed`, so the mapping is reproducible.
    """
    from .data import Dataset, coverage_batches, denormalize

    rng = np.random.default_rng(noise_seed)
    chunks = []
    for batch in coverage_batches(dataset, batch_size):
        z = Tensor(sample_noise(len(batch), generator.config.noise_dim, rng))
        fake = generator.forward(Tensor(batch.images), z, EVAL)
        chunks.append(denormalize(fake.data.transpose(0, 2, 3, 1)))
    images = np.concatenate(chunks)
    return Dataset(
        split=f"{dataset.split}-adapted",
        domain="target",
        images=images,
        labeled=dataset.labeled,
        class_count=dataset.class_count,
        _labels=None if not dataset.labeled else dataset.labels.copy(),
        poses=None if dataset.poses is None else dataset.poses.copy(),
        masks=None if dataset.masks is None else dataset.masks.copy(),
    )


def train_classifier(classifier, dataset, config, stream="source", pose_weight=0.0):
    """Plain supervised training of a task classifier on one stream.

    Used for source-only baselines and for re-training T on frozen-generator
    output. Reuses the trainer's Adam/decay settings; returns the loss
    records.
    """
    config.validate()
    opt = Adam(classifier.parameters(), weight_decay=config.weight_decay)
    seeds = _stream_seeds(config.seed)
    stream_batches = BatchStream(dataset, config.batch_size, seeds[0])
    reg_rng = np.random.default_rng(_trainer_seeds(config.seed)[1])
    records = []
    for step in range(config.total_steps):
        batch = stream_batches.next_batch()
        classifier.zero_grads()
        try:
            with Tape() as tape:
                out = classifier.forward(Tensor(batch.images), stream, TRAIN, reg_rng)
                loss = softmax_cross_entropy(out.logits, Tensor(batch.onehot))
                if pose_weight > 0:
                    if batch.poses is None:
                        raise ValueError("pose_weight > 0 but the dataset has no poses")
                    loss = loss + pose_weight * losses.pose_term(
                        out.quaternion, Tensor(batch.poses)
                    )
                backward(tape, loss, parameters=classifier.parameters())
        except FloatingPointError as exc:
            raise DivergenceError(
                f"non-finite value at step {step + 1}: {exc}", step + 1
            ) from exc
        lr = lr_schedule(config.base_learning_rate, step, config.decay_factor,
                         config.decay_interval)
        opt.step(lr)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step + 1}", step + 1)
        if (step + 1) % config.metrics_interval == 0:
            records.append((step + 1, {"loss": value}))
    return records
