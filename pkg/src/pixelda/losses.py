"""Training objectives and the weighting that routes them into each phase.

The adversarial game is driven by three pieces: a domain loss over the
discriminator's verdicts, a task loss over classifier (and optional pose)
outputs on the source and adapted streams, and a content-similarity penalty
that lets the generator restyle foreground pixels only in ways that preserve
their shading up to a global shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GraphError, Tensor
from .nn_ops import softmax_cross_entropy

# Probabilities are clamped away from {0, 1} before any log.
PROB_EPS = 1e-7
# |q . q_hat| is clamped below 1 so log(1 - |.|) stays finite.
QUAT_DOT_CEILING = 1.0 - 1e-6

D_STEP = "d_step"
G_STEP = "g_step"


@dataclass
class LossWeights:
    """Scalar weights plus the flags that decide which terms are live.

    domain_weight scales the discriminator's objective in its own update;
    generator_adversarial_weight scales the fooling term in the generator
    update (the benchmark presets tune these separately). task_weight applies
    to the classifier update, task_weight_in_g_step to the copy of the task
    loss fed back into the generator. content_weight gates the masked
    similarity penalty and pose_weight the quaternion terms inside the task
    loss.
    """

    domain_weight: float = 1.0
    generator_adversarial_weight: float = 1.0
    task_weight: float = 1.0
    task_weight_in_g_step: float = 0.0
    content_weight: float = 0.0
    pose_weight: float = 0.0
    train_t_on_source: bool = True
    train_t_on_adapted: bool = True
    saturating_generator_loss: bool = False

    def validate(self):
        for field in (
            "domain_weight",
            "generator_adversarial_weight",
            "task_weight",
            "task_weight_in_g_step",
            "content_weight",
            "pose_weight",
        ):
            if getattr(self, field) < 0:
                raise ValueError(f"{field} must be >= 0, got {getattr(self, field)}")
        if self.task_weight > 0 and not (self.train_t_on_source or self.train_t_on_adapted):
            raise ValueError(
                "task_weight > 0 requires at least one of train_t_on_source / "
                "train_t_on_adapted"
            )
        return self


def _clamped(probs):
    return probs.clip(PROB_EPS, 1.0 - PROB_EPS)


def domain_loss(d_real, d_fake):
    """E[log D(real)] + E[log(1 - D(fake))], the quantity D ascends.

    Verdicts are probabilities in [0, 1]; both batches must be non-empty.
    At D = 0.5 everywhere this is -2 ln 2.
    """
    if d_real.data.size == 0 or d_fake.data.size == 0:
        raise GraphError("domain_loss needs non-empty verdict batches")
    return _clamped(d_real).log().mean() + (1.0 - _clamped(d_fake)).log().mean()


def generator_adversarial_loss(d_fake, saturating=False):
    """Fooling term for the generator update.

    Default is the non-saturating form -E[log D(fake)]; `saturating=True`
    selects the literal minimax term E[log(1 - D(fake))] instead, which is
    known to stall early when D wins easily.
    """
    if d_fake.data.size == 0:
        raise GraphError("generator_adversarial_loss needs a non-empty verdict batch")
    if saturating:
        return (1.0 - _clamped(d_fake)).log().mean()
    return -_clamped(d_fake).log().mean()


def pose_term(pred_quat, true_quat):
    # log(1 - |q . q_hat|), clamped so a perfect match stays finite
    dot = (pred_quat * true_quat).sum(axis=1)
    return (1.0 - dot.abs().clip(upper=QUAT_DOT_CEILING)).log().mean()


def task_loss(weights, onehot, source_logits=None, adapted_logits=None,
              source_quat=None, adapted_quat=None, true_quat=None):
    """Classification (+ pose) loss over the enabled streams, equally weighted.

    Each enabled stream contributes softmax cross-entropy against the shared
    labels plus pose_weight * log(1 - |q . q_hat|) when a pose head is in
    play. Streams are toggled by the flags on `weights`; a flag without its
    logits (or pose terms without ground truth) is an error rather than a
    silent skip.
    """
    streams = []
    if weights.train_t_on_source:
        if source_logits is None:
            raise GraphError("train_t_on_source is set but source logits are missing")
        streams.append((source_logits, source_quat))
    if weights.train_t_on_adapted:
        if adapted_logits is None:
            raise GraphError("train_t_on_adapted is set but adapted logits are missing")
        streams.append((adapted_logits, adapted_quat))
    if not streams:
        raise GraphError("task_loss called with no streams enabled")

    total = None
    for logits, quat in streams:
        term = softmax_cross_entropy(logits, onehot)
        if weights.pose_weight > 0:
            if quat is None:
                raise GraphError("pose_weight > 0 but a stream has no pose prediction")
            if true_quat is None:
                raise GraphError("pose_weight > 0 but no ground-truth quaternions given")
            q = true_quat if isinstance(true_quat, Tensor) else Tensor(true_quat)
            term = term + weights.pose_weight * pose_term(quat, q)
        total = term if total is None else total + term
    return total


def masked_pmse(source, generated, mask):
    """Masked pairwise mean squared error between source and generated pixels.

    With d = generated - source and k the pixel count of one plane (H*W),
    each (image, channel) plane contributes

        ||d . m||^2 / k - (d . m)^2 / k^2

    which penalizes shape changes inside the mask while forgiving a global
    brightness shift. The result averages over batch and channels. Masks are
    binary, shaped (N,1,H,W), and broadcast across channels.
    """
    if source.data.shape != generated.data.shape:
        raise GraphError(
            f"source {source.data.shape} and generated {generated.data.shape} differ"
        )
    if source.data.ndim != 4:
        raise GraphError(f"masked_pmse expects NCHW tensors, got {source.data.shape}")
    n, c, h, w = source.data.shape
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape != (n, 1, h, w):
        raise GraphError(f"mask shape {m.shape} must be ({n}, 1, {h}, {w})")
    values = np.unique(m)
    if not np.isin(values, (0, 1)).all():
        raise GraphError("mask must be binary (0/1)")
    mask_t = mask if isinstance(mask, Tensor) else Tensor(m.astype(source.data.dtype))

    k = float(h * w)
    diff = (generated - source) * mask_t
    sq = (diff * diff).sum(axis=(2, 3)) / k          # (N, C)
    shift = diff.sum(axis=(2, 3)) / k                # (N, C)
    return (sq - shift * shift).mean()


def quaternion_angle(q1, q2):
    """Rotation angle in degrees between two unit quaternions.

    2 * arccos(|<q1, q2>|), elementwise over (N, 4) batches or single
    4-vectors. Antipodal quaternions are the same rotation, hence the
    absolute value; the dot product is clipped into [-1, 1] before arccos.
    """
    a = np.asarray(q1, dtype=np.float64)
    b = np.asarray(q2, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 4:
        raise ValueError(f"expected matching (..., 4) arrays, got {a.shape} and {b.shape}")
    dot = np.abs((a * b).sum(axis=-1))
    return np.degrees(2.0 * np.arccos(np.clip(dot, -1.0, 1.0)))


def combined_objective(weights, phase, domain=None, task=None,
                       generator_adversarial=None, content=None):
    """Weighted sum of the terms a phase trains on; None if nothing is live.

    d_step maximizes the domain loss, so its contribution enters negated
    (every caller descends). Zero-weight terms are skipped entirely, not
    multiplied by zero, so their graphs are never traversed.
    """
    if phase not in (D_STEP, G_STEP):
        raise ValueError(f"phase must be {D_STEP!r} or {G_STEP!r}, got {phase!r}")
    parts = []
    if phase == D_STEP:
        if weights.domain_weight > 0 and domain is not None:
            parts.append(weights.domain_weight * -domain)
        if weights.task_weight > 0 and task is not None:
            parts.append(weights.task_weight * task)
    else:
        if weights.generator_adversarial_weight > 0 and generator_adversarial is not None:
            parts.append(weights.generator_adversarial_weight * generator_adversarial)
        if weights.task_weight_in_g_step > 0 and task is not None:
            parts.append(weights.task_weight_in_g_step * task)
        if weights.content_weight > 0 and content is not None:
            parts.append(weights.content_weight * content)
    if not parts:
        return None
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
