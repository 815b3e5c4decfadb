"""Mutual mentor/student distillation for one client's local training.

Each model minimizes its own task loss plus a distillation term and a
semantic-alignment term, both divided by task losses:

* task      = CE(y, y_hat) + MSE(m, m_hat)
* dis       = KL(own soft labels || counterpart's) / counterpart task loss
* sem       = (MSE(S', S) + MSE(C', C)) / (mentor task + student task)
* total     = task + dis + sem

Denominators are treated as constant weights (no gradient) and clamped
from below at ``TAU_FLOOR``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, cross_entropy, gradients, kl_divergence, mse, one_hot, scale
from .channel import ChannelRealization
from .errors import NonFiniteLossError, ProtocolError

TAU_FLOOR = 1e-3


@dataclass(frozen=True)
class LossBundle:
    task: float
    dis: float
    sem: float
    total: float


@dataclass
class DistillStep:
    """Everything the losses need from one mentor pass and one student pass."""

    m: Tensor
    y: Tensor
    mentor_y: Tensor
    student_y: Tensor
    mentor_m_hat: Tensor
    student_m_hat: Tensor
    mentor_S: Tensor
    student_S: Tensor
    mentor_C: Tensor
    student_C: Tensor

    @classmethod
    def from_outputs(cls, images, y_onehot, mentor_out, student_out):
        return cls(Tensor(images), Tensor(y_onehot),
                   mentor_out.y_hat, student_out.y_hat,
                   mentor_out.m_hat, student_out.m_hat,
                   mentor_out.S, student_out.S,
                   mentor_out.C, student_out.C)

    def side(self, which):
        """``(own y_hat, own m_hat, own S, own C)`` for ``'mentor'`` or ``'student'``."""
        if which == "mentor":
            return self.mentor_y, self.mentor_m_hat, self.mentor_S, self.mentor_C
        if which == "student":
            return self.student_y, self.student_m_hat, self.student_S, self.student_C
        raise ValueError(f"which must be 'mentor' or 'student', not {which!r}")


def _other(which):
    return "student" if which == "mentor" else "mentor"


def task_loss(step, which):
    y_hat, m_hat, _, _ = step.side(which)
    return add(cross_entropy(step.y, y_hat), mse(step.m, m_hat))


def adaptive_distill_loss(step, which, tau=TAU_FLOOR, counterpart_task=None, detach=True):
    """``KL(own || counterpart) / max(counterpart task loss, tau)``."""
    own = step.side(which)[0]
    other = step.side(_other(which))[0]
    if detach:
        other = other.detach()
    if counterpart_task is None:
        counterpart_task = task_loss(step, _other(which)).item()
    return scale(kl_divergence(own, other), 1.0 / max(counterpart_task, tau))


def adaptive_semantic_loss(step, which="student", tau=TAU_FLOOR, task_sum=None, detach=True):
    """``(MSE(S', S) + MSE(C', C)) / max(L'_task + L_task, tau)``.

    The value is the same for both models; ``which`` only selects whose
    tensors stay attached to the graph when ``detach`` is set.
    """
    _, _, S_m, C_m = step.side("mentor")
    _, _, S_s, C_s = step.side("student")
    if detach:
        if which == "mentor":
            S_s, C_s = S_s.detach(), C_s.detach()
        else:
            S_m, C_m = S_m.detach(), C_m.detach()
    if task_sum is None:
        task_sum = task_loss(step, "mentor").item() + task_loss(step, "student").item()
    return scale(add(mse(S_m, S_s), mse(C_m, C_s)), 1.0 / max(task_sum, tau))


@dataclass
class Losses:
    """Differentiable loss terms for one model."""

    task: Tensor
    dis: Tensor
    sem: Tensor
    total: Tensor

    def bundle(self):
        return LossBundle(self.task.item(), self.dis.item(), self.sem.item(), self.total.item())


def total_losses(step, tau=TAU_FLOOR, detach=True):
    """Return ``(mentor Losses, student Losses)``."""
    t_m = task_loss(step, "mentor")
    t_s = task_loss(step, "student")
    vm, vs = t_m.item(), t_s.item()
    out = []
    for which, own_task, other_v in (("mentor", t_m, vs), ("student", t_s, vm)):
        dis = adaptive_distill_loss(step, which, tau, other_v, detach)
        sem = adaptive_semantic_loss(step, which, tau, vm + vs, detach)
        out.append(Losses(own_task, dis, sem, add(add(own_task, dis), sem)))
    return out[0], out[1]


def solo_losses(images, y_onehot, out):
    """Task loss only, for a student trained without a mentor."""
    task = add(cross_entropy(Tensor(y_onehot), out.y_hat), mse(Tensor(images), out.m_hat))
    zero = Tensor(np.asarray(0.0))
    return Losses(task, zero, zero, task)


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    model: str
    losses: LossBundle


def _check_finite(losses, which, epoch, batch, labels):
    b = losses.bundle()
    if not all(math.isfinite(v) for v in (b.task, b.dis, b.sem, b.total)):
        dump = {"model": which, "epoch": epoch, "batch": batch, "losses": b, "labels": list(map(int, labels))}
        raise NonFiniteLossError(f"non-finite {which} loss at epoch {epoch}, batch {batch}: {b}", dump)


def _mean_bundle(rows, weights):
    w = np.asarray(weights, dtype=np.float64)
    arr = np.array([[r.task, r.dis, r.sem, r.total] for r in rows])
    m = (arr * w[:, None]).sum(axis=0) / w.sum()
    return LossBundle(*map(float, m))


def clip_gradients(grads, max_norm):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * f
    return grads


def pld_local_train(mentor, student, shard, epochs, lr, snr_db, seed_seq,
                    batch_size=8, tau=TAU_FLOOR, momentum=0.0, detach=True,
                    use_mentor=True, mentor_lr=None, clip_norm=None):
    """Local training for one client; updates ``mentor`` and ``student`` in place.

    Per batch: both models transmit through their own channel draw, the
    losses above are assembled from that single forward pass, then the
    student takes an SGD step on its total loss followed by the mentor on
    its own. With ``use_mentor=False`` the student trains alone on its
    task loss and the mentor is left untouched.

    ``seed_seq`` (a ``numpy.random.SeedSequence``) fixes batching and noise;
    the student's noise stream does not depend on ``use_mentor``.
    ``clip_norm`` caps each model's gradient norm per step (off by default).

    Returns ``(mentor, student, trace)`` where ``trace`` holds one
    per-epoch mean :class:`LossBundle` per trained model.
    """
    if epochs < 1:
        raise ProtocolError("need at least one local epoch")
    if len(shard) == 0:
        raise ProtocolError("cannot train on an empty shard")
    shuffle_ss, student_ss, mentor_ss = seed_seq.spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_s = np.random.default_rng(student_ss)
    noise_m = np.random.default_rng(mentor_ss)
    sd_s = student.semantic_dim
    sd_m = mentor.semantic_dim if mentor is not None else sd_s
    mentor_lr = lr if mentor_lr is None else mentor_lr
    vel_s, vel_m = {}, {}
    y_all = one_hot(shard.labels, shard.classes)
    trace = []
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(shard))
        rows_s, rows_m, sizes = [], [], []
        for bi, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start:start + batch_size]
            xb, yb = shard.images[idx], y_all[idx]
            ch_s = ChannelRealization.sample((len(idx), sd_s), snr_db, noise_s)
            out_s = student.forward(xb, ch_s)
            if use_mentor:
                ch_m = ChannelRealization.sample((len(idx), sd_m), snr_db, noise_m)
                out_m = mentor.forward(xb, ch_m)
                step = DistillStep.from_outputs(xb, yb, out_m, out_s)
                l_m, l_s = total_losses(step, tau, detach)
                _check_finite(l_s, "student", epoch, bi, shard.labels[idx])
                _check_finite(l_m, "mentor", epoch, bi, shard.labels[idx])
                g_s = clip_gradients(gradients(l_s.total, student.params.tensors), clip_norm)
                g_m = clip_gradients(gradients(l_m.total, mentor.params.tensors), clip_norm)
                student.params.sgd_step(g_s, lr, vel_s, momentum)
                mentor.params.sgd_step(g_m, mentor_lr, vel_m, momentum)
                rows_m.append(l_m.bundle())
            else:
                l_s = solo_losses(xb, yb, out_s)
                _check_finite(l_s, "student", epoch, bi, shard.labels[idx])
                g_s = clip_gradients(gradients(l_s.total, student.params.tensors), clip_norm)
                student.params.sgd_step(g_s, lr, vel_s, momentum)
            rows_s.append(l_s.bundle())
            sizes.append(len(idx))
        if use_mentor:
            trace.append(TraceRow(epoch, "mentor", _mean_bundle(rows_m, sizes)))
        trace.append(TraceRow(epoch, "student", _mean_bundle(rows_s, sizes)))
    return mentor, student, trace
