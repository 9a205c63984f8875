"""Training losses for prototype-guided dual-teacher continual learning.

The student is trained against two frozen references at once: the
initial model (which still knows everything it was pretrained on) and
the previous task's model (which knows the tasks learned so far). Three
distillation channels connect student to each teacher:

  * feature distance     - squared L2 between image embeddings,
  * relation distance    - Frobenius gap between image-prototype
                           similarity matrices,
  * distribution match   - soft cross-entropy on image-text, prototype-
                           text, and text-prototype distributions.

Per sample, the two teachers are mixed by weights derived from how
similar each teacher's image-text distribution is to the student's: the
teacher the student has drifted away from gets the larger pull. The
prototype/text channel is exempt from that mixing and carries a fixed
half weight per teacher.

A separate contrastive term aligns class prototypes with the student's
text embeddings, and plain cross-entropy on the current task provides
the supervised signal. Temperatures: distillation distributions use a
soft temperature (default 2); the supervised logits use a sharp one
(default 0.07).

Prototypes and teacher outputs are constants here; gradients flow only
into the student.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import params_flat_tensor
from .errors import ConfigError, ContractError, ShapeMismatchError
from .tensor import Tensor

WEIGHTING_MODES = ("similarity", "average", "only_c0", "only_prev")


# ---------------------------------------------------------------------------
# individual terms


def csa_loss(protos: Tensor, texts: Tensor, tau: float) -> Tensor:
    """Symmetric contrastive alignment between prototypes and text embeddings.

    Row k of each side is class k; the diagonal pairs are positives. The
    prototypes are constants, so this term trains the text tower toward
    the prototype anchors.
    """
    if protos.ndim != 2 or texts.ndim != 2:
        raise ShapeMismatchError(f"csa_loss needs 2-D inputs, got {protos.shape} and {texts.shape}")
    if protos.shape[0] != texts.shape[0]:
        raise ShapeMismatchError(f"csa_loss: class counts differ, {protos.shape} vs {texts.shape}")
    k = protos.shape[0]
    if k == 0:
        raise ContractError("csa_loss: empty class set")
    logits = T.scale(T.cosine_sim(protos, texts), 1.0 / tau)
    eye = Tensor(np.eye(k))
    proto_to_text = T.mean(T.soft_cross_entropy(eye, T.softmax(logits, axis=1)))
    text_to_proto = T.mean(T.soft_cross_entropy(eye, T.transpose(T.softmax(logits, axis=0))))
    return T.scale(T.add(proto_to_text, text_to_proto), 0.5)


def fd_loss(teacher_feats: Tensor, student_feats: Tensor) -> tuple[Tensor, Tensor]:
    """Squared L2 distance between embeddings, per sample and batch mean."""
    if teacher_feats.shape != student_feats.shape:
        raise ShapeMismatchError(f"fd_loss: {teacher_feats.shape} vs {student_feats.shape}")
    if teacher_feats.ndim != 2 or teacher_feats.shape[0] == 0:
        raise ContractError(f"fd_loss: need a non-empty [B, d] batch, got {teacher_feats.shape}")
    diff = T.sub(teacher_feats, student_feats)
    per_sample = T.tsum(T.mul(diff, diff), axis=1)
    return per_sample, T.mean(per_sample)


def ird_loss(
    teacher_feats: Tensor,
    student_feats: Tensor,
    protos: Tensor,
    row_weights: Tensor | None = None,
) -> Tensor:
    """Frobenius gap between teacher and student image-prototype similarities.

    Normalized by sqrt(B * K) so the value is comparable across batch and
    class-set sizes. Optional per-sample weights scale the difference rows
    before aggregation.
    """
    if protos.ndim != 2 or protos.shape[0] == 0:
        raise ContractError("ird_loss: empty prototype set")
    t_sims = T.cosine_sim(teacher_feats, protos)
    s_sims = T.cosine_sim(student_feats, protos)
    diff = T.sub(t_sims, s_sims)
    if row_weights is not None:
        diff = T.mul(T.reshape(row_weights, (row_weights.size, 1)), diff)
    b, k = diff.shape
    return T.scale(T.frobenius_norm(diff), 1.0 / np.sqrt(b * k))


def image_text_dist(feats: Tensor, texts: Tensor, tau: float) -> Tensor:
    """Rows of softmax(cosine(feats, texts) / tau): one distribution per row."""
    if texts.ndim != 2 or texts.shape[0] == 0:
        raise ContractError("image_text_dist: empty text set")
    return T.softmax(T.scale(T.cosine_sim(feats, texts), 1.0 / tau), axis=1)


def i2t_loss(teacher_dist: Tensor, student_dist: Tensor, sample_weights: Tensor | None = None) -> Tensor:
    """Mean soft cross-entropy from teacher to student image-text rows."""
    if teacher_dist.shape != student_dist.shape:
        raise ShapeMismatchError(f"i2t_loss: {teacher_dist.shape} vs {student_dist.shape}")
    per_sample = T.soft_cross_entropy(teacher_dist, student_dist)
    if sample_weights is not None:
        per_sample = T.mul(per_sample, sample_weights)
    return T.mean(per_sample)


def pt_loss(teacher: "TeacherOutputs", student_pt: Tensor, student_tp: Tensor) -> Tensor:
    """Prototype-text and text-prototype distribution matching, summed."""
    a = T.mean(T.soft_cross_entropy(teacher.proto_text_dist, student_pt))
    b = T.mean(T.soft_cross_entropy(teacher.text_proto_dist, student_tp))
    return T.add(a, b)


def sample_weights(dist_c0: Tensor, dist_prev: Tensor, dist_student: Tensor) -> tuple[Tensor, Tensor]:
    """Per-sample teacher mixing weights, as constants.

    For each sample, each teacher is scored by the cosine similarity
    between its image-text distribution row and the student's; the
    weights are a softmax over the negated scores, so they sum to one
    and the less-similar teacher gets the larger weight.
    """
    if not dist_c0.shape == dist_prev.shape == dist_student.shape:
        raise ShapeMismatchError(
            f"sample_weights: mismatched shapes {dist_c0.shape}, {dist_prev.shape}, {dist_student.shape}"
        )

    def _row_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        num = (a * b).sum(axis=1)
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        return num / den

    s0 = _row_cos(dist_c0.data, dist_student.data)
    s_prev = _row_cos(dist_prev.data, dist_student.data)
    e0 = np.exp(-s0)
    e_prev = np.exp(-s_prev)
    r0 = e0 / (e0 + e_prev)
    return Tensor(r0), Tensor(1.0 - r0)


def wc_loss(theta_t: Tensor, theta_prev) -> Tensor:
    """Sum of squared parameter drift from a constant reference vector."""
    ref = theta_prev if isinstance(theta_prev, Tensor) else Tensor(theta_prev)
    if theta_t.shape != ref.shape:
        raise ShapeMismatchError(f"wc_loss: {theta_t.shape} vs {ref.shape}")
    diff = T.sub(theta_t, ref.detach())
    return T.tsum(T.mul(diff, diff))


# ---------------------------------------------------------------------------
# batch output bundles


def _check_rows_sum_to_one(dist: Tensor, what: str) -> None:
    sums = dist.data.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ContractError(f"{what}: rows must sum to 1")


@dataclass
class TeacherOutputs:
    """Everything a frozen teacher contributes for one batch. All constant."""

    feats: Tensor
    img_text_dist: Tensor
    proto_text_dist: Tensor
    text_proto_dist: Tensor

    def __post_init__(self):
        for name in ("feats", "img_text_dist", "proto_text_dist", "text_proto_dist"):
            value = getattr(self, name)
            if value.requires_grad:
                raise ContractError(f"TeacherOutputs.{name} must be detached")
        _check_rows_sum_to_one(self.img_text_dist, "TeacherOutputs.img_text_dist")
        _check_rows_sum_to_one(self.proto_text_dist, "TeacherOutputs.proto_text_dist")
        _check_rows_sum_to_one(self.text_proto_dist, "TeacherOutputs.text_proto_dist")


@dataclass
class StudentOutputs:
    """The student's live (differentiable) outputs for one batch."""

    feats: Tensor
    texts: Tensor
    img_text_dist: Tensor
    proto_text_dist: Tensor
    text_proto_dist: Tensor


def teacher_outputs(model, x, token_ids, protos: Tensor, tau: float) -> TeacherOutputs:
    """Run a frozen model over the batch; see StudentOutputs for the live twin."""
    feats = model.encode_images(x)
    texts = model.encode_texts(token_ids)
    return TeacherOutputs(
        feats=feats,
        img_text_dist=image_text_dist(feats, texts, tau),
        proto_text_dist=image_text_dist(protos, texts, tau),
        text_proto_dist=image_text_dist(texts, protos, tau),
    )


def student_outputs(model, x, token_ids, protos: Tensor, tau: float, feats: Tensor | None = None) -> StudentOutputs:
    """Student forward pass; `feats` may be passed in to reuse an encoding."""
    if feats is None:
        feats = model.encode_images(x)
    texts = model.encode_texts(token_ids)
    return StudentOutputs(
        feats=feats,
        texts=texts,
        img_text_dist=image_text_dist(feats, texts, tau),
        proto_text_dist=image_text_dist(protos, texts, tau),
        text_proto_dist=image_text_dist(texts, protos, tau),
    )


# ---------------------------------------------------------------------------
# assembled distillation and total loss


@dataclass
class LossBreakdown:
    """Scalar values of every term, for logging and divergence dumps.

    fd/ird/idd entries hold the raw (unweighted) term values; `mdd` is the
    assembled teacher-weighted sum actually used in the objective, and
    `total` is ce + lambda1 * csa + lambda2 * mdd (+ lambda_wc * wc when
    weight drift is penalized). Disabled terms stay 0.
    """

    ce: float = 0.0
    csa: float = 0.0
    fd0: float = 0.0
    fd_prev: float = 0.0
    ird0: float = 0.0
    ird_prev: float = 0.0
    idd0: float = 0.0
    idd_prev: float = 0.0
    mdd: float = 0.0
    wc: float = 0.0
    total: float = 0.0
    per_sample_r0: list = field(default_factory=list)

    FIELDS = ("ce", "csa", "fd0", "fd_prev", "ird0", "ird_prev", "idd0", "idd_prev", "mdd", "wc", "total")

    def values(self) -> list[float]:
        return [getattr(self, name) for name in self.FIELDS]


def mdd_loss(
    c0_out: TeacherOutputs,
    prev_out: TeacherOutputs,
    student: StudentOutputs,
    protos: Tensor,
    alpha: float = 1.0,
    beta: float = 1.0,
    weighting: str = "similarity",
    enable_fd: bool = True,
    enable_ird: bool = True,
    enable_idd: bool = True,
) -> tuple[Tensor | None, dict]:
    """Dual-teacher distillation: per-teacher weighted sum of the channels.

    Per teacher k with per-sample weights r_k:

        r_k * (FD + alpha * IRD + beta * i2t) + 0.5 * beta * (p&t)

    summed over both teachers. `weighting` picks how r is formed:
    per-sample similarity scores, a flat 0.5, or all mass on one teacher
    (in which case the other teacher's terms, p&t included, vanish).

    Returns (loss tensor or None if every channel is disabled, info dict
    with raw term values and the per-sample weights).
    """
    if weighting not in WEIGHTING_MODES:
        raise ConfigError(f"unknown weighting mode {weighting!r}; expected one of {WEIGHTING_MODES}")
    batch = student.feats.shape[0]
    if weighting == "similarity":
        r0, r_prev = sample_weights(c0_out.img_text_dist, prev_out.img_text_dist, student.img_text_dist)
    elif weighting == "average":
        r0 = Tensor(np.full(batch, 0.5))
        r_prev = Tensor(np.full(batch, 0.5))
    elif weighting == "only_c0":
        r0 = Tensor(np.ones(batch))
        r_prev = None
    else:  # only_prev
        r0 = None
        r_prev = Tensor(np.ones(batch))

    info = {
        "fd0": 0.0, "fd_prev": 0.0,
        "ird0": 0.0, "ird_prev": 0.0,
        "idd0": 0.0, "idd_prev": 0.0,
        "r0": r0.data.copy() if r0 is not None else np.zeros(batch),
    }
    terms: list[Tensor] = []
    for tag, teacher, r in (("0", c0_out, r0), ("_prev", prev_out, r_prev)):
        if r is None:
            continue
        if enable_fd:
            per_fd, fd_mean = fd_loss(teacher.feats, student.feats)
            info["fd" + tag] = fd_mean.item()
            terms.append(T.mean(T.mul(per_fd, r)))
        if enable_ird:
            weighted = ird_loss(teacher.feats, student.feats, protos, row_weights=r)
            terms.append(T.scale(weighted, alpha))
            b, k = teacher.feats.shape[0], protos.shape[0]
            t_sims = T.cosine_sim(teacher.feats, protos).data
            s_sims = T.cosine_sim(student.feats, protos).data
            info["ird" + tag] = float(np.linalg.norm(t_sims - s_sims) / np.sqrt(b * k))
        if enable_idd:
            i2t_weighted = i2t_loss(teacher.img_text_dist, student.img_text_dist, sample_weights=r)
            pt = pt_loss(teacher, student.proto_text_dist, student.text_proto_dist)
            terms.append(T.scale(i2t_weighted, beta))
            terms.append(T.scale(pt, 0.5 * beta))
            i2t_raw = i2t_loss(teacher.img_text_dist, student.img_text_dist)
            info["idd" + tag] = i2t_raw.item() + pt.item()
    if not terms:
        return None, info
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return total, info


def cross_entropy(dist: Tensor, label_positions) -> Tensor:
    """Mean negative log-probability of the true columns of `dist`."""
    labels = np.asarray(label_positions, dtype=np.int64)
    b, k = dist.shape
    if labels.shape != (b,):
        raise ShapeMismatchError(f"cross_entropy: {b} rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"cross_entropy: label positions must lie in [0, {k})")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    return T.mean(T.soft_cross_entropy(Tensor(onehot), dist))


def total_loss(
    x,
    label_positions,
    token_ids,
    student_model,
    c0,
    c_prev,
    store,
    hyper,
    class_ids=None,
    wc_reference=None,
    student_feats: Tensor | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Assemble the full objective for one batch.

    `label_positions` index into `token_ids` (the current task's classes,
    in a fixed order); `class_ids` gives the matching prototype keys and
    defaults to positions 0..K-1 of the store's class list order passed
    by the caller. Teachers and prototypes are constants. With every
    component disabled this reduces to plain supervised fine-tuning.
    """
    if class_ids is None:
        raise ContractError("total_loss: class_ids (prototype keys, same order as token_ids) is required")
    protos = store.matrix(class_ids).detach()
    student = student_outputs(student_model, x, token_ids, protos, hyper.tau, feats=student_feats)

    bd = LossBreakdown()
    supervised = cross_entropy(image_text_dist(student.feats, student.texts, hyper.tau_ce), label_positions)
    bd.ce = supervised.item()
    loss = supervised

    if hyper.enable_csa:
        csa = csa_loss(protos, student.texts, hyper.tau)
        bd.csa = csa.item()
        loss = T.add(loss, T.scale(csa, hyper.lambda1))

    if hyper.enable_fd or hyper.enable_ird or hyper.enable_idd:
        c0_out = teacher_outputs(c0, x, token_ids, protos, hyper.tau)
        prev_out = teacher_outputs(c_prev, x, token_ids, protos, hyper.tau)
        mdd, info = mdd_loss(
            c0_out,
            prev_out,
            student,
            protos,
            alpha=hyper.alpha,
            beta=hyper.beta,
            weighting=hyper.weighting_mode,
            enable_fd=hyper.enable_fd,
            enable_ird=hyper.enable_ird,
            enable_idd=hyper.enable_idd,
        )
        if mdd is not None:
            bd.fd0 = info["fd0"]
            bd.fd_prev = info["fd_prev"]
            bd.ird0 = info["ird0"]
            bd.ird_prev = info["ird_prev"]
            bd.idd0 = info["idd0"]
            bd.idd_prev = info["idd_prev"]
            bd.per_sample_r0 = [float(v) for v in info["r0"]]
            bd.mdd = mdd.item()
            loss = T.add(loss, T.scale(mdd, hyper.lambda2))

    if hyper.enable_wc and wc_reference is not None:
        wc = wc_loss(params_flat_tensor(student_model), wc_reference)
        bd.wc = wc.item()
        loss = T.add(loss, T.scale(wc, hyper.lambda_wc))

    bd.total = loss.item()
    return loss, bd
