"""Teacher-student training loop wiring slice-block shuffle and patch displacement.

One iteration:

1. pick one axis, reused by both augmentation steps;
2. build weak and strong views of every labeled and unlabeled case;
3. label and score every view with the EMA teacher on noised inputs;
4. shuffle the merged strong batch, predict, recover, split, and take the
   Dice losses against ground truth and teacher pseudo-labels;
5. composite labels, patchify both streams, swap complementary patches and
   take the CE + Dice loss on the displaced batch;
6. combine the three terms, step SGD at the poly learning rate and move the
   teacher toward the student.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import displace as cgd
from . import losses
from .grid import Axis, ShapeError
from .losses import LossWeights, ScheduleConfig
from .metrics import dice_score
from .model import SegmentorParams, backward_from_prob_grad, forward, pseudo_label
from .shuffle import ShufflePlan, choose_axis, recover_batch, shuffle_batch, split_batch

MODES = {
    "baseline": frozenset(),
    "aug": frozenset({"aug"}),
    "sbs": frozenset({"aug", "sbs"}),
    "cgd": frozenset({"aug", "cgd"}),
    "full": frozenset({"aug", "sbs", "cgd"}),
}


@dataclass(frozen=True)
class StreamAugmentation:
    scale: tuple[float, float]
    shift: tuple[float, float]
    noise_std: float = 0.0


@dataclass(frozen=True)
class AugmentationSpec:
    weak: StreamAugmentation = StreamAugmentation((0.95, 1.05), (-0.05, 0.05))
    strong: StreamAugmentation = StreamAugmentation((0.8, 1.2), (-0.2, 0.2), noise_std=0.1)
    flip_axes: tuple[int, ...] = ()  # each listed axis is flipped with probability 1/2, same for both views

    def __post_init__(self):
        w, s = self.weak, self.strong
        if not (s.scale[0] <= w.scale[0] <= w.scale[1] <= s.scale[1]
                and s.shift[0] <= w.shift[0] <= w.shift[1] <= s.shift[1]
                and w.noise_std <= s.noise_std):
            raise ValueError("weak augmentation ranges must lie inside the strong ranges")


@dataclass(frozen=True)
class TrainConfig:
    p: int
    max_iters: int
    n: int = 2
    k: int = 2
    mode: str = "full"
    axis: str = "random"
    seed: int = 0
    batch_size: int = 2
    lambda_disp: float = 0.25
    rampup_iters: int = 17000
    lambda_u_max: float = 1.0
    ema_decay: float = 0.99
    base_lr: float = 0.01
    lr_pow: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    teacher_noise: float = 0.1
    noise_clamp: float = 0.2
    sbs_loss: str = "dice"  # "dice" or "ce_dice" for the labeled recovered head
    init_scale: float = 0.01
    eval_interval: int = 0  # 0 evaluates only after the last iteration
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.axis != "random":
            Axis.parse(self.axis)
        if self.sbs_loss not in ("dice", "ce_dice"):
            raise ValueError(f"sbs_loss must be 'dice' or 'ce_dice', got {self.sbs_loss!r}")
        if self.p < 1 or self.n < 1 or self.k < 1 or self.batch_size < 1:
            raise ValueError("p, n, k and batch_size must be positive")
        self.schedule  # validates the schedule constants

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.max_iters, self.rampup_iters, self.lambda_u_max,
                              self.ema_decay, self.base_lr, self.lr_pow)

    @property
    def steps(self) -> frozenset:
        return MODES[self.mode]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class Batch:
    images: np.ndarray  # (B, d, h, w) labeled
    labels: np.ndarray  # (B, d, h, w)
    unlabeled: np.ndarray  # (B, d, h, w)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.unlabeled = np.asarray(self.unlabeled, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (self.images.shape == self.labels.shape == self.unlabeled.shape) or len(self.images) < 1:
            raise ValueError("labeled images, labels and unlabeled images must share a (B, d, h, w) shape")


@dataclass
class TrainerState:
    student: SegmentorParams
    teacher: SegmentorParams
    momentum: np.ndarray
    config: TrainConfig
    num_classes: int
    rngs: dict[str, np.random.Generator]
    iteration: int = 0

    @classmethod
    def create(cls, config: TrainConfig, num_classes: int) -> "TrainerState":
        names = ("init", "axis", "sample", "aug", "noise", "shuffle")
        rngs = dict(zip(names, (np.random.default_rng(s)
                                for s in np.random.SeedSequence(config.seed).spawn(len(names)))))
        student = SegmentorParams.init(num_classes, rngs["init"], config.init_scale)
        return cls(student, student.copy(), np.zeros_like(student.to_vector()), config, num_classes, rngs)


@dataclass
class LossReport:
    iteration: int
    axis: str
    alpha: float
    beta: float
    lr: float
    loss_labeled: float
    loss_unlabeled: float
    loss_disp: float
    loss_total: float
    swaps: int

    FIELDS = ("iteration", "axis", "alpha", "beta", "lr", "loss_labeled",
              "loss_unlabeled", "loss_disp", "loss_total", "swaps")


def augment_streams(images: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator):
    """Weak and strong views of each case plus the per-case flips (shared by both views)."""
    weak = np.empty_like(images)
    strong = np.empty_like(images)
    flips = []
    for i, img in enumerate(images):
        axes = tuple(a for a in spec.flip_axes if rng.random() < 0.5)
        base = np.flip(img, axis=axes) if axes else img
        for out, aug in ((weak, spec.weak), (strong, spec.strong)):
            scale = rng.uniform(*aug.scale)
            shift = rng.uniform(*aug.shift)
            view = scale * base + shift
            if aug.noise_std > 0:
                view = view + aug.noise_std * rng.standard_normal(img.shape)
            out[i] = view
        flips.append(axes)
    return weak, strong, flips


def _apply_flips(grids: np.ndarray, flips) -> np.ndarray:
    return np.stack([np.flip(g, axis=axes) if axes else g for g, axes in zip(grids, flips)])


def sgd_step(state: TrainerState, grad: np.ndarray, lr: float) -> SegmentorParams:
    """Momentum SGD with coupled weight decay; updates ``state`` in place and returns the student."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    cfg = state.config
    theta = state.student.to_vector()
    state.momentum = cfg.momentum * state.momentum + (np.asarray(grad) + cfg.weight_decay * theta)
    state.student = SegmentorParams.from_vector(theta - lr * state.momentum, state.num_classes)
    return state.student


def _sbs_labeled(pred, target, kind):
    if kind == "dice":
        return losses.soft_dice_loss_grad(pred, target)
    return losses.displacement_loss_grad(pred, target)


def compute_losses(state: TrainerState, batch: Batch, alpha: float | None = None):
    """Loss report pieces and the total gradient for one iteration; does not update parameters.

    Consumes the iteration's random draws from ``state.rngs``.
    """
    cfg = state.config
    steps = cfg.steps
    rngs = state.rngs
    B = len(batch.images)
    dims = batch.images.shape[1:]

    axis = choose_axis(rngs["axis"]) if cfg.axis == "random" else Axis.parse(cfg.axis)

    merged = np.concatenate([batch.images, batch.unlabeled])
    if "aug" in steps:
        weak, strong, flips = augment_streams(merged, cfg.augmentation, rngs["aug"])
        labels = _apply_flips(batch.labels, flips[:B])
    else:
        weak = strong = merged
        labels = batch.labels

    teacher = state.teacher
    pseudo_w, conf_w = pseudo_label(teacher, weak, rngs["noise"], cfg.teacher_noise, cfg.noise_clamp)
    # strong-stream pseudo-labels only feed the displacement step
    if "aug" in steps and "cgd" in steps:
        pseudo_s, conf_s = pseudo_label(teacher, strong, rngs["noise"], cfg.teacher_noise, cfg.noise_clamp)
    else:
        pseudo_s, conf_s = pseudo_w, conf_w

    if alpha is None:
        alpha = losses.consistency_rampup(state.iteration, cfg.schedule)
    weights = LossWeights(alpha, cfg.lambda_disp)

    # slice-block shuffle path
    extent = dims[axis]
    if extent % cfg.p:
        raise ShapeError(f"block thickness p={cfg.p} does not divide L_a={extent} along axis {axis.name}")
    if "sbs" in steps:
        plan = ShufflePlan.sample(rngs["shuffle"], 2 * B, extent, axis, cfg.p)
        p_rec = recover_batch(forward(state.student, shuffle_batch(strong, plan)), plan)
    else:
        p_rec = forward(state.student, strong)
    p_lab, p_unl = split_batch(p_rec)
    pseudo_u = pseudo_w[B:]
    loss_l, grad_l = _sbs_labeled(p_lab, labels, cfg.sbs_loss)
    loss_u, grad_u = losses.soft_dice_loss_grad(p_unl, pseudo_u)
    grad_rec = np.concatenate([grad_l, weights.alpha * grad_u])
    # The segmentor is per-voxel, so chaining through the recovered predictions with the
    # unshuffled inputs gives the same gradient, summed in an order independent of the plan.
    grad = backward_from_prob_grad(strong, p_rec, grad_rec).to_vector()

    # confidence-guided displacement path
    loss_d, swaps = 0.0, 0
    if "cgd" in steps:
        volumes = np.stack([weak, strong], axis=1)
        gt = np.zeros((2 * B,) + dims, dtype=np.int64)
        gt[:B] = labels
        gt = np.stack([gt, gt], axis=1)
        sup = np.zeros_like(gt)
        sup[:B] = 1
        composite = cgd.composite_labels(gt, sup, np.stack([pseudo_w, pseudo_s], axis=1))
        stack = cgd.StreamStack(volumes, composite, np.stack([conf_w, conf_s], axis=1), sup)
        dec = cgd.patchify(stack, axis, cfg.p, cfg.n)
        stats = cgd.compute_stats(dec)
        selected = cgd.topk_select(cgd.confidence_gap(stats), cfg.k)
        out = cgd.displace(dec, stats, selected)
        swaps = int(out.swapped.sum())
        p_disp = forward(state.student, out.volumes)
        loss_d, g = losses.displacement_loss_grad(p_disp, out.labels)
        if weights.beta:
            grad = grad + weights.beta * backward_from_prob_grad(out.volumes, p_disp, g).to_vector()

    report = LossReport(
        iteration=state.iteration, axis=axis.name, alpha=weights.alpha, beta=weights.beta,
        lr=losses.poly_lr(min(state.iteration, cfg.max_iters), cfg.schedule),
        loss_labeled=loss_l, loss_unlabeled=loss_u, loss_disp=loss_d,
        loss_total=losses.total_loss(loss_l, loss_u, loss_d, weights), swaps=swaps,
    )
    return report, grad


def train_iteration(state: TrainerState, batch: Batch, alpha: float | None = None):
    """Run one training iteration in place; returns ``(state, report)``."""
    report, grad = compute_losses(state, batch, alpha)
    sgd_step(state, grad, report.lr)
    teacher = losses.ema_update(state.teacher.to_vector(), state.student.to_vector(), state.config.ema_decay)
    state.teacher = SegmentorParams.from_vector(teacher, state.num_classes)
    state.iteration += 1
    return state, report


@dataclass
class Dataset:
    labeled: list  # [(volume, labels)]
    unlabeled: list  # [volume]
    heldout: list  # [(volume, labels)]
    num_classes: int


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    li = rng.choice(len(dataset.labeled), batch_size, replace=len(dataset.labeled) < batch_size)
    ui = rng.choice(len(dataset.unlabeled), batch_size, replace=len(dataset.unlabeled) < batch_size)
    return Batch(np.stack([dataset.labeled[i][0] for i in li]),
                 np.stack([dataset.labeled[i][1] for i in li]),
                 np.stack([dataset.unlabeled[i] for i in ui]))


def heldout_dice(params: SegmentorParams, cases, num_classes: int) -> float:
    """Mean foreground Dice over cases; per case, classes absent from both masks are skipped."""
    scores = []
    for volume, ref in cases:
        pred = forward(params, volume).argmax(axis=-1)
        vals = [dice_score(pred, ref, c) for c in range(1, num_classes)]
        vals = [v for v in vals if v is not None]
        if vals:
            scores.append(np.mean(vals))
    return float(np.mean(scores))


def run_training(config: TrainConfig, dataset: Dataset, iters: int | None = None, callback=None):
    """Train for ``iters`` iterations (default ``config.max_iters``).

    Returns ``(state, reports, history)`` where history holds
    ``{"iteration", "dice"}`` entries at every evaluation point.
    """
    iters = config.max_iters if iters is None else iters
    if iters < 1:
        raise ValueError("iters must be at least 1")
    state = TrainerState.create(config, dataset.num_classes)
    reports, history = [], []
    for _ in range(iters):
        batch = sample_batch(dataset, config.batch_size, state.rngs["sample"])
        _, report = train_iteration(state, batch)
        reports.append(report)
        if callback is not None:
            callback(state, report)
        done = state.iteration
        if (config.eval_interval and done % config.eval_interval == 0) or done == iters:
            if not history or history[-1]["iteration"] != done:
                history.append({"iteration": done,
                                "dice": heldout_dice(state.student, dataset.heldout, dataset.num_classes)})
    return state, reports, history


def phantom_dataset(spec, n_train: int, labeled_fraction: float, n_heldout: int, seed: int) -> Dataset:
    """Phantom train/held-out split; the first ``round(labeled_fraction * n_train)`` cases keep labels."""
    from .phantom import generate_dataset

    cases = generate_dataset(spec, n_train + n_heldout, seed)
    n_lab = max(1, int(round(labeled_fraction * n_train)))
    train, heldout = cases[:n_train], cases[n_train:]
    return Dataset(train[:n_lab], [v for v, _ in train[n_lab:]], heldout, spec.num_classes)
