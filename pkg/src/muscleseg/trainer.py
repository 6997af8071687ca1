"""Mini-batch training with soft Dice + Adam, per-subject evaluation and inference."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import AdamState, adam_step, soft_dice_loss
from .autograd.tensor import Tensor
from .prep import SIDES, CropSpec, SubjectImages, crop_about_landmark, mirror_to_canonical, normalize_zscore
from .vnet import ArchitectureSpec, Model, build_model, forward
from .voxgrid import LEFT, RIGHT, Mask3D, dsc, largest_component, mask_volume_ml

THRESHOLD = 0.5


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 3
    lr: float = 1e-4
    seed: int = 0
    width: float = 1.0
    crop_dims: tuple = (96, 96, 192)
    train_ids: tuple = ()
    val_ids: tuple = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        object.__setattr__(self, "crop_dims", tuple(int(d) for d in self.crop_dims))
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        object.__setattr__(self, "val_ids", tuple(self.val_ids))
        overlap = set(self.train_ids) & set(self.val_ids)
        if overlap:
            raise ValueError(f"train and validation splits share {sorted(overlap)[:3]}")

    def architecture(self) -> ArchitectureSpec:
        return ArchitectureSpec(input_dims=self.crop_dims, width=self.width)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    val_dsc: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def rows(self):
        for e, loss in enumerate(self.loss):
            v = self.val_dsc[e] if e < len(self.val_dsc) else None
            yield e + 1, loss, v


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_dsc"])
        for epoch, loss, v in history.rows():
            w.writerow([epoch, repr(float(loss)), "" if v is None else repr(float(v))])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x747261696E, epoch]).permutation(n)


def train(config: TrainConfig, training_set, validation=None, model: Model | None = None,
          crop_spec: CropSpec | None = None, log=None):
    """Train for ``config.epochs``; returns ``(model, history)``.

    ``validation`` is an optional list of :class:`SubjectImages`; when given,
    mean per-subject DSC is recorded after every epoch.
    """
    samples = list(training_set)
    if not samples:
        raise ValueError("training set is empty")
    spec = config.architecture()
    for s in samples:
        if s.image.shape != spec.input_dims:
            raise ValueError(f"sample {s.subject_id}/{s.side} has shape {s.image.shape}, model expects {spec.input_dims}")
    if model is None:
        model = build_model(spec, seed=config.seed)
    elif model.spec != spec:
        raise ValueError("model architecture differs from config")
    crop_spec = crop_spec or CropSpec(config.crop_dims)
    params = model.parameters()
    state = AdamState(lr=config.lr)
    history = TrainHistory()
    dtype = model.dtype
    bs = config.batch_size

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = epoch_order(config.seed, epoch, len(samples))
        total, count = 0.0, 0
        for step, start in enumerate(range(0, len(order), bs), start=1):
            batch = [samples[i] for i in order[start:start + bs]]
            x = np.stack([s.image for s in batch])[:, None].astype(dtype, copy=False)
            y = np.stack([s.mask for s in batch])[:, None]
            model.zero_grad()
            probs = model(Tensor(x))
            loss = soft_dice_loss(probs, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            loss.backward()
            adam_step([p.data for p in params], [p.grad for p in params], state)
            total += value * len(batch)
            count += len(batch)
        history.loss.append(total / count)
        if validation:
            history.val_dsc.append(float(np.mean(evaluate_dsc(model, validation, crop_spec))))
        history.seconds.append(time.perf_counter() - t0)
        if log is not None:
            v = f" val_dsc={history.val_dsc[-1]:.4f}" if validation else ""
            log(f"epoch {epoch}/{config.epochs} loss={history.loss[-1]:.4f}{v} ({history.seconds[-1]:.1f}s)")
    model.metadata.update({"epochs": config.epochs, "lr": config.lr, "batch_size": bs, "seed": config.seed})
    return model, history


# --------------------------------------------------------------- inference


def _side_probability(model: Model, volume, landmark, crop_spec: CropSpec, side: str):
    """Probability crop in source orientation, plus the crop origin."""
    image, _ = crop_about_landmark(volume, None, landmark, crop_spec, side)
    canon, _ = mirror_to_canonical(normalize_zscore(image), None, side)
    prob = forward(model, canon)
    prob, _ = mirror_to_canonical(prob, None, side)
    return prob, crop_spec.origin(landmark, side)


def _paste(prob, origin, dims) -> np.ndarray:
    full = np.zeros(dims, dtype=np.float64)
    src, dst = [], []
    for o, c, n in zip(origin, prob.shape, dims):
        lo, hi = max(o, 0), min(o + c, n)
        if hi <= lo:
            return full
        dst.append(slice(lo, hi))
        src.append(slice(lo - o, hi - o))
    full[tuple(dst)] = prob[tuple(src)]
    return full


def segment_subject(model: Model, volume, landmarks, crop_spec: CropSpec, cleanup: bool = False):
    """Label both sides; returns ``(Mask3D, left_ml, right_ml)``.

    A voxel above threshold for both sides goes to the side with the higher
    probability (ties to the right side).
    """
    if tuple(crop_spec.dims) != tuple(model.spec.input_dims):
        raise ValueError(f"crop dims {crop_spec.dims} do not match model input {model.spec.input_dims}")
    landmarks.check_inside(volume.dims)
    probs = {}
    for side in SIDES:
        landmark = landmarks.right if side == "right" else landmarks.left
        prob, origin = _side_probability(model, volume, landmark, crop_spec, side)
        probs[side] = _paste(prob, origin, volume.dims)
    pr, pl = probs["right"], probs["left"]
    labels = np.zeros(volume.dims, dtype=np.uint8)
    right = (pr > THRESHOLD) & (pr >= pl)
    left = (pl > THRESHOLD) & ~right
    labels[right] = RIGHT
    labels[left] = LEFT
    mask = Mask3D(labels, volume.spacing)
    if cleanup:
        keep = np.zeros(volume.dims, dtype=np.uint8)
        for label in (RIGHT, LEFT):
            keep[np.asarray(largest_component(mask, label).labels) == label] = label
        mask = Mask3D(keep, volume.spacing)
    return mask, mask_volume_ml(mask, LEFT), mask_volume_ml(mask, RIGHT)


def subject_dsc(truth: Mask3D, predicted: Mask3D) -> float:
    """Mean of the right and left DSC."""
    return 0.5 * (dsc(truth, predicted, RIGHT) + dsc(truth, predicted, LEFT))


def evaluate_dsc(model: Model, subjects, crop_spec: CropSpec, cleanup: bool = False) -> list[float]:
    out = []
    for subj in subjects:
        if not isinstance(subj, SubjectImages):
            subj = SubjectImages(*subj)
        pred, _, _ = segment_subject(model, subj.volume, subj.landmarks, crop_spec, cleanup)
        out.append(subject_dsc(subj.mask, pred))
    return out
