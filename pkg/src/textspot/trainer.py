"""Multi-task training loop, checkpointing and full-image inference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .config import RunConfig, parse_schedule
from .detection import decode_quads, detection_loss, make_targets, stack_targets
from .geometry import Quad, is_valid_quad, nms_quads
from .model import TextSpotter
from .recognition import VocabularyError
from .roi import DegenerateQuadError, roi_align, solve_homography, image_to_feature
from .synth import TextSample, augment, read_dataset, render_sample
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

LOG_NAME = "loss_log.txt"
MAX_CANDIDATES = 2000


class TrainingAborted(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    total: Tensor
    det: float
    reg: float
    n_rois: int = 0


@dataclass
class TrainState:
    model: TextSpotter
    optimizer: "Adam"
    step: int = 0
    history: list = field(default_factory=list)   # (step, L_det, L_reg, L)


@dataclass
class Detection:
    quad: Quad
    text: str
    score: float


# ------------------------------------------------------------- optimizer
class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = 5.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return math.sqrt(total)

    def step(self) -> float:
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = (p.data - (self.lr * corr) * m / (np.sqrt(v) + self.eps)).astype(p.dtype)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim/m/{k}": v for k, v in self.m.items()}
        out.update({f"optim/v/{k}": v for k, v in self.v.items()})
        out["optim/t"] = np.array(float(self.t))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = arrays[f"optim/m/{k}"].copy()
            self.v[k] = arrays[f"optim/v/{k}"].copy()
        self.t = int(arrays["optim/t"])


# ------------------------------------------------------------ checkpoints
def save_checkpoint(path: str | Path, state: TrainState) -> None:
    arrays = dict(state.model.state_arrays())
    arrays.update(state.optimizer.state_arrays())
    arrays["meta/step"] = np.array(float(state.step))
    save_arrays(path, arrays)


def load_checkpoint(path: str | Path, cfg: RunConfig) -> TrainState:
    arrays = load_arrays(path)
    state = new_state(cfg)
    state.model.load_state_arrays(arrays)
    if "optim/t" in arrays:
        state.optimizer.load_state_arrays(arrays)
    state.step = int(arrays.get("meta/step", np.array(0.0)))
    return state


def load_model(path: str | Path, cfg: RunConfig) -> TextSpotter:
    model = TextSpotter(cfg.model, cfg.train.seed)
    model.load_state_arrays(load_arrays(path))
    return model.eval()


def new_state(cfg: RunConfig) -> TrainState:
    model = TextSpotter(cfg.model, cfg.train.seed)
    t = cfg.train
    opt = Adam(dict(model.named_parameters()), t.lr, t.adam_beta1, t.adam_beta2, t.adam_eps, t.clip_norm)
    return TrainState(model, opt)


# ------------------------------------------------------------------ data
def load_samples(cfg: RunConfig) -> list[TextSample]:
    d = cfg.data
    if d.path and Path(d.path).exists():
        return list(read_dataset(d.path))
    return [render_sample(d, k) for k in range(d.count)]


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Images for ``step``: consecutive slices of a per-epoch shuffled order."""
    per_epoch = max(1, -(-n // batch_size))
    epoch, slot = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    idx = order[slot * batch_size:(slot + 1) * batch_size]
    if len(idx) < batch_size:
        idx = np.concatenate([idx, order[:batch_size - len(idx)]])
    return idx


def make_batch(samples: Sequence[TextSample], idx: np.ndarray, cfg: RunConfig, step: int) -> list[TextSample]:
    batch = []
    for k, i in enumerate(idx):
        s = samples[int(i)]
        if cfg.train.augment:
            seed = int(np.random.SeedSequence([cfg.train.seed, step, k]).generate_state(1)[0])
            s = augment(s, seed, cfg.data.train_size)
        batch.append(s)
    return batch


# ------------------------------------------------------------------ loss
def _usable_roi(model: TextSpotter, inst, cfg: RunConfig) -> bool:
    if inst.ignore or not inst.text or not is_valid_quad(inst.quad.points, min_area=1.0):
        return False
    try:
        model.vocab.encode(inst.text)
        solve_homography(image_to_feature(inst.quad.points), 2, cfg.model.h_t)
    except (VocabularyError, DegenerateQuadError):
        return False
    return True


def sample_rois(model: TextSpotter, batch: Sequence[TextSample], cfg: RunConfig, step: int):
    """Ground-truth RoIs of the batch, at most ``rois_per_batch``, chosen by a step-seeded draw."""
    rois = [(b, inst) for b, s in enumerate(batch) for inst in s.instances if _usable_roi(model, inst, cfg)]
    cap = cfg.train.rois_per_batch
    if len(rois) > cap:
        pick = np.random.default_rng([cfg.train.seed, step, 7]).choice(len(rois), cap, replace=False)
        rois = [rois[i] for i in sorted(pick)]
    return rois


def total_loss(model: TextSpotter, batch: Sequence[TextSample], cfg: RunConfig, stage: str, step: int = 0) -> LossBreakdown:
    """``L_det + beta * L_reg`` for the given stage.

    ``det-only`` returns ``L_det``; ``recog-only`` returns ``beta * L_reg``.
    The recognition term is teacher-forced on ground-truth quads and is zero
    when the batch holds no usable instance or ``beta`` is zero.
    """
    images = np.stack([s.image for s in batch])
    fused = model.shared_features(images)
    lc = cfg.loss
    total = None
    det_val = 0.0
    if stage in ("det-only", "joint"):
        maps = model.detect(fused)
        hw = images.shape[1:3]
        targets = stack_targets([make_targets(s.annotations, hw, lc.n_d, lc.shrink) for s in batch])
        det = detection_loss(maps, targets, lc.lam).total
        total, det_val = det, float(det.data)
    reg_val, n_rois = 0.0, 0
    if stage in ("recog-only", "joint") and lc.beta > 0:
        rois = sample_rois(model, batch, cfg, step)
        n_rois = len(rois)
        if rois:
            rb = roi_align(fused.features, [(b, inst.quad.points) for b, inst in rois], cfg.model.h_t,
                           cfg.model.w_max)
            reg = model.recognizer.loss_batch(rb, [inst.text for _, inst in rois])
            reg_val = float(reg.data)
            term = reg * lc.beta
            total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros((), dtype=model.dtype))
    return LossBreakdown(total, det_val, reg_val, n_rois)


def stage_at(schedule: list[tuple[str, int]], step: int) -> str | None:
    for stage, steps in schedule:
        if step < steps:
            return stage
        step -= steps
    return None


# ----------------------------------------------------------------- train
def learning_rate(cfg: RunConfig, step: int, total_steps: int) -> float:
    t = cfg.train
    if t.lr_decay == "none" or total_steps <= 1:
        return t.lr
    frac = min(step / (total_steps - 1), 1.0)
    return t.lr_min + 0.5 * (t.lr - t.lr_min) * (1.0 + math.cos(math.pi * frac))


def _log_line(step: int, det: float, reg: float, total: float) -> str:
    return f"{step}\t{det:.9g}\t{reg:.9g}\t{total:.9g}\n"


def train(cfg: RunConfig, samples: Sequence[TextSample] | None = None, resume: str | Path | None = None,
          max_steps: int | None = None, time_budget: float | None = None, progress=None) -> TrainState:
    """Run the staged schedule, writing checkpoints and the loss log under ``cfg.train.out``.

    ``max_steps`` truncates the schedule; ``time_budget`` (seconds) stops early
    once exceeded. A non-finite loss aborts with :class:`TrainingAborted`,
    leaving the last good checkpoint in place and a ``diagnostic.txt`` dump.
    """
    cfg.validate()
    out = Path(cfg.train.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    samples = list(samples) if samples is not None else load_samples(cfg)
    if not samples:
        raise ValueError("training set is empty")
    schedule = parse_schedule(cfg.train.schedule)
    total_steps = sum(n for _, n in schedule)
    schedule_steps = total_steps
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    state = load_checkpoint(resume, cfg) if resume else new_state(cfg)
    state.model.train()
    log_path = out / LOG_NAME
    mode = "a" if resume else "w"
    started = time.monotonic()
    ckpt = out / "checkpoint.ckpt"
    with open(log_path, mode, encoding="utf-8") as log:
        while state.step < total_steps:
            step = state.step
            stage = stage_at(schedule, step)
            idx = batch_indices(len(samples), cfg.train.batch_size, step, cfg.train.seed)
            batch = make_batch(samples, idx, cfg, step)
            state.model.zero_grad()
            parts = total_loss(state.model, batch, cfg, stage, step)
            value = float(parts.total.data)
            if not math.isfinite(value):
                (out / "diagnostic.txt").write_text(
                    f"step={step}\nstage={stage}\nbatch={','.join(str(int(i)) for i in idx)}\n"
                    f"L_det={parts.det}\nL_reg={parts.reg}\n", encoding="utf-8")
                raise TrainingAborted(f"non-finite loss at step {step} (batch {idx.tolist()})")
            backward(parts.total)
            state.optimizer.lr = learning_rate(cfg, step, schedule_steps)
            state.optimizer.step()
            state.step += 1
            state.history.append((step, parts.det, parts.reg, value))
            log.write(_log_line(step, parts.det, parts.reg, value))
            if progress is not None:
                progress(state)
            if state.step % cfg.train.checkpoint_every == 0:
                log.flush()
                save_checkpoint(ckpt, state)
            if time_budget is not None and time.monotonic() - started > time_budget:
                logger.warning("time budget exhausted at step %d", state.step)
                break
    save_checkpoint(ckpt, state)
    return state


# ----------------------------------------------------------------- infer
def pad_image(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    h, w = image.shape[:2]
    ph, pw = -(-h // multiple) * multiple, -(-w // multiple) * multiple
    if (ph, pw) == (h, w):
        return image
    out = np.empty((ph, pw, image.shape[2]), dtype=image.dtype)
    out[...] = image.mean(axis=(0, 1))
    out[:h, :w] = image
    return out


def infer(model: TextSpotter, image: np.ndarray, cfg: RunConfig) -> list[Detection]:
    """Detect, suppress, rectify and read every text instance, best score first."""
    model.eval()
    padded = pad_image(np.asarray(image, dtype=np.float64))
    with no_grad():
        fused = model.shared_features(padded)
        maps = model.detect(fused)
        score = maps.score[0, ..., 0]
        geometry = maps.geometry.data[0]
        if (score > cfg.infer.score_thresh).sum() > MAX_CANDIDATES:
            # keep only the strongest pixels so suppression stays tractable
            cut = np.sort(score.ravel())[-MAX_CANDIDATES]
            score = np.where(score >= cut, score, 0.0)
        quads = decode_quads(score, geometry, cfg.infer.score_thresh, cfg.loss.n_d)
        kept = []
        for q in nms_quads(quads, cfg.infer.nms_thresh):
            try:
                solve_homography(image_to_feature(q.points), 2, cfg.model.h_t)
            except DegenerateQuadError:
                continue
            kept.append(q)
        if not kept:
            return []
        rb = roi_align(fused.features, [(0, q.points) for q in kept], cfg.model.h_t, cfg.model.w_max)
        texts = model.recognizer.greedy_decode_batch(rb, cfg.model.max_steps)
    dets = [Detection(q, text, q.score) for q, (text, _) in zip(kept, texts)]
    return sorted(dets, key=lambda d: -d.score)
