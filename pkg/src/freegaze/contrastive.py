"""Contrastive pretraining, supervised calibration and gaze-error metrics."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import NonFiniteError
from .augment import AugmentConfig, augment_view
from .freqdct import batch_image_to_dct
from .nnet import (Adam, ArchitectureSpec, build_embedding, gaze_estimator, load_checkpoint,
                   projection_head, save_checkpoint)
from .nnet.arch import ResNet18Rgb
from .sampler import Dataset, SamplerConfig, SamplerState, batches_per_epoch, next_minibatch

log = logging.getLogger(__name__)


class ZeroVectorError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class MissingLabelError(InsufficientDataError):
    pass


# ---------------------------------------------------------------- loss

def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVectorError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _normalize(z):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVectorError("zero projection vector in contrastive loss")
    return z / norms, norms


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(a, axis):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def ntxent_loss(zp, zq, tau=0.5):
    """Cross-view normalized-temperature cross-entropy.

    For each anchor ``zp[i]`` the candidates are all ``zq[k]`` (k = i is the
    positive), and symmetrically for ``zq[i]``; the two directions are
    averaged over the 2N anchors. Returns ``(loss, d_zp, d_zq)``, computed in
    float64.
    """
    zp = np.asarray(zp, dtype=np.float64)
    zq = np.asarray(zq, dtype=np.float64)
    n = zp.shape[0]
    if n < 2 or zq.shape != zp.shape:
        raise ValueError(f"need two matching sets of >= 2 vectors, got {zp.shape} and {zq.shape}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    p, npn = _normalize(zp)
    q, nqn = _normalize(zq)
    s = p @ q.T / tau  # s[i, k] = sim(zp_i, zq_k) / tau
    diag = np.diag(s)
    loss = (-2 * diag.sum() + _logsumexp(s, 1).sum() + _logsumexp(s, 0).sum()) / (2 * n)
    ds = (_softmax(s, 1) + _softmax(s, 0) - 2 * np.eye(n)) / (2 * n)
    dp = ds @ q / tau
    dq = ds.T @ p / tau
    dzp = (dp - p * (p * dp).sum(1, keepdims=True)) / npn
    dzq = (dq - q * (q * dq).sum(1, keepdims=True)) / nqn
    return float(loss), dzp, dzq


# ---------------------------------------------------------------- metrics

def gaze_vectors(pitch_yaw) -> np.ndarray:
    py = np.atleast_2d(np.asarray(pitch_yaw, dtype=np.float64))
    p, y = py[:, 0], py[:, 1]
    return np.stack([np.cos(p) * np.sin(y), np.sin(p), np.cos(p) * np.cos(y)], axis=1)


def angular_error(pred, truth) -> np.ndarray | float:
    """Angle in degrees between gaze directions given as (pitch, yaw) radians.

    Accepts ``GazeLabel`` objects, pairs, or (n, 2) arrays.
    """
    scalar = hasattr(pred, "pitch") or np.ndim(pred) == 1
    a = gaze_vectors(pred.as_array() if hasattr(pred, "as_array") else pred)
    b = gaze_vectors(truth.as_array() if hasattr(truth, "as_array") else truth)
    err = np.degrees(np.arccos(np.clip((a * b).sum(axis=1), -1.0, 1.0)))
    return float(err[0]) if scalar else err


def distance_error(theta_deg, d_cm, alpha_deg=0.0) -> float:
    if alpha_deg < 0:
        raise ValueError("gaze angle alpha must be non-negative")
    if alpha_deg + theta_deg >= 90:
        raise ValueError("alpha + theta must stay below 90 degrees")
    return d_cm * (math.tan(math.radians(alpha_deg + theta_deg)) - math.tan(math.radians(alpha_deg)))


@dataclass
class GazeErrorReport:
    subject_id: str
    errors_deg: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors_deg)) if len(self.errors_deg) else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.errors_deg)) if len(self.errors_deg) else float("nan")

    def eps(self, d_cm, alpha_deg=0.0) -> float:
        return distance_error(self.mean, d_cm, alpha_deg)

    def eps_curve(self, d_cm, alphas=np.arange(0, 31)) -> np.ndarray:
        return np.array([self.eps(d_cm, a) for a in alphas])

    def _eps_or_nan(self, d_cm) -> float:
        # an untrained estimator can miss by >= 90 degrees, where the distance error is undefined
        m = self.mean
        return self.eps(d_cm) if math.isfinite(m) and m < 90 else float("nan")

    def row(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "n_test": len(self.errors_deg),
            "mean_angular_deg": f"{self.mean:.6f}",
            "std_angular_deg": f"{self.std:.6f}",
            "eps_cm_d30_a0": f"{self._eps_or_nan(30):.6f}",
            "eps_cm_d50_a0": f"{self._eps_or_nan(50):.6f}",
        }


REPORT_FIELDS = ["subject_id", "n_test", "mean_angular_deg", "std_angular_deg", "eps_cm_d30_a0", "eps_cm_d50_a0"]


def write_report(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


# ---------------------------------------------------------------- state

@dataclass
class LossConfig:
    temperature: float = 0.5
    lr: float = 0.01
    decay: float = 0.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class CalibrationConfig:
    lr: float = 0.002
    decay: float = 0.0
    epochs: int = 60
    batch_size: int = 25
    n_finetune: int = 75
    n_validation: int = 25
    freeze_embedding: bool = False
    seed: int = 0


@dataclass
class TrainState:
    spec: ArchitectureSpec
    embedding: object
    projection: Optional[object] = None
    estimator: Optional[object] = None
    optimizer: Adam = field(default_factory=Adam)
    epoch: int = 0
    step: int = 0
    seed: int = 0
    flags: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, spec: ArchitectureSpec, seed: int = 0, lr: float = 0.01, decay: float = 0.0,
                with_projection: bool = True) -> "TrainState":
        emb = build_embedding(spec, seed)
        proj = projection_head(spec.feature_dim, seed) if with_projection else None
        return cls(spec=spec, embedding=emb, projection=proj, optimizer=Adam(lr=lr, decay=decay), seed=seed)

    def modules(self) -> dict:
        out = {"embedding": self.embedding}
        if self.projection is not None:
            out["projection"] = self.projection
        if self.estimator is not None:
            out["estimator"] = self.estimator
        return out

    def params(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, mod in self.modules().items() for k, v in mod.named_params()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, mod in self.modules().items() for k, v in mod.named_grads()}

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"{m}.{k}": v for m, mod in self.modules().items() for k, v in mod.state_tensors().items()}
        out.update(self.optimizer.state_tensors())
        return out

    def save(self, path) -> None:
        header = {
            "architecture": self.spec.to_json(),
            "width": self.spec.width,
            "modules": list(self.modules()),
            "optimizer": self.optimizer.hyper(),
            "seed": self.seed,
            "epoch": self.epoch,
            "step": self.step,
            "flags": self.flags,
            "metadata": self.metadata,
        }
        save_checkpoint(path, header, self.tensors())

    @classmethod
    def load(cls, path) -> "TrainState":
        header, tensors = load_checkpoint(path)
        spec = ArchitectureSpec(**header["architecture"])
        st = cls(spec=spec, embedding=build_embedding(spec, header["seed"]), seed=header["seed"],
                 epoch=header["epoch"], step=header["step"], flags=header.get("flags", {}),
                 metadata=header.get("metadata", {}))
        mods = header["modules"]
        if "projection" in mods:
            st.projection = projection_head(spec.feature_dim)
        if "estimator" in mods:
            st.estimator = gaze_estimator(spec.feature_dim)
        for name, mod in st.modules().items():
            pre = name + "."
            mod.load_tensors({k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)})
        st.optimizer = Adam.from_hyper(header["optimizer"])
        st.optimizer.load_tensors(tensors)
        return st


# ---------------------------------------------------------------- data plumbing

def network_inputs(spec: ArchitectureSpec, images: np.ndarray):
    if spec.name == "resnet18_rgb":
        return np.asarray(images, dtype=np.float32)
    return batch_image_to_dct(images, spec.cy, spec.cc)


def _split_inputs(inputs, n):
    if isinstance(inputs, tuple):
        return tuple(a[:n] for a in inputs), tuple(a[n:] for a in inputs)
    return inputs[:n], inputs[n:]


def _take(inputs, idx):
    if isinstance(inputs, tuple):
        return tuple(a[idx] for a in inputs)
    return inputs[idx]


def embed(state: TrainState, images, batch: int = 256) -> np.ndarray:
    """Eval-mode representations h for a stack of images."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for i in range(0, len(images), batch):
        out.append(state.embedding.forward(network_inputs(state.spec, images[i:i + batch]), train=False))
    return np.concatenate(out).astype(np.float64)


def predict_gaze(state: TrainState, images, batch: int = 256) -> np.ndarray:
    if state.estimator is None:
        raise ValueError("state has no gaze estimator; run calibration first")
    h = embed(state, images, batch)
    return state.estimator.forward(h.astype(state.estimator.dtype), train=False).astype(np.float64)


def view_rng(seed, epoch, position, slot) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, position, slot, 0xA06])


def build_views(batch, aug: AugmentConfig, seed, epoch, position):
    vp, vq = [], []
    for slot, s in enumerate(batch):
        rp = view_rng(seed, epoch, position, 2 * slot)
        rq = view_rng(seed, epoch, position, 2 * slot + 1)
        vp.append(augment_view(s.image, s.landmarks, aug, rp)[0])
        vq.append(augment_view(s.image, s.landmarks, aug, rq)[0])
    return np.stack(vp), np.stack(vq)


# ---------------------------------------------------------------- pretraining

LOG_FIELDS = ["step", "epoch", "loss", "lr", "seconds"]


def pretrain(ds: Dataset, spec: ArchitectureSpec, loss_cfg: LossConfig, sampler_cfg: SamplerConfig,
             aug_cfg: AugmentConfig, epochs: int, seed: int = 0, state: Optional[TrainState] = None,
             log_path=None, batch_log: Optional[list] = None) -> TrainState:
    """Contrastive pretraining of embedding + projection head.

    ``batch_log``, when given, receives the sample indices of every minibatch.
    """
    if state is None:
        state = TrainState.initial(spec, seed, loss_cfg.lr, loss_cfg.decay)
    state.flags.update({"sampling": sampler_cfg.mode, "temperature": loss_cfg.temperature})
    cursor = SamplerState(epoch=state.epoch, position=0)
    per_epoch = batches_per_epoch(ds)
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    try:
        end = state.epoch + epochs
        while state.epoch < end:
            state.optimizer.epoch = state.epoch
            for _ in range(per_epoch):
                t0 = time.perf_counter()
                ep, pos = cursor.epoch, cursor.position
                batch = next_minibatch(ds, sampler_cfg, cursor)
                if batch_log is not None:
                    batch_log.append(list(cursor.last_indices))
                vp, vq = build_views(batch, aug_cfg, seed, ep, pos)
                loss = _contrastive_step(state, np.concatenate([vp, vq]), len(batch), loss_cfg.temperature)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"loss became non-finite at step {state.step}")
                state.step += 1
                if writer:
                    writer.writerow([state.step, state.epoch, f"{loss:.6f}",
                                     f"{state.optimizer.current_lr:.6g}", f"{time.perf_counter() - t0:.4f}"])
                state.metadata.setdefault("loss_trace", []).append(round(loss, 6))
            state.epoch += 1
            log.info("epoch %d loss %.4f", state.epoch, state.metadata["loss_trace"][-1])
    finally:
        if fh:
            fh.close()
    return state


def _contrastive_step(state: TrainState, views: np.ndarray, n: int, tau: float) -> float:
    emb, head = state.embedding, state.projection
    emb.zero_grad()
    head.zero_grad()
    inputs = network_inputs(state.spec, views)
    h = emb.forward(inputs, train=True)
    z = head.forward(h, train=True)
    loss, dzp, dzq = ntxent_loss(z[:n], z[n:], tau)
    dz = np.concatenate([dzp, dzq]).astype(z.dtype)
    emb.backward(head.backward(dz))
    state.optimizer.step(state.params(), state.grads())
    return loss


# ---------------------------------------------------------------- calibration

def calibration_split(samples, n_finetune=75, n_validation=25, seed=0):
    """Seeded partition of one subject's labelled samples into fine-tune /
    validation / test lists."""
    order = np.random.default_rng([seed, 0xCA1]).permutation(len(samples))
    pick = [samples[i] for i in order]
    return pick[:n_finetune], pick[n_finetune:n_finetune + n_validation], pick[n_finetune + n_validation:]


def _labels(samples):
    if any(s.gaze is None for s in samples):
        missing = next(s.name for s in samples if s.gaze is None)
        raise MissingLabelError(f"sample {missing!r} has no gaze label")
    return np.array([[s.gaze.pitch, s.gaze.yaw] for s in samples])


def mean_angular_error(state: TrainState, samples) -> float:
    pred = predict_gaze(state, np.stack([s.image for s in samples]))
    return float(np.mean(angular_error(pred, _labels(samples))))


def calibrate(state: TrainState, finetune, validation, cfg: CalibrationConfig) -> TrainState:
    """Fine-tune embedding + a fresh gaze estimator with MSE on (pitch, yaw).

    The projection head is dropped. Returns a new state holding the
    parameters with the lowest validation angular error seen at the end of
    any epoch (epoch 0 = before training).
    """
    if len(finetune) < 2:
        raise InsufficientDataError(f"need at least 2 fine-tuning samples, got {len(finetune)}")
    if not validation:
        raise InsufficientDataError("calibration needs a non-empty validation set")
    spec = state.spec
    emb = build_embedding(spec, state.seed)
    emb.load_tensors(state.embedding.state_tensors())
    est = gaze_estimator(spec.feature_dim, cfg.seed)
    cal = TrainState(spec=spec, embedding=emb, estimator=est,
                     optimizer=Adam(lr=cfg.lr, decay=cfg.decay), seed=state.seed,
                     flags=dict(state.flags, calibrated=True, freeze_embedding=cfg.freeze_embedding),
                     metadata={"pretrain_epochs": state.epoch, "pretrain_steps": state.step})
    x = network_inputs(spec, np.stack([s.image for s in finetune]))
    y = _labels(finetune).astype(np.float32)
    val_images = np.stack([s.image for s in validation])
    val_y = _labels(validation)
    rng = np.random.default_rng([cfg.seed, 0xCA2])
    n = len(finetune)
    bs = max(2, min(cfg.batch_size, n))

    def val_error():
        pred = predict_gaze(cal, val_images)
        return float(np.mean(angular_error(pred, val_y)))

    best_err, best = val_error(), _snapshot(cal)
    history = [best_err]
    for epoch in range(cfg.epochs):
        cal.optimizer.epoch = epoch
        order = rng.permutation(n)
        for i in range(0, n - bs + 1, bs) if n >= bs else [0]:
            idx = order[i:i + bs]
            emb.zero_grad()
            est.zero_grad()
            h = emb.forward(_take(x, idx), train=not cfg.freeze_embedding)
            pred = est.forward(h, train=True)
            dpred = (2.0 / pred.size) * (pred - y[idx])
            dh = est.backward(dpred.astype(pred.dtype))
            if cfg.freeze_embedding:
                params = {f"estimator.{k}": v for k, v in est.named_params()}
                grads = {f"estimator.{k}": v for k, v in est.named_grads()}
            else:
                emb.backward(dh)
                params, grads = cal.params(), cal.grads()
            cal.optimizer.step(params, grads)
            cal.step += 1
        cal.epoch = epoch + 1
        err = val_error()
        history.append(err)
        if err <= best_err:
            best_err, best = err, _snapshot(cal)
    _restore(cal, best)
    cal.metadata.update({"val_history": [round(e, 6) for e in history], "best_val_deg": best_err,
                         "final_val_deg": history[-1]})
    return cal


def _snapshot(state: TrainState):
    return {k: v.copy() for k, v in state.tensors().items() if not k.startswith("adam.")}, state.epoch


def _restore(state: TrainState, snap):
    tensors, epoch = snap
    for name, mod in state.modules().items():
        pre = name + "."
        mod.load_tensors({k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)})
    state.metadata["best_epoch"] = epoch


def evaluate(state: TrainState, subject_id: str, test_samples) -> GazeErrorReport:
    if not test_samples:
        return GazeErrorReport(subject_id, np.zeros(0))
    pred = predict_gaze(state, np.stack([s.image for s in test_samples]))
    return GazeErrorReport(subject_id, angular_error(pred, _labels(test_samples)))


# ---------------------------------------------------------------- embedding geometry

def pair_distance_gap(h: np.ndarray) -> tuple[float, float]:
    """Mean Euclidean distances for a (subjects, gazes, D) embedding grid.

    Returns ``(same_gaze_cross_subject, same_subject_cross_gaze)``.
    """
    s, g, _ = h.shape
    cross_subject = [np.linalg.norm(h[a, k] - h[b, k]) for k in range(g) for a in range(s) for b in range(a + 1, s)]
    cross_gaze = [np.linalg.norm(h[a, i] - h[a, j]) for a in range(s) for i in range(g) for j in range(i + 1, g)]
    return float(np.mean(cross_subject)), float(np.mean(cross_gaze))
