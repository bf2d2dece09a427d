"""Samples, on-disk datasets, and minibatch construction.

Two batching modes:

* ``subject_specific``: every minibatch comes from a single subject, so the
  negatives inside a batch differ in gaze rather than identity.
* ``mixed``: uniform draws over the whole dataset (the usual SimCLR batching).

An epoch is one minibatch per subject in both modes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import Eye, Landmarks
from .imagecore import load_png

ANNOTATIONS = "annotations.jsonl"
MODES = ("subject_specific", "mixed")


@dataclass(frozen=True)
class GazeLabel:
    pitch: float
    yaw: float

    def __post_init__(self):
        if abs(self.pitch) > math.pi / 2 or abs(self.yaw) > math.pi / 2:
            raise ValueError(f"gaze ({self.pitch}, {self.yaw}) outside +-pi/2")

    def as_array(self):
        return np.array([self.pitch, self.yaw])


@dataclass
class Sample:
    image: np.ndarray
    subject_id: str
    landmarks: Optional[Landmarks]
    gaze: Optional[GazeLabel] = None
    name: str = ""
    split: str = ""


class EmptyDatasetError(ValueError):
    pass


class Dataset:
    def __init__(self, samples):
        self.samples = list(samples)
        self.subject_index: dict[str, list[int]] = {}
        for i, s in enumerate(self.samples):
            self.subject_index.setdefault(s.subject_id, []).append(i)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def subjects(self) -> list[str]:
        return sorted(self.subject_index)

    def subset(self, subjects=None, split=None) -> "Dataset":
        keep = set(subjects) if subjects is not None else None
        return Dataset(
            s for s in self.samples
            if (keep is None or s.subject_id in keep) and (split is None or s.split == split)
        )

    def of_subject(self, subject_id) -> list[Sample]:
        return [self.samples[i] for i in self.subject_index[subject_id]]


def annotation_record(sample: Sample) -> dict:
    lm = sample.landmarks
    return {
        "image": sample.name,
        "subject": sample.subject_id,
        "left_eye": lm.left.to_json() if lm else None,
        "right_eye": lm.right.to_json() if lm else None,
        "gaze": None if sample.gaze is None else {"pitch": sample.gaze.pitch, "yaw": sample.gaze.yaw},
        "split": sample.split,
    }


def sample_from_record(rec: dict, image: np.ndarray) -> Sample:
    lm = None
    if rec.get("left_eye") and rec.get("right_eye"):
        lm = Landmarks(Eye.from_json(rec["left_eye"]), Eye.from_json(rec["right_eye"]))
    g = rec.get("gaze")
    return Sample(
        image=image,
        subject_id=str(rec["subject"]),
        landmarks=lm,
        gaze=None if g is None else GazeLabel(float(g["pitch"]), float(g["yaw"])),
        name=rec["image"],
        split=rec.get("split", ""),
    )


def load_dataset(root, subjects=None, split=None) -> Dataset:
    """Read ``<root>/<subject>/<image>.png`` plus ``<root>/annotations.jsonl``.

    The ``image`` field of each record is the path relative to ``root``.
    """
    root = Path(root)
    samples = []
    with open(root / ANNOTATIONS, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if subjects is not None and str(rec["subject"]) not in subjects:
                continue
            if split is not None and rec.get("split", "") != split:
                continue
            samples.append(sample_from_record(rec, load_png(root / rec["image"])))
    if not samples:
        raise EmptyDatasetError(f"no samples found under {root}")
    return Dataset(samples)


@dataclass
class SamplerConfig:
    batch_size: int = 128
    mode: str = "subject_specific"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class SamplerState:
    epoch: int = 0
    position: int = 0
    last_indices: list = field(default_factory=list)


def epoch_plan(ds: Dataset, cfg: SamplerConfig, epoch: int) -> list[str]:
    rng = np.random.default_rng([cfg.seed, epoch, 0x5EED])
    subjects = ds.subjects
    return [subjects[i] for i in rng.permutation(len(subjects))]


def batches_per_epoch(ds: Dataset) -> int:
    return len(ds.subject_index)


def next_minibatch(ds: Dataset, cfg: SamplerConfig, state: SamplerState) -> list[Sample]:
    """Draw the minibatch at ``state`` and advance the cursor."""
    if len(ds) == 0 or not ds.subject_index:
        raise EmptyDatasetError("cannot sample from an empty dataset")
    n = cfg.batch_size
    rng = np.random.default_rng([cfg.seed, state.epoch, state.position, 1])
    if cfg.mode == "subject_specific":
        subject = epoch_plan(ds, cfg, state.epoch)[state.position]
        pool = np.asarray(ds.subject_index[subject])
        idx = pool[rng.choice(len(pool), size=n, replace=len(pool) < n)]
    else:
        idx = rng.choice(len(ds), size=n, replace=len(ds) < n)
    state.last_indices = [int(i) for i in idx]
    state.position += 1
    if state.position >= batches_per_epoch(ds):
        state.epoch += 1
        state.position = 0
    return [ds.samples[i] for i in idx]
