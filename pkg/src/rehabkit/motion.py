"""Skeletal motion ingestion: session files, validation, smoothing, segmentation.

A session file holds one subject performing one exercise on one side:
timed 3D joint positions plus manually annotated repetition windows with
per-component quality scores. Sessions are segmented into per-repetition
``MotionClip`` values; a centered moving-average filter is applied per
joint axis after slicing and before any feature use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

# Fixed joint registry (Kinect v2 subset). Order is part of the file format.
JOINTS = (
    "Head",
    "SpineShoulder",
    "SpineMid",
    "HipCenter",
    "ShoulderLeft",
    "ShoulderRight",
    "ElbowLeft",
    "ElbowRight",
    "WristLeft",
    "WristRight",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}

# Bone set used for the positive-length invariant (clavicles excluded:
# shoulder elevation legitimately stretches them).
BONES = (
    ("Head", "SpineShoulder"),
    ("SpineShoulder", "SpineMid"),
    ("SpineMid", "HipCenter"),
    ("ShoulderLeft", "ElbowLeft"),
    ("ElbowLeft", "WristLeft"),
    ("ShoulderRight", "ElbowRight"),
    ("ElbowRight", "WristRight"),
)

EXERCISES = ("E1", "E2", "E3")
SIDES = ("affected", "unaffected", "dominant")
GROUPS = ("stroke", "healthy")
COMPONENTS = ("rom", "smoothness", "compensation")

SMOOTH_WINDOW = 5
MIN_CLIP_FRAMES = 5


class SessionError(ValueError):
    """Malformed or invariant-violating session data; message carries the field path."""


@dataclass(frozen=True)
class Labels:
    """Per-repetition quality scores, one per performance component."""

    rom: int
    smoothness: int
    compensation: int

    def __post_init__(self):
        for comp in COMPONENTS:
            score = getattr(self, comp)
            if score not in (0, 1, 2):
                raise SessionError(f"labels.{comp}: score {score!r} not in {{0,1,2}}")

    def score(self, component: str) -> int:
        if component not in COMPONENTS:
            raise ValueError(f"unknown component {component!r}")
        return getattr(self, component)

    def binary(self, component: str, threshold: int = 2) -> int:
        """1 = acceptable quality, 0 = not. Default rule: full score only."""
        if not 1 <= threshold <= 2:
            raise ValueError("threshold must be 1 or 2")
        return int(self.score(component) >= threshold)


@dataclass(frozen=True)
class Repetition:
    start: int
    end: int  # inclusive frame index
    labels: Optional[Labels]


@dataclass
class Session:
    """One recording: subject metadata plus timed frames and annotated repetitions."""

    subject_id: str
    group: str
    fugl_meyer: Optional[int]
    exercise: str
    side: str
    fps: float
    times: np.ndarray  # (T,) seconds, strictly increasing
    positions: np.ndarray  # (T, 10, 3) meters
    repetitions: list[Repetition] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.times.shape[0]

    def validate(self) -> "Session":
        if self.group not in GROUPS:
            raise SessionError(f"subject.group: {self.group!r} not in {GROUPS}")
        if self.exercise not in EXERCISES:
            raise SessionError(f"exercise: {self.exercise!r} not in {EXERCISES}")
        if self.side not in SIDES:
            raise SessionError(f"side: {self.side!r} not in {SIDES}")
        if self.fugl_meyer is not None and not 0 <= int(self.fugl_meyer) <= 66:
            raise SessionError(f"subject.fugl_meyer: {self.fugl_meyer!r} outside 0..66")
        if not self.fps > 0:
            raise SessionError(f"fps: {self.fps!r} must be > 0")
        if self.times.ndim != 1 or self.n_frames == 0:
            raise SessionError("frames: empty frame list")
        if self.positions.shape != (self.n_frames, len(JOINTS), 3):
            raise SessionError(
                f"frames: positions shape {self.positions.shape} != "
                f"({self.n_frames}, {len(JOINTS)}, 3)"
            )
        if not np.all(np.isfinite(self.times)) or not np.all(np.isfinite(self.positions)):
            raise SessionError("frames: non-finite time or position value")
        if self.n_frames > 1 and not np.all(np.diff(self.times) > 0):
            bad = int(np.argmin(np.diff(self.times) > 0))
            raise SessionError(f"frames[{bad + 1}].t: times not strictly increasing")
        for a, b in BONES:
            seg = self.positions[:, JOINT_INDEX[a]] - self.positions[:, JOINT_INDEX[b]]
            if np.any(np.linalg.norm(seg, axis=1) <= 0):
                raise SessionError(f"frames: zero-length bone {a}-{b}")
        prev_end = -1
        for k, rep in enumerate(self.repetitions):
            if not (0 <= rep.start < rep.end < self.n_frames):
                raise SessionError(
                    f"repetitions[{k}]: range [{rep.start}, {rep.end}] invalid for "
                    f"{self.n_frames} frames"
                )
            if rep.start <= prev_end:
                raise SessionError(f"repetitions[{k}]: overlaps previous repetition")
            prev_end = rep.end
        return self


@dataclass
class MotionClip:
    """One repetition: a contiguous, already-smoothed slice of a session."""

    motion_id: str
    subject_id: str
    group: str
    exercise: str
    side: str
    fps: float
    times: np.ndarray  # (T,) absolute seconds from the parent session
    positions: np.ndarray  # (T, 10, 3) raw
    smoothed: np.ndarray  # (T, 10, 3) moving-average filtered
    labels: Optional[Labels]

    @property
    def n_frames(self) -> int:
        return self.times.shape[0]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def joint(self, name: str, smoothed: bool = True) -> np.ndarray:
        src = self.smoothed if smoothed else self.positions
        return src[:, JOINT_INDEX[name]]


def smooth(series: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centered moving average with truncated windows at the boundaries.

    Output length equals input length; frame i averages the samples within
    ``window // 2`` of i that exist.
    """
    series = np.asarray(series, dtype=float)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    n = series.shape[0]
    if n < window:
        raise ValueError(f"series length {n} shorter than window {window}")
    if window == 1:
        return series.copy()
    kernel = np.ones(window)
    sums = np.convolve(series, kernel, mode="same")
    counts = np.convolve(np.ones(n), kernel, mode="same")
    return sums / counts


def smooth_positions(positions: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Apply ``smooth`` independently to every joint axis of a (T, J, 3) array."""
    out = np.empty_like(positions, dtype=float)
    for j in range(positions.shape[1]):
        for ax in range(3):
            out[:, j, ax] = smooth(positions[:, j, ax], window)
    return out


def segment(session: Session, window: int = SMOOTH_WINDOW) -> list[MotionClip]:
    """Slice a session into one smoothed clip per annotated repetition."""
    clips = []
    for k, rep in enumerate(session.repetitions):
        n = rep.end - rep.start + 1
        if n < MIN_CLIP_FRAMES:
            raise SessionError(
                f"repetitions[{k}]: {n} frames, need >= {MIN_CLIP_FRAMES} for smoothing"
            )
        sl = slice(rep.start, rep.end + 1)
        raw = session.positions[sl].copy()
        clips.append(
            MotionClip(
                motion_id=f"{session.subject_id}_{session.exercise}_{session.side}_r{k:02d}",
                subject_id=session.subject_id,
                group=session.group,
                exercise=session.exercise,
                side=session.side,
                fps=session.fps,
                times=session.times[sl].copy(),
                positions=raw,
                smoothed=smooth_positions(raw, window),
                labels=rep.labels,
            )
        )
    return clips


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise SessionError(f"{path}: missing field {key!r}")
    return obj[key]


def session_from_dict(doc: dict) -> Session:
    """Build and validate a Session from the JSON document structure."""
    if not isinstance(doc, dict):
        raise SessionError("root: expected a JSON object")
    subject = _require(doc, "subject", "root")
    joints = _require(doc, "joints", "root")
    if list(joints) != list(JOINTS):
        missing = [j for j in JOINTS if j not in joints]
        extra = [j for j in joints if j not in JOINTS]
        detail = f"missing {missing}" if missing else f"unexpected {extra}"
        raise SessionError(f"joints: order or content mismatch ({detail})")
    frames = _require(doc, "frames", "root")
    if not frames:
        raise SessionError("frames: empty frame list")
    times = np.empty(len(frames), dtype=float)
    positions = np.empty((len(frames), len(JOINTS), 3), dtype=float)
    for i, fr in enumerate(frames):
        times[i] = _require(fr, "t", f"frames[{i}]")
        pos = _require(fr, "pos", f"frames[{i}]")
        if len(pos) != len(JOINTS):
            raise SessionError(
                f"frames[{i}].pos: {len(pos)} joints, expected {len(JOINTS)} "
                f"(missing {JOINTS[len(pos)]})"
                if len(pos) < len(JOINTS)
                else f"frames[{i}].pos: {len(pos)} joints, expected {len(JOINTS)}"
            )
        for j, triple in enumerate(pos):
            if len(triple) != 3:
                raise SessionError(f"frames[{i}].pos[{j}]: expected [x, y, z]")
            positions[i, j] = triple
    reps = []
    for k, rep in enumerate(doc.get("repetitions", [])):
        labels = None
        if "labels" in rep and rep["labels"] is not None:
            lab = rep["labels"]
            try:
                labels = Labels(
                    rom=int(_require(lab, "rom", f"repetitions[{k}].labels")),
                    smoothness=int(_require(lab, "smoothness", f"repetitions[{k}].labels")),
                    compensation=int(_require(lab, "compensation", f"repetitions[{k}].labels")),
                )
            except SessionError as exc:
                raise SessionError(f"repetitions[{k}].{exc}") from None
        reps.append(
            Repetition(
                start=int(_require(rep, "start", f"repetitions[{k}]")),
                end=int(_require(rep, "end", f"repetitions[{k}]")),
                labels=labels,
            )
        )
    fm = subject.get("fugl_meyer")
    return Session(
        subject_id=str(_require(subject, "id", "subject")),
        group=_require(subject, "group", "subject"),
        fugl_meyer=None if fm is None else int(fm),
        exercise=_require(doc, "exercise", "root"),
        side=_require(doc, "side", "root"),
        fps=float(_require(doc, "fps", "root")),
        times=times,
        positions=positions,
        repetitions=reps,
    ).validate()


def session_to_dict(session: Session) -> dict:
    """Inverse of ``session_from_dict``; floats survive a JSON round trip bit-exactly."""
    return {
        "subject": {
            "id": session.subject_id,
            "group": session.group,
            "fugl_meyer": session.fugl_meyer,
        },
        "exercise": session.exercise,
        "side": session.side,
        "fps": session.fps,
        "joints": list(JOINTS),
        "frames": [
            {"t": float(session.times[i]), "pos": session.positions[i].tolist()}
            for i in range(session.n_frames)
        ],
        "repetitions": [
            {
                "start": rep.start,
                "end": rep.end,
                **(
                    {
                        "labels": {
                            "rom": rep.labels.rom,
                            "smoothness": rep.labels.smoothness,
                            "compensation": rep.labels.compensation,
                        }
                    }
                    if rep.labels is not None
                    else {}
                ),
            }
            for rep in session.repetitions
        ],
    }


def load_session(path) -> Session:
    """Load and validate a session file. Raises SessionError with a field path."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SessionError(f"parse failure in {path.name}: {exc}") from None
    return session_from_dict(doc)


def save_session(session: Session, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(session_to_dict(session), fh, separators=(",", ":"))
        fh.write("\n")


def load_sessions(directory) -> list[Session]:
    """Load every ``*.json`` session in a directory, sorted by filename."""
    directory = Path(directory)
    return [load_session(p) for p in sorted(directory.glob("*.json"))]
