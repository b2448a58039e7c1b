"""Deterministic synthetic exercise sessions with controllable impairments.

Stands in for the clinical recordings: seated subjects perform the three
upper-limb exercises with parameterized range-of-motion deficits, tremor,
and compensation patterns. Labels are derived from the generating
parameters through fixed, versioned thresholds so downstream experiments
are stable across releases.

Movement model: per-repetition planar arm angles driven by a smooth
reach-and-return profile; tremor perturbs the arm angles (so bone lengths
stay constant) with a wrist displacement amplitude given in meters;
compensation elevates the shoulder and/or leans the trunk. Sensor noise is
white positional noise at the configured floor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .motion import (
    JOINTS,
    JOINT_INDEX,
    Labels,
    MotionClip,
    Repetition,
    Session,
    save_session,
    segment,
)

COMPENSATION_MODES = ("none", "shoulder-elevation", "trunk-lean", "both")

_EXERCISE_CODE = {"E1": 1, "E2": 2, "E3": 3}

# Versioned label thresholds: score 0 above the first value, 1 above the
# second, else 2. Tremor thresholds are wrist-displacement meters.
ROM_THRESHOLDS = (0.5, 0.2)
TREMOR_THRESHOLDS = (0.015, 0.006)
COMPENSATION_THRESHOLDS = (0.5, 0.2)

# Peak movement angles (radians): (shoulder flexion, elbow flexion swing).
_TEMPLATES = {
    "E1": {"shoulder": 0.30, "elbow_from": 0.0, "elbow_swing": 2.45},
    "E2": {"shoulder": 1.90, "elbow_from": 0.17, "elbow_swing": 0.0},
    "E3": {"shoulder": 0.45, "elbow_from": 1.57, "elbow_swing": -1.22},
}

_SHOULDER_LIFT_M = 0.08  # shoulder elevation at magnitude 1.0
_TRUNK_LEAN_RAD = 0.35  # trunk lean at magnitude 1.0
_REST_GAP_S = 0.4


@dataclass(frozen=True)
class BodyDims:
    trunk: float
    head: float
    shoulder_halfwidth: float
    upper_arm: float
    forearm: float
    hip_height: float
    seat_x: float
    seat_z: float


@dataclass(frozen=True)
class SubjectProfile:
    """Generation parameters for one subject performing with one arm."""

    subject_id: str
    seed: int
    group: str  # healthy | stroke
    side: str  # dominant | affected | unaffected
    arm: str  # left | right
    dims: BodyDims
    tempo: float  # seconds per repetition
    rom_deficit: float  # in [0, 1]
    tremor_amplitude: float  # meters at the wrist
    tremor_frequency: float  # Hz
    compensation_mode: str
    compensation_magnitude: float  # in [0, 1]

    def __post_init__(self):
        if not 0.0 <= self.rom_deficit <= 1.0:
            raise ValueError("rom_deficit must be within [0, 1]")
        if self.tremor_amplitude < 0 or self.compensation_magnitude < 0:
            raise ValueError("impairment magnitudes must be nonnegative")
        if self.compensation_mode not in COMPENSATION_MODES:
            raise ValueError(f"unknown compensation mode {self.compensation_mode!r}")


@dataclass(frozen=True)
class GeneratorConfig:
    """Dataset-level knobs; the defaults mirror the training-corpus scale."""

    seed: int = 7
    healthy_subjects: int = 11
    stroke_subjects: int = 15
    healthy_reps: int = 15
    stroke_reps: int = 10
    exercises: tuple[str, ...] = ("E1", "E2", "E3")
    fps: float = 30.0
    noise_floor: float = 0.001

    def __post_init__(self):
        if min(self.healthy_subjects, self.stroke_subjects) < 1:
            raise ValueError("subject counts must be >= 1")
        if min(self.healthy_reps, self.stroke_reps) < 1:
            raise ValueError("repetition counts must be >= 1")


def _score(value: float, thresholds: tuple[float, float]) -> int:
    hi, lo = thresholds
    if value > hi:
        return 0
    if value > lo:
        return 1
    return 2


def _sample_dims(rng: np.random.Generator) -> BodyDims:
    s = rng.uniform(0.9, 1.1)
    return BodyDims(
        trunk=0.45 * s,
        head=0.25 * s,
        shoulder_halfwidth=0.19 * s,
        upper_arm=0.30 * s,
        forearm=0.27 * s,
        hip_height=0.90,
        seat_x=rng.uniform(-0.15, 0.15),
        seat_z=rng.uniform(-0.10, 0.10),
    )


def _impaired_levels(rng: np.random.Generator) -> tuple[float, float, float]:
    """Sample (rom deficit, tremor amplitude, compensation magnitude).

    Each component independently draws a mild or severe band; the bands keep
    a margin around the label thresholds so per-repetition jitter (10%)
    never crosses a score boundary.
    """
    deficit = rng.uniform(0.28, 0.44) if rng.random() < 0.5 else rng.uniform(0.56, 0.85)
    tremor = rng.uniform(0.008, 0.013) if rng.random() < 0.5 else rng.uniform(0.017, 0.022)
    comp = rng.uniform(0.26, 0.44) if rng.random() < 0.5 else rng.uniform(0.56, 0.85)
    return deficit, tremor, comp


def subject_profiles(config: GeneratorConfig) -> list[SubjectProfile]:
    """All profiles of a dataset: healthy dominants plus two per stroke subject."""
    profiles = []
    for i in range(config.healthy_subjects):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0, i]))
        dims = _sample_dims(rng)
        profiles.append(
            SubjectProfile(
                subject_id=f"h{i + 1:02d}",
                seed=config.seed * 1000 + i,
                group="healthy",
                side="dominant",
                arm="left" if i % 4 == 3 else "right",
                dims=dims,
                tempo=rng.uniform(2.2, 3.0),
                rom_deficit=rng.uniform(0.0, 0.08),
                tremor_amplitude=rng.uniform(0.0, 0.0025),
                tremor_frequency=rng.uniform(2.5, 4.0),
                compensation_mode="none",
                compensation_magnitude=rng.uniform(0.0, 0.08),
            )
        )
    for i in range(config.stroke_subjects):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, i]))
        dims = _sample_dims(rng)
        tempo = rng.uniform(2.4, 3.2)
        affected_arm = "left" if i % 3 == 0 else "right"
        deficit, tremor, comp = _impaired_levels(rng)
        mode = rng.choice(["shoulder-elevation", "trunk-lean", "both"])
        subject_id = f"s{i + 1:02d}"
        profiles.append(
            SubjectProfile(
                subject_id=subject_id,
                seed=config.seed * 1000 + 500 + i,
                group="stroke",
                side="affected",
                arm=affected_arm,
                dims=dims,
                tempo=tempo * (1.0 + 0.5 * deficit),
                rom_deficit=deficit,
                tremor_amplitude=tremor,
                tremor_frequency=rng.uniform(2.5, 4.0),
                compensation_mode=str(mode),
                compensation_magnitude=comp,
            )
        )
        profiles.append(
            SubjectProfile(
                subject_id=subject_id,
                seed=config.seed * 1000 + 750 + i,
                group="stroke",
                side="unaffected",
                arm="right" if affected_arm == "left" else "left",
                dims=dims,
                tempo=tempo,
                rom_deficit=rng.uniform(0.0, 0.10),
                tremor_amplitude=rng.uniform(0.0, 0.003),
                tremor_frequency=rng.uniform(2.5, 4.0),
                compensation_mode="none",
                compensation_magnitude=rng.uniform(0.0, 0.10),
            )
        )
    return profiles


def _rest_pose(dims: BodyDims) -> np.ndarray:
    """Seated neutral pose, arms hanging; rows follow the joint registry order."""
    hip = np.array([dims.seat_x, dims.hip_height, dims.seat_z])
    spine_sh = hip + np.array([0.0, dims.trunk, 0.0])
    pose = np.zeros((len(JOINTS), 3))
    pose[JOINT_INDEX["HipCenter"]] = hip
    pose[JOINT_INDEX["SpineMid"]] = hip + np.array([0.0, 0.55 * dims.trunk, 0.0])
    pose[JOINT_INDEX["SpineShoulder"]] = spine_sh
    pose[JOINT_INDEX["Head"]] = spine_sh + np.array([0.0, dims.head, 0.0])
    for side, sign in (("Left", -1.0), ("Right", 1.0)):
        shoulder = spine_sh + np.array([sign * dims.shoulder_halfwidth, -0.02, 0.0])
        pose[JOINT_INDEX[f"Shoulder{side}"]] = shoulder
        pose[JOINT_INDEX[f"Elbow{side}"]] = shoulder + np.array([0.0, -dims.upper_arm, 0.0])
        pose[JOINT_INDEX[f"Wrist{side}"]] = (
            shoulder + np.array([0.0, -(dims.upper_arm + dims.forearm), 0.0])
        )
    return pose


def _arm_dir(angle: float | np.ndarray) -> np.ndarray:
    """Unit direction in the sagittal plane, measured from straight down."""
    angle = np.asarray(angle, dtype=float)
    return np.stack(
        [np.zeros_like(angle), -np.cos(angle), np.sin(angle)], axis=-1
    )


def _lean(points: np.ndarray, hip: np.ndarray, beta: float) -> np.ndarray:
    """Rotate points about the hip in the frontal (x-y) plane by beta radians."""
    rel = points - hip
    c, s = np.cos(beta), np.sin(beta)
    out = rel.copy()
    out[..., 0] = c * rel[..., 0] - s * rel[..., 1]
    out[..., 1] = s * rel[..., 0] + c * rel[..., 1]
    return out + hip


@dataclass(frozen=True)
class _RepDraw:
    """Per-repetition effective parameters (base values plus bounded jitter)."""

    deficit: float
    tremor_amp: float
    tremor_freq: float
    tremor_phase: float
    comp_mag: float
    duration: float


def _draw_rep(profile: SubjectProfile, rng: np.random.Generator) -> _RepDraw:
    jit = lambda v: float(v * rng.uniform(0.9, 1.1))
    return _RepDraw(
        deficit=min(1.0, jit(profile.rom_deficit)),
        tremor_amp=jit(profile.tremor_amplitude),
        tremor_freq=jit(profile.tremor_frequency),
        tremor_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        comp_mag=jit(profile.compensation_magnitude),
        duration=jit(profile.tempo),
    )


def _labels_for(draw: _RepDraw) -> Labels:
    return Labels(
        rom=_score(draw.deficit, ROM_THRESHOLDS),
        smoothness=_score(draw.tremor_amp, TREMOR_THRESHOLDS),
        compensation=_score(draw.comp_mag, COMPENSATION_THRESHOLDS),
    )


def _rep_frames(
    profile: SubjectProfile, exercise: str, draw: _RepDraw, fps: float
) -> np.ndarray:
    """Noise-free frames of one repetition, shape (T, 10, 3)."""
    template = _TEMPLATES[exercise]
    dims = profile.dims
    n = max(int(round(draw.duration * fps)), 8)
    t = np.arange(n) / fps
    p = np.linspace(0.0, 1.0, n)
    bump = 0.5 * (1.0 - np.cos(2.0 * np.pi * p))
    amp = 1.0 - draw.deficit

    phi = template["shoulder"] * amp * bump
    flex = template["elbow_from"] + template["elbow_swing"] * amp * bump
    # tremor enters through the angles so limb lengths stay exact
    if draw.tremor_amp > 0:
        wobble = np.sin(2.0 * np.pi * draw.tremor_freq * t + draw.tremor_phase)
        phi = phi + 0.15 * (draw.tremor_amp / (dims.upper_arm + dims.forearm)) * wobble
        flex = flex + (draw.tremor_amp / dims.forearm) * wobble

    base = _rest_pose(dims)
    frames = np.repeat(base[None, :, :], n, axis=0)

    side = profile.arm.capitalize()
    shoulder0 = base[JOINT_INDEX[f"Shoulder{side}"]].copy()
    elevation = np.zeros(n)
    if profile.compensation_mode in ("shoulder-elevation", "both"):
        elevation = _SHOULDER_LIFT_M * draw.comp_mag * bump
    shoulder = np.repeat(shoulder0[None, :], n, axis=0)
    shoulder[:, 1] += elevation
    psi = phi + flex
    elbow = shoulder + dims.upper_arm * _arm_dir(phi)
    wrist = elbow + dims.forearm * _arm_dir(psi)
    frames[:, JOINT_INDEX[f"Shoulder{side}"]] = shoulder
    frames[:, JOINT_INDEX[f"Elbow{side}"]] = elbow
    frames[:, JOINT_INDEX[f"Wrist{side}"]] = wrist

    if profile.compensation_mode in ("trunk-lean", "both"):
        # lean toward the performing side
        sign = -1.0 if profile.arm == "left" else 1.0
        beta = sign * _TRUNK_LEAN_RAD * draw.comp_mag * bump
        hip = base[JOINT_INDEX["HipCenter"]]
        upper = [i for i, name in enumerate(JOINTS) if name != "HipCenter"]
        for k in range(n):
            frames[k, upper] = _lean(frames[k, upper], hip, float(beta[k]))
    return frames


def generate_clip(
    profile: SubjectProfile, exercise: str, rep_index: int, fps: float = 30.0,
    noise_floor: float = 0.001,
) -> MotionClip:
    """One standalone labeled repetition clip (already smoothed)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([profile.seed, _EXERCISE_CODE[exercise], rep_index])
    )
    draw = _draw_rep(profile, rng)
    frames = _rep_frames(profile, exercise, draw, fps)
    frames = frames + rng.normal(0.0, noise_floor, size=frames.shape)
    n = frames.shape[0]
    session = Session(
        subject_id=profile.subject_id,
        group=profile.group,
        fugl_meyer=None,
        exercise=exercise,
        side=profile.side,
        fps=fps,
        times=np.arange(n) / fps,
        positions=frames,
        repetitions=[Repetition(start=0, end=n - 1, labels=_labels_for(draw))],
    ).validate()
    return segment(session)[0]


def generate_session(
    profile: SubjectProfile,
    exercise: str,
    reps: int,
    fps: float = 30.0,
    noise_floor: float = 0.001,
    fugl_meyer: Optional[int] = None,
) -> Session:
    """A full annotated session: repetitions separated by short rest gaps."""
    gap = max(int(round(_REST_GAP_S * fps)), 2)
    rest = _rest_pose(profile.dims)
    chunks = [np.repeat(rest[None, :, :], gap, axis=0)]
    repetitions = []
    cursor = gap
    for r in range(reps):
        rng = np.random.default_rng(
            np.random.SeedSequence([profile.seed, _EXERCISE_CODE[exercise], r])
        )
        draw = _draw_rep(profile, rng)
        frames = _rep_frames(profile, exercise, draw, fps)
        chunks.append(frames)
        repetitions.append(
            Repetition(start=cursor, end=cursor + frames.shape[0] - 1, labels=_labels_for(draw))
        )
        chunks.append(np.repeat(rest[None, :, :], gap, axis=0))
        cursor += frames.shape[0] + gap
    positions = np.concatenate(chunks, axis=0)
    noise_rng = np.random.default_rng(
        np.random.SeedSequence([profile.seed, _EXERCISE_CODE[exercise], 99991])
    )
    positions = positions + noise_rng.normal(0.0, noise_floor, size=positions.shape)
    return Session(
        subject_id=profile.subject_id,
        group=profile.group,
        fugl_meyer=fugl_meyer,
        exercise=exercise,
        side=profile.side,
        fps=fps,
        times=np.arange(positions.shape[0]) / fps,
        positions=positions,
        repetitions=repetitions,
    ).validate()


def generate_dataset(config: GeneratorConfig, out_dir) -> list[Path]:
    """Write every session file plus a manifest CSV; returns the file list."""
    out_dir = Path(out_dir)
    sessions_dir = out_dir / "sessions"
    sessions_dir.mkdir(parents=True, exist_ok=True)
    profiles = subject_profiles(config)
    by_subject: dict[str, list[SubjectProfile]] = {}
    for p in profiles:
        by_subject.setdefault(p.subject_id, []).append(p)

    fm_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    fm_scores = {
        sid: int(fm_rng.integers(10, 60))
        for sid in sorted(by_subject)
        if sid.startswith("s")
    }

    paths = []
    manifest_rows = []
    for sid in sorted(by_subject):
        for profile in by_subject[sid]:
            if profile.group == "healthy":
                reps, fm = config.healthy_reps, None
            else:
                reps, fm = config.stroke_reps, fm_scores[sid]
            for exercise in config.exercises:
                session = generate_session(
                    profile,
                    exercise,
                    reps,
                    fps=config.fps,
                    noise_floor=config.noise_floor,
                    fugl_meyer=fm,
                )
                path = sessions_dir / f"{sid}_{exercise}_{profile.side}.json"
                save_session(session, path)
                paths.append(path)
                for r, rep in enumerate(session.repetitions):
                    manifest_rows.append(
                        [
                            path.name,
                            sid,
                            profile.group,
                            exercise,
                            profile.side,
                            r,
                            rep.labels.rom,
                            rep.labels.smoothness,
                            rep.labels.compensation,
                        ]
                    )
    with (out_dir / "manifest.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["file", "subject", "group", "exercise", "side", "rep", "rom", "smoothness", "compensation"]
        )
        writer.writerows(manifest_rows)
    return paths
