"""Kinematic feature extraction for the three performance components.

Each motion clip yields a frame-level feature matrix (one column per frame
formula) that is summarized into a fixed-order feature vector with the
statistics max, min, range, mean, and population std, plus two clip-level
smoothness measures (mean arrest period ratio and duration).

Conventions fixed here:
- lengths are normalized by the trunk length at the clip's first frame,
  L = ||SpineShoulder - HipCenter||, so features are subject-size invariant;
- derivatives use central differences on the actual frame time stamps
  (one-sided at the boundaries);
- normalized speed/acceleration divide by the clip's peak absolute value
  (zero peak gives a zero series);
- angles are reported in degrees and computed with atan2 for stability
  near 0 and 180 degrees.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .motion import COMPONENTS, EXERCISES, JOINT_INDEX, MotionClip

STATS = ("max", "min", "range", "mean", "std")

# (formula id, clinical display name, units) per component, in registry order.
# Clinical names follow the therapist-reviewed renaming convention.
ROM_FORMULAS = (
    ("elbow_flexion", "Elbow flexion angle", "deg"),
    ("shoulder_flexion", "Shoulder flexion angle", "deg"),
    ("elbow_extension", "Elbow extension angle", "deg"),
    ("head_wrist_dist", "Distance between hand and head", "trunk-lengths"),
    ("head_elbow_dist", "Distance between elbow and head", "trunk-lengths"),
    ("head_wrist_dx", "Hand to head offset, sideways", "trunk-lengths"),
    ("head_wrist_dy", "Hand to head offset, vertical", "trunk-lengths"),
    ("head_wrist_dz", "Hand to head offset, forward", "trunk-lengths"),
    ("shoulder_wrist_dx", "Hand to shoulder offset, sideways", "trunk-lengths"),
    ("shoulder_wrist_dy", "Hand to shoulder offset, vertical", "trunk-lengths"),
    ("shoulder_wrist_dz", "Hand to shoulder offset, forward", "trunk-lengths"),
)
SMOOTHNESS_FORMULAS = (
    ("wrist_speed", "Hand movement speed", "m/s"),
    ("wrist_accel", "Hand movement acceleration", "m/s^2"),
    ("wrist_jerk", "Hand movement jerkiness", "m/s^3"),
    ("elbow_speed", "Elbow movement speed", "m/s"),
    ("elbow_accel", "Elbow movement acceleration", "m/s^2"),
    ("elbow_jerk", "Elbow movement jerkiness", "m/s^3"),
    ("wrist_speed_norm", "Hand speed relative to peak", "ratio"),
    ("wrist_accel_norm", "Hand acceleration relative to peak", "ratio"),
    ("elbow_speed_norm", "Elbow speed relative to peak", "ratio"),
    ("elbow_accel_norm", "Elbow acceleration relative to peak", "ratio"),
)
COMPENSATION_FORMULAS = (
    ("shoulder_elevation", "Elevated shoulder", "deg"),
    ("spine_tilt", "Tilted trunk", "deg"),
    ("shoulder_abduction", "Shoulder abduction angle", "deg"),
    ("head_disp_x", "Leaning head to the side", "trunk-lengths"),
    ("head_disp_y", "Raising or dropping the head", "trunk-lengths"),
    ("head_disp_z", "Leaning head forward or backward", "trunk-lengths"),
    ("spine_disp_x", "Leaning trunk to the side", "trunk-lengths"),
    ("spine_disp_y", "Raising or dropping the trunk", "trunk-lengths"),
    ("spine_disp_z", "Leaning trunk forward or backward", "trunk-lengths"),
    ("shoulder_disp_x", "Shifting shoulder to the side", "trunk-lengths"),
    ("shoulder_disp_y", "Elevated shoulder position", "trunk-lengths"),
    ("shoulder_disp_z", "Moving shoulder forward or backward", "trunk-lengths"),
)
_FORMULAS = {
    "rom": ROM_FORMULAS,
    "smoothness": SMOOTHNESS_FORMULAS,
    "compensation": COMPENSATION_FORMULAS,
}
# Clip-level smoothness features appended after the per-frame statistics.
CLIP_LEVEL = {
    "smoothness": (
        ("mapr", "Mean Arrest Period Ratio", "ratio"),
        ("duration", "Movement duration", "s"),
    ),
}


@dataclass(frozen=True)
class FeatureDescriptor:
    """One entry of the summary-feature registry."""

    id: str
    component: str
    formula: str  # frame-level column id; "clip" for clip-level features
    statistic: str  # max | min | range | mean | std | value
    clinical_name: str
    units: str


@dataclass
class FeatureMatrix:
    """Frame-level feature values for one clip: shape (t, d)."""

    values: np.ndarray
    columns: tuple[str, ...]
    times: np.ndarray

    def __post_init__(self):
        t, d = self.values.shape
        if d != len(self.columns) or t != self.times.shape[0]:
            raise ValueError("feature matrix shape inconsistent with columns/times")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")

    def column(self, formula: str) -> np.ndarray:
        return self.values[:, self.columns.index(formula)]


def registry(exercise: str, component: str) -> list[FeatureDescriptor]:
    """Summary-feature registry for one (exercise, component) model.

    The formula set is shared across exercises; the exercise argument is kept
    to pin the pairing under which models and agents are trained.
    """
    if exercise not in EXERCISES:
        raise ValueError(f"unknown exercise {exercise!r}")
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    out = []
    for formula, clinical, units in _FORMULAS[component]:
        for stat in STATS:
            out.append(
                FeatureDescriptor(
                    id=f"{formula}_{stat}",
                    component=component,
                    formula=formula,
                    statistic=stat,
                    clinical_name=clinical,
                    units=units,
                )
            )
    for feat_id, clinical, units in CLIP_LEVEL.get(component, ()):
        out.append(
            FeatureDescriptor(
                id=feat_id,
                component=component,
                formula="clip",
                statistic="value",
                clinical_name=clinical,
                units=units,
            )
        )
    return out


def registry_ids(exercise: str, component: str) -> list[str]:
    return [d.id for d in registry(exercise, component)]


def joint_angle(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    """Interior angle at vertex b, in degrees, within [0, 180]."""
    u = np.asarray(a, float) - np.asarray(b, float)
    v = np.asarray(c, float) - np.asarray(b, float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("degenerate zero-length limb vector")
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v))))


def _angles_between(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise angle in degrees between (T, 3) vector series."""
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise ValueError("degenerate zero-length limb vector")
    cross = np.linalg.norm(np.cross(u, v), axis=1)
    dot = np.einsum("ij,ij->i", u, v)
    return np.degrees(np.arctan2(cross, dot))


def active_arm(clip: MotionClip) -> str:
    """Pick the performing arm as the wrist with the longer travelled path."""
    left = clip.joint("WristLeft")
    right = clip.joint("WristRight")
    left_len = np.sum(np.linalg.norm(np.diff(left, axis=0), axis=1))
    right_len = np.sum(np.linalg.norm(np.diff(right, axis=0), axis=1))
    return "left" if left_len > right_len else "right"


def mapr(speed: np.ndarray) -> float:
    """Fraction of frames whose speed exceeds 10% of the maximum speed."""
    speed = np.asarray(speed, float)
    if speed.size == 0:
        raise ValueError("empty speed series")
    if np.any(speed < 0):
        raise ValueError("speed must be nonnegative")
    peak = float(np.max(speed))
    if peak == 0.0:
        return 0.0
    return float(np.count_nonzero(speed > 0.10 * peak)) / speed.size


def _derivative(series: np.ndarray, times: np.ndarray) -> np.ndarray:
    return np.gradient(series, times, axis=0)


def _normalized_by_peak(series: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(series)))
    if peak == 0.0:
        return np.zeros_like(series)
    return series / peak


def frame_features(
    clip: MotionClip, exercise: str, component: str, arm: str = "auto"
) -> FeatureMatrix:
    """Compute the per-frame feature matrix of a smoothed clip."""
    if exercise not in EXERCISES:
        raise ValueError(f"unknown exercise {exercise!r}")
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    if arm == "auto":
        arm = active_arm(clip)
    if arm not in ("left", "right"):
        raise ValueError(f"arm must be left/right/auto, got {arm!r}")
    side = arm.capitalize()

    t = clip.times
    head = clip.joint("Head")
    spine_mid = clip.joint("SpineMid")
    spine_sh = clip.joint("SpineShoulder")
    hip = clip.joint("HipCenter")
    shoulder = clip.joint(f"Shoulder{side}")
    elbow = clip.joint(f"Elbow{side}")
    wrist = clip.joint(f"Wrist{side}")

    trunk_len = float(np.linalg.norm(spine_sh[0] - hip[0]))
    if trunk_len <= 0:
        raise ValueError("degenerate trunk length at the first frame")

    cols: dict[str, np.ndarray] = {}
    if component == "rom":
        flexion = _angles_between(shoulder - elbow, wrist - elbow)
        cols["elbow_flexion"] = flexion
        cols["shoulder_flexion"] = _angles_between(elbow - shoulder, hip - spine_sh)
        cols["elbow_extension"] = 180.0 - flexion
        cols["head_wrist_dist"] = np.linalg.norm(head - wrist, axis=1) / trunk_len
        cols["head_elbow_dist"] = np.linalg.norm(head - elbow, axis=1) / trunk_len
        for axis, name in enumerate("xyz"):
            cols[f"head_wrist_d{name}"] = np.abs(head[:, axis] - wrist[:, axis]) / trunk_len
            cols[f"shoulder_wrist_d{name}"] = (
                np.abs(shoulder[:, axis] - wrist[:, axis]) / trunk_len
            )
    elif component == "smoothness":
        for joint_name, pos in (("wrist", wrist), ("elbow", elbow)):
            vel = _derivative(pos, t)
            acc = _derivative(vel, t)
            jerk = _derivative(acc, t)
            cols[f"{joint_name}_speed"] = np.linalg.norm(vel, axis=1)
            cols[f"{joint_name}_accel"] = np.linalg.norm(acc, axis=1)
            cols[f"{joint_name}_jerk"] = np.linalg.norm(jerk, axis=1)
        for joint_name in ("wrist", "elbow"):
            cols[f"{joint_name}_speed_norm"] = _normalized_by_peak(cols[f"{joint_name}_speed"])
            cols[f"{joint_name}_accel_norm"] = _normalized_by_peak(cols[f"{joint_name}_accel"])
    else:  # compensation
        elev = (shoulder[:, 1] - shoulder[0, 1]) / trunk_len
        cols["shoulder_elevation"] = np.degrees(np.arcsin(np.clip(elev, -1.0, 1.0)))
        trunk = spine_sh - hip
        cols["spine_tilt"] = _angles_between(trunk, np.broadcast_to(trunk[0], trunk.shape))
        upper = elbow - shoulder
        down = hip - spine_sh
        # frontal (x-y) plane projection for abduction
        upper_f = upper.copy()
        upper_f[:, 2] = 0.0
        down_f = down.copy()
        down_f[:, 2] = 0.0
        if np.any(np.linalg.norm(upper_f, axis=1) == 0) or np.any(
            np.linalg.norm(down_f, axis=1) == 0
        ):
            cols["shoulder_abduction"] = np.zeros(clip.n_frames)
        else:
            cols["shoulder_abduction"] = _angles_between(upper_f, down_f)
        for joint_name, pos in (("head", head), ("spine", spine_mid), ("shoulder", shoulder)):
            for axis, name in enumerate("xyz"):
                cols[f"{joint_name}_disp_{name}"] = (
                    np.abs(pos[:, axis] - pos[0, axis]) / trunk_len
                )

    order = tuple(f for f, _, _ in _FORMULAS[component])
    values = np.column_stack([cols[f] for f in order])
    return FeatureMatrix(values=values, columns=order, times=t)


def summarize(matrix: FeatureMatrix, exercise: str, component: str) -> np.ndarray:
    """Summarize a frame matrix into the registry-ordered feature vector."""
    parts = []
    for formula, _, _ in _FORMULAS[component]:
        col = matrix.column(formula)
        stats = {
            "max": float(np.max(col)),
            "min": float(np.min(col)),
            "range": float(np.max(col) - np.min(col)),
            "mean": float(np.mean(col)),
            "std": float(np.std(col)),  # population std, deterministic choice
        }
        parts.extend(stats[s] for s in STATS)
    for feat_id, _, _ in CLIP_LEVEL.get(component, ()):
        if feat_id == "mapr":
            parts.append(mapr(matrix.column("wrist_speed")))
        elif feat_id == "duration":
            parts.append(float(matrix.times[-1] - matrix.times[0]))
    vector = np.array(parts, dtype=float)
    expected = len(registry(exercise, component))
    if vector.shape[0] != expected:
        raise AssertionError(f"vector length {vector.shape[0]} != registry size {expected}")
    return vector


def extract_features(
    clip: MotionClip, component: str, arm: str = "auto"
) -> np.ndarray:
    """frame_features + summarize in one call."""
    matrix = frame_features(clip, clip.exercise, component, arm=arm)
    return summarize(matrix, clip.exercise, component)


def write_registry_csv(path, exercise: str = "E1") -> None:
    """Export all components' registries: id, component, statistic, clinical_name, units."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "component", "statistic", "clinical_name", "units"])
        for component in COMPONENTS:
            for d in registry(exercise, component):
                writer.writerow([d.id, d.component, d.statistic, d.clinical_name, d.units])
