"""Symmetry-aware pose metrics, segmentation F-scores, and breakdown reports.

A prediction counts as correct when its rotation error is at most 15
degrees and its translation error at most 5 cm (defaults). Rotation errors
absorb each object's declared symmetry group; deformable and fully
symmetric objects are excluded from rotation aggregates entirely.
Predictions under the confidence floor are dropped and only reported
through recall, mirroring how the robot consumes the scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, SceneMismatch, ValidationError
from .geometry import RigidTransform, rotation_about_axis, rotation_angle_deg
from .posefit import Symmetry


@dataclass(frozen=True)
class EvalConfig:
    rotation_tolerance: float = 15.0     # degrees
    translation_tolerance: float = 0.05  # meters
    confidence_floor: float = 0.0

    def __post_init__(self):
        if self.rotation_tolerance <= 0 or self.translation_tolerance <= 0:
            raise ValidationError("tolerances must be positive")


@dataclass(frozen=True)
class SegScore:
    precision: float
    recall: float
    f_score: float

    @staticmethod
    def from_counts(tp: int, pred_total: int, truth_total: int) -> "SegScore":
        p = tp / pred_total if pred_total else 0.0
        r = tp / truth_total if truth_total else 0.0
        f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        return SegScore(p, r, f)


def translation_error(pred: RigidTransform, truth: RigidTransform) -> float:
    return float(np.linalg.norm(pred.translation - truth.translation))


def rotation_error(pred: RigidTransform, truth: RigidTransform,
                   symmetry: Symmetry = Symmetry()) -> float:
    """Orientation error in degrees, minimized over the symmetry group."""
    if symmetry.kind == "full":
        return 0.0
    if symmetry.kind == "radial":
        a = np.asarray(symmetry.axis)
        pa = pred.rotation @ a
        ta = truth.rotation @ a
        s = np.linalg.norm(np.cross(pa, ta))
        c = float(np.dot(pa, ta))
        return math.degrees(math.atan2(s, c))
    if symmetry.kind == "axial":
        best = 360.0
        for k in range(symmetry.order):
            spun = truth.rotation @ rotation_about_axis(symmetry.axis,
                                                        360.0 * k / symmetry.order)
            best = min(best, rotation_angle_deg(pred.rotation @ spun.T))
        return best
    return rotation_angle_deg(pred.rotation @ truth.rotation.T)


def seg_f_score(pred_mask, truth_mask) -> SegScore:
    """Pixel-wise precision/recall/F for one object mask pair."""
    pred = np.asarray(pred_mask, dtype=bool)
    truth = np.asarray(truth_mask, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    return SegScore.from_counts(tp, int(pred.sum()), int(truth.sum()))


@dataclass(frozen=True)
class TruthInstance:
    class_id: int
    instance_id: int
    pose: RigidTransform
    occlusion: float = 0.0
    deformable: bool = False
    thin: bool = False
    no_depth: bool = False


@dataclass(frozen=True)
class GroundTruthScene:
    scene_id: str
    environment: str            # office | warehouse
    task: str                   # shelf | tote
    instances: tuple

    def __post_init__(self):
        if self.environment not in ("office", "warehouse"):
            raise ValidationError(f"unknown environment {self.environment!r}")
        if self.task not in ("shelf", "tote"):
            raise ValidationError(f"unknown task {self.task!r}")

    @property
    def clutter(self) -> int:
        return len(self.instances)


def _clutter_bucket(n: int) -> str:
    if n <= 3:
        return "clutter:1-3"
    if n <= 5:
        return "clutter:4-5"
    return "clutter:6+"


def _occlusion_bucket(f: float) -> str:
    pct = f * 100.0
    if pct < 5.0:
        return "occl:<5"
    if pct < 30.0:
        return "occl:5-30"
    return "occl:30+"


BUCKET_ORDER = ["all", "env:office", "env:warehouse", "task:shelf", "task:tote",
                "clutter:1-3", "clutter:4-5", "clutter:6+",
                "occl:<5", "occl:5-30", "occl:30+",
                "prop:deformable", "prop:no_depth", "prop:thin"]


@dataclass
class BucketStat:
    rot_correct: int = 0
    rot_total: int = 0
    trans_correct: int = 0
    trans_total: int = 0
    instances: int = 0           # all truth instances in this bucket
    joint_correct: int = 0       # scored, translation ok, rotation ok or exempt

    def pct(self, which: str):
        n, d = {"rot": (self.rot_correct, self.rot_total),
                "trans": (self.trans_correct, self.trans_total)}[which]
        return None if d == 0 else 100.0 * n / d


@dataclass
class EvalReport:
    config: EvalConfig
    buckets: dict
    total_instances: int
    scored: int
    records: list = field(default_factory=list)

    @property
    def recall(self) -> float:
        return self.scored / self.total_instances if self.total_instances else 0.0

    @property
    def success_overall(self) -> float:
        """Joint success over every truth instance; unscored counts as failure."""
        if self.total_instances == 0:
            return 0.0
        return self.buckets["all"].joint_correct / self.total_instances

    def to_dict(self) -> dict:
        out = {"rotation_tolerance_deg": self.config.rotation_tolerance,
               "translation_tolerance_m": self.config.translation_tolerance,
               "confidence_floor": self.config.confidence_floor,
               "total_instances": self.total_instances,
               "scored": self.scored,
               "recall": self.recall,
               "success_overall": self.success_overall,
               "buckets": {}}
        for name in BUCKET_ORDER:
            b = self.buckets[name]
            out["buckets"][name] = {
                "rotation_pct": b.pct("rot"), "translation_pct": b.pct("trans"),
                "rot_total": b.rot_total, "trans_total": b.trans_total,
                "instances": b.instances,
            }
        return out

    def text_table(self, label: str = "") -> str:
        return format_report_table({label or "result": self})


def format_report_table(reports: dict) -> str:
    """Aligned text table, one rot/trans row pair per labeled report."""
    headers = ["algorithm", "metric"] + [b.split(":")[-1] for b in BUCKET_ORDER] + ["recall"]
    rows = []
    for label, rep in reports.items():
        for which in ("rot", "trans"):
            cells = [label, which + "."]
            for name in BUCKET_ORDER:
                v = rep.buckets[name].pct(which)
                cells.append("-" if v is None else f"{v:.1f}")
            cells.append(f"{100 * rep.recall:.1f}" if which == "rot" else "")
            rows.append(cells)
    widths = [max(len(str(r[i])) for r in rows + [headers]) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    for r in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def _greedy_match(preds, truths):
    """Pair predictions with truth instances of the same class by distance."""
    pairs = []
    for i, p in enumerate(preds):
        for j, t in enumerate(truths):
            pairs.append((translation_error(p.pose, t.pose), i, j))
    pairs.sort(key=lambda x: (x[0], x[1], x[2]))
    used_p, used_t, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        out.append((preds[i], truths[j]))
    return out


def evaluate(preds_by_scene, truths_by_scene, models: dict,
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Score predictions against ground truth with symmetry absorption.

    Predictions with confidence below the floor (or method "failed") are
    dropped before scoring; they show up only through recall. Instances of
    duplicate classes are paired with truth greedily by translation error.
    """
    if set(preds_by_scene.keys()) != set(truths_by_scene.keys()):
        raise SceneMismatch("prediction and truth scene ids do not align")
    buckets = {name: BucketStat() for name in BUCKET_ORDER}
    records = []
    total_instances = 0
    scored = 0
    for scene_id in sorted(preds_by_scene.keys()):
        truth = truths_by_scene[scene_id]
        preds = preds_by_scene[scene_id]
        total_instances += len(truth.instances)
        kept = [p for p in preds
                if p.method != "failed" and p.confidence >= cfg.confidence_floor]
        by_class = {}
        for t in truth.instances:
            by_class.setdefault(t.class_id, ([], []))[1].append(t)
        for p in kept:
            if p.class_id in by_class:
                by_class[p.class_id][0].append(p)
        scene_buckets = ["all", f"env:{truth.environment}", f"task:{truth.task}",
                         _clutter_bucket(truth.clutter)]
        matched_truths = set()
        for class_id, (ps, ts) in sorted(by_class.items()):
            for pred, t in _greedy_match(ps, ts):
                matched_truths.add(id(t))
                model = models.get(class_id)
                sym = model.symmetry if model is not None else Symmetry()
                rot_exempt = t.deformable or sym.kind == "full"
                r_err = rotation_error(pred.pose, t.pose, sym)
                t_err = translation_error(pred.pose, t.pose)
                rot_ok = r_err <= cfg.rotation_tolerance
                trans_ok = t_err <= cfg.translation_tolerance
                joint = trans_ok and (rot_ok or rot_exempt)
                scored += 1
                names = scene_buckets + [_occlusion_bucket(t.occlusion)]
                if t.deformable:
                    names.append("prop:deformable")
                if t.no_depth:
                    names.append("prop:no_depth")
                if t.thin:
                    names.append("prop:thin")
                for name in names:
                    b = buckets[name]
                    b.instances += 1
                    b.trans_total += 1
                    b.trans_correct += int(trans_ok)
                    if not rot_exempt:
                        b.rot_total += 1
                        b.rot_correct += int(rot_ok)
                    b.joint_correct += int(joint)
                records.append({"scene_id": scene_id, "class_id": class_id,
                                "instance_id": t.instance_id,
                                "rotation_error_deg": r_err,
                                "translation_error_m": t_err,
                                "rotation_ok": rot_ok, "translation_ok": trans_ok,
                                "confidence": pred.confidence, "method": pred.method})
        # unmatched truth instances still occupy their buckets as failures
        for t in truth.instances:
            if id(t) in matched_truths:
                continue
            names = scene_buckets + [_occlusion_bucket(t.occlusion)]
            if t.deformable:
                names.append("prop:deformable")
            if t.no_depth:
                names.append("prop:no_depth")
            if t.thin:
                names.append("prop:thin")
            for name in names:
                buckets[name].instances += 1
    return EvalReport(cfg, buckets, total_instances, scored, records)


def save_report(path, report: EvalReport):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
