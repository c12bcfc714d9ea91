"""Iterative human-in-the-loop annotation engine.

A round drives each case through a fixed state machine::

    pending -> auto_segmented -> [revised] -> accepted

The 2D draft at the prompt slice goes to a revision oracle (a human UI or
a scripted stand-in), which also supplies the lesion's top/bottom slice
range; the refined slice is then propagated in 3D, revised again, and
accepted.  Hard-case selection compares the two prompt routes (3D box vs
per-slice boxes) and flags the largest disagreement per patient group.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import dsc
from .preprocess import resample
from .propagate import segment_3d, segment_per_slice_boxes
from .volume import BoundingBox2D, BoundingBox3D, LabelMask, SliceRange, VoxelGrid

STATUSES = ("pending", "auto_segmented", "revised", "accepted")
_LEGAL_TRANSITIONS = {
    ("pending", "auto_segmented"),
    ("auto_segmented", "revised"),
    ("revised", "revised"),
    ("auto_segmented", "accepted"),
    ("revised", "accepted"),
}


class StateError(RuntimeError):
    pass


@dataclass
class AnnotationRound:
    round_index: int
    case_ids: list
    model_checkpoint_ref: str = ""
    status: dict = field(default_factory=dict)
    per_case_time_log: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        for cid in self.case_ids:
            self.status.setdefault(cid, "pending")

    def transition(self, case_id, new_status, event_log=None, actor="pipeline"):
        old = self.status.get(case_id)
        if old is None:
            raise StateError(f"unknown case {case_id!r}")
        if (old, new_status) not in _LEGAL_TRANSITIONS:
            raise StateError(f"illegal transition {old} -> {new_status} for {case_id!r}")
        self.status[case_id] = new_status
        now = time.time()
        self.per_case_time_log.setdefault(case_id, []).append((new_status, now))
        if event_log is not None:
            event_log.append(case_id, f"{old}->{new_status}", actor)

    def elapsed_seconds(self, case_id):
        log = self.per_case_time_log.get(case_id, [])
        if len(log) < 2:
            return 0.0
        return max(0.0, log[-1][1] - log[0][1])


class EventLog:
    """Append-only JSON-lines log of state transitions."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, case_id, transition, actor="pipeline"):
        record = {
            "case_id": case_id,
            "transition": transition,
            "timestamp": time.time(),
            "actor": actor,
        }
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def read(self):
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line]


@dataclass
class DisagreementRecord:
    case_id: str
    dsc_between_modes: float
    selected: bool = False


class RevisionOracle:
    """Interface between the round engine and whoever revises masks."""

    def revise_2d(self, case_id, slice_index, draft_2d, mandatory):
        """Return (refined 2D mask, SliceRange for propagation)."""
        raise NotImplementedError

    def revise_3d(self, case_id, draft_mask: LabelMask):
        """Return the revised mask, or None to keep the draft as-is."""
        raise NotImplementedError

    def accept(self, case_id, mask: LabelMask) -> bool:
        return True


class PassThroughOracle(RevisionOracle):
    """Accepts model drafts unchanged; ranges must be supplied per case."""

    def __init__(self, ranges):
        self.ranges = ranges

    def revise_2d(self, case_id, slice_index, draft_2d, mandatory):
        return draft_2d, self.ranges[case_id]

    def revise_3d(self, case_id, draft_mask):
        return None


class GroundTruthOracle(RevisionOracle):
    """Scripted annotator that substitutes the reference mask everywhere."""

    def __init__(self, truths):
        self.truths = truths  # case_id -> LabelMask

    def _range(self, case_id):
        nz_any = self.truths[case_id].labels.any(axis=(1, 2))
        zs = np.where(nz_any)[0]
        return SliceRange(int(zs.min()), int(zs.max()))

    def revise_2d(self, case_id, slice_index, draft_2d, mandatory):
        return self.truths[case_id].labels[slice_index] != 0, self._range(case_id)

    def revise_3d(self, case_id, draft_mask):
        truth = self.truths[case_id]
        if np.array_equal(truth.labels != 0, draft_mask.labels != 0):
            return None
        return LabelMask((truth.labels != 0).astype(np.uint8), truth.spacing)


def run_round(annotation_round: AnnotationRound, volumes, prompts, model,
              oracle: RevisionOracle, event_log=None):
    """Execute one annotation round; returns {case_id: accepted LabelMask}.

    ``volumes`` maps case id -> normalized VoxelGrid, ``prompts`` maps
    case id -> BoundingBox2D on the annotator's key slice.
    """
    results = {}
    for case_id in annotation_round.case_ids:
        if case_id not in prompts:
            raise ValueError(f"case {case_id!r} has no prompt")
        volume = volumes[case_id]
        box = prompts[case_id]
        from .propagate import _check_normalized  # same precondition as propagation
        _check_normalized(volume)

        # 2D draft at the prompt slice, then human revision + range choice
        draft2d_result = segment_3d(
            volume, box, SliceRange(box.slice_index, box.slice_index), model
        )
        draft2d = draft2d_result.mask.labels[box.slice_index] != 0
        mandatory = not bool(draft2d.any())
        if mandatory:
            annotation_round.flags[case_id] = "mandatory_revision"
        refined2d, slice_range = oracle.revise_2d(case_id, box.slice_index, draft2d, mandatory)
        refined2d = np.asarray(refined2d) != 0

        result3d = segment_3d(
            volume, box, slice_range, model, refined_masks={box.slice_index: refined2d}
        )
        annotation_round.transition(case_id, "auto_segmented", event_log)
        mask = result3d.mask
        revisions = 0
        revised = oracle.revise_3d(case_id, mask)
        if revised is not None:
            mask = revised
            revisions += 1
            annotation_round.transition(case_id, "revised", event_log)
        if oracle.accept(case_id, mask):
            annotation_round.transition(case_id, "accepted", event_log)
        annotation_round.provenance[case_id] = {
            "checkpoint": model.checkpoint_id,
            "prompt": [box.slice_index, box.x_min, box.y_min, box.x_max, box.y_max],
            "range": [slice_range.top, slice_range.bottom],
            "revisions": revisions,
        }
        results[case_id] = mask
    return results


def select_hard_cases(volumes, boxes3d, boxes2d_per_slice, model, group_by_patient):
    """Rank cases by disagreement between the two prompt routes.

    Route A: 2D box on the median slice of the 3D box's z range, propagated
    within that range.  Route B: independent per-slice 2D boxes.  Per
    patient group the minimum-DSC case is selected.
    Returns (records sorted by case id, selected case ids).
    """
    records = {}
    for case_id in sorted(volumes):
        if case_id not in boxes3d or case_id not in boxes2d_per_slice:
            raise ValueError(f"case {case_id!r} is missing one of the prompt forms")
        volume = volumes[case_id]
        b3: BoundingBox3D = boxes3d[case_id]
        span = b3.z_max - b3.z_min
        median_z = b3.z_min + span // 2
        mask_a = segment_3d(volume, b3.box2d_at(median_z), b3.slice_range(), model).mask
        mask_b = segment_per_slice_boxes(volume, boxes2d_per_slice[case_id], model)
        records[case_id] = DisagreementRecord(case_id, dsc(mask_a.binary(), mask_b.binary()))

    selected = []
    groups = {}
    for case_id, patient in group_by_patient.items():
        groups.setdefault(patient, []).append(case_id)
    for patient in sorted(groups):
        worst = min(groups[patient], key=lambda c: (records[c].dsc_between_modes, c))
        records[worst].selected = True
        selected.append(worst)
    return [records[c] for c in sorted(records)], selected


# ---------------------------------------------------------------------------
# axial concatenation of lesion crops


def concat_lesions_axial(crops, inplane=(64, 64)):
    """Stack k lesion crops along z after resampling them to one in-plane size.

    Images interpolate cubically, masks nearest-neighbor.  Returns
    (grid, mask, manifest); the manifest records each crop's original
    geometry so :func:`split_concat` can invert the stack exactly.
    """
    if len(crops) < 1:
        raise ValueError("need at least one crop")
    tx, ty = inplane
    grids = []
    masks = []
    manifest = {"inplane": [tx, ty], "crops": []}
    z_cursor = 0
    base_spacing = None
    for grid, mask in crops:
        if not mask.congruent_with(grid):
            raise ValueError("crop grid/mask are not congruent")
        nx, ny, nz = grid.dims
        sx = grid.spacing[0] * nx / tx
        sy = grid.spacing[1] * ny / ty
        target_spacing = (sx, sy, grid.spacing[2])
        rgrid = resample(grid, (tx, ty, nz), target_spacing, kind="image")
        rmask = resample(mask, (tx, ty, nz), target_spacing, kind="mask")
        if base_spacing is None:
            base_spacing = target_spacing
        grids.append(rgrid.values)
        masks.append(rmask.labels)
        manifest["crops"].append(
            {
                "z_start": z_cursor,
                "z_count": nz,
                "orig_dims": list(grid.dims),
                "orig_spacing": list(grid.spacing),
                "intensity_kind": grid.intensity_kind,
            }
        )
        z_cursor += nz
    merged = VoxelGrid(np.concatenate(grids, axis=0), base_spacing, crops[0][0].intensity_kind)
    merged_mask = LabelMask(np.concatenate(masks, axis=0), base_spacing)
    return merged, merged_mask, manifest


def split_concat(obj, manifest):
    """Invert :func:`concat_lesions_axial` back to the original shapes."""
    pieces = []
    is_mask = isinstance(obj, LabelMask)
    data = obj.labels if is_mask else obj.values
    for entry in manifest["crops"]:
        z0, zc = entry["z_start"], entry["z_count"]
        dims = tuple(entry["orig_dims"])
        spacing = tuple(entry["orig_spacing"])
        chunk = data[z0 : z0 + zc]
        if is_mask:
            piece = LabelMask(chunk.copy(), obj.spacing)
            pieces.append(resample(piece, dims, spacing, kind="mask"))
        else:
            piece = VoxelGrid(chunk.copy(), obj.spacing, entry.get("intensity_kind", "raw"))
            pieces.append(resample(piece, dims, spacing, kind="image"))
    return pieces


# ---------------------------------------------------------------------------
# reporting


def round_report(rounds):
    """Per-round mean annotation time, counts, and cumulative totals.

    Rounds with no completed cases are omitted (collected in warnings).
    """
    rows = []
    warnings = []
    cumulative = 0
    for rnd in rounds:
        done = [c for c in rnd.case_ids if rnd.status.get(c) == "accepted"]
        if not done:
            warnings.append(f"round {rnd.round_index} has no accepted cases; omitted")
            continue
        times = [rnd.elapsed_seconds(c) for c in done]
        cumulative += len(done)
        rows.append(
            {
                "round": rnd.round_index,
                "cases": len(done),
                "mean_seconds_per_case": float(np.mean(times)),
                "cumulative_cases": cumulative,
                "checkpoint": rnd.model_checkpoint_ref,
            }
        )
    return {"rounds": rows, "warnings": warnings}


def write_round_report(report, csv_path=None, json_path=None):
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report, indent=2))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=["round", "cases", "mean_seconds_per_case", "cumulative_cases", "checkpoint"],
            )
            writer.writeheader()
            for row in report["rounds"]:
                writer.writerow(row)
