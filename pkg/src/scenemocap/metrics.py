"""Evaluation against ground truth: root position, detection precision,
root-relative pose accuracy and temporal jitter.

Predictions and ground truth are per-frame, per-person 3D joint sets in
meters. Correspondence uses track IDs when both sides carry them, otherwise
minimum root-distance assignment per frame.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .observations import hungarian


class MetricError(ValueError):
    pass


@dataclass
class EvalPair:
    predicted: np.ndarray   # (J, 3)
    ground_truth: np.ndarray
    root_index: int = 0


@dataclass
class EvalData:
    pairs: list                       # matched [EvalPair] over all (t, n)
    unmatched_predictions: int = 0
    unmatched_ground_truth: int = 0
    pred_tracks: dict = field(default_factory=dict)  # track id -> [(t, (J,3))]


def _root(joints, root_index):
    return np.asarray(joints, dtype=np.float64)[root_index]


def match_frames(pred_frames, gt_frames, root_index=0, use_track_ids=True):
    """Build matched pairs over a sequence.

    Each element of pred/gt frames is a list of dicts {track_id, joints}.
    """
    data = EvalData(pairs=[])
    for preds, gts in zip(pred_frames, gt_frames):
        if use_track_ids and all(p.get("track_id") is not None for p in preds) \
                and all(g.get("track_id") is not None for g in gts):
            gt_by_id = {g["track_id"]: g for g in gts}
            matched_gt = set()
            for p in preds:
                g = gt_by_id.get(p["track_id"])
                if g is None:
                    data.unmatched_predictions += 1
                    continue
                matched_gt.add(p["track_id"])
                data.pairs.append(EvalPair(np.asarray(p["joints"], dtype=np.float64),
                                           np.asarray(g["joints"], dtype=np.float64),
                                           root_index))
            data.unmatched_ground_truth += sum(g["track_id"] not in matched_gt for g in gts)
        else:
            if preds and gts:
                cost = np.array([[np.linalg.norm(_root(p["joints"], root_index)
                                                 - _root(g["joints"], root_index))
                                  for g in gts] for p in preds])
                matched_p, matched_g = set(), set()
                for i, j in hungarian(cost):
                    matched_p.add(i)
                    matched_g.add(j)
                    data.pairs.append(EvalPair(np.asarray(preds[i]["joints"], dtype=np.float64),
                                               np.asarray(gts[j]["joints"], dtype=np.float64),
                                               root_index))
                data.unmatched_predictions += len(preds) - len(matched_p)
                data.unmatched_ground_truth += len(gts) - len(matched_g)
            else:
                data.unmatched_predictions += len(preds)
                data.unmatched_ground_truth += len(gts)
    for t, preds in enumerate(pred_frames):
        for p in preds:
            tid = p.get("track_id")
            if tid is not None:
                data.pred_tracks.setdefault(tid, []).append(
                    (t, np.asarray(p["joints"], dtype=np.float64)))
    return data


def mrpe(pairs):
    """Mean Euclidean root position error in millimeters."""
    if not pairs:
        raise MetricError("no matched pairs")
    errs = [np.linalg.norm(_root(p.predicted, p.root_index) - _root(p.ground_truth, p.root_index))
            for p in pairs]
    return float(np.mean(errs) * 1000.0)


def ap_root(pred_frames, gt_frames, threshold=0.25, root_index=0):
    """Detection precision of the root joint: a prediction is a true positive
    iff its root lies within the threshold of a still-unclaimed ground-truth
    root, claimed greedily in detection order."""
    tp = fp = 0
    total_gt = sum(len(g) for g in gt_frames)
    if total_gt == 0:
        return None
    for preds, gts in zip(pred_frames, gt_frames):
        gt_roots = [_root(g["joints"], root_index) for g in gts]
        used = [False] * len(gt_roots)
        for p in preds:
            r = _root(p["joints"], root_index)
            best, best_d = None, np.inf
            for i, gr in enumerate(gt_roots):
                if used[i]:
                    continue
                d = np.linalg.norm(r - gr)
                if d < best_d:
                    best, best_d = i, d
            if best is not None and best_d <= threshold:
                used[best] = True
                tp += 1
            else:
                fp += 1
    if tp + fp == 0:
        return None
    return 100.0 * tp / (tp + fp)


def _aligned(pair, root_relative):
    p = np.asarray(pair.predicted, dtype=np.float64)
    g = np.asarray(pair.ground_truth, dtype=np.float64)
    if root_relative:
        p = p - p[pair.root_index]
        g = g - g[pair.root_index]
    keep = [j for j in range(p.shape[0]) if j != pair.root_index] if root_relative \
        else list(range(p.shape[0]))
    return p[keep], g[keep]


def pck3d(pairs, threshold=0.15, root_relative=True):
    """Percentage of (non-root) joints within the threshold after root alignment."""
    if not pairs:
        raise MetricError("no matched pairs")
    hits = total = 0
    for pair in pairs:
        p, g = _aligned(pair, root_relative)
        d = np.linalg.norm(p - g, axis=1)
        hits += int((d <= threshold).sum())
        total += len(d)
    return 100.0 * hits / total


def mpjpe(pairs):
    """Root-relative mean per-joint error (non-root joints) in millimeters."""
    if not pairs:
        raise MetricError("no matched pairs")
    errs = []
    for pair in pairs:
        p, g = _aligned(pair, root_relative=True)
        errs.append(np.linalg.norm(p - g, axis=1))
    return float(np.mean(np.concatenate(errs)) * 1000.0)


def jitter(tracks):
    """Mean second-difference magnitude of joint trajectories, millimeters.

    `tracks` maps a track id to a time-ordered list of (t, (J, 3)) samples;
    only runs of consecutive frames contribute, and tracks shorter than three
    frames are skipped.
    """
    mags = []
    for samples in tracks.values():
        samples = sorted(samples, key=lambda s: s[0])
        runs, current = [], []
        for t, joints in samples:
            if current and t != current[-1][0] + 1:
                runs.append(current)
                current = []
            current.append((t, joints))
        if current:
            runs.append(current)
        for run in runs:
            if len(run) < 3:
                continue
            traj = np.stack([j for _, j in run])  # (L, J, 3)
            second = traj[2:] - 2.0 * traj[1:-1] + traj[:-2]
            mags.append(np.linalg.norm(second, axis=2).ravel())
    if not mags:
        raise MetricError("no track long enough for the jitter metric")
    return float(np.mean(np.concatenate(mags)) * 1000.0)


def load_poses(path):
    """poses.json: frames -> persons -> {track_id, joints (J x 3 meters)}."""
    data = fileio.load_json(path)
    return data["frames"], int(data.get("root_index", 0))


def evaluate_files(pred_path, gt_path, pck_threshold=0.15, ap_threshold=0.25):
    pred_frames, root_index = load_poses(pred_path)
    gt_frames, gt_root = load_poses(gt_path)
    if gt_root != root_index:
        raise MetricError("prediction and ground truth disagree on the root index")
    return evaluate(pred_frames, gt_frames, root_index, pck_threshold, ap_threshold)


def evaluate(pred_frames, gt_frames, root_index=0, pck_threshold=0.15, ap_threshold=0.25):
    data = match_frames(pred_frames, gt_frames, root_index)
    report = {
        "num_matched": len(data.pairs),
        "unmatched_predictions": data.unmatched_predictions,
        "unmatched_ground_truth": data.unmatched_ground_truth,
    }
    if not data.pairs:
        report.update({"mrpe_mm": None, "ap_root": None, "pck3d": None,
                       "mpjpe_mm": None, "jitter_mm": None})
        return report
    report["mrpe_mm"] = mrpe(data.pairs)
    report["ap_root"] = ap_root(pred_frames, gt_frames, ap_threshold, root_index)
    report["pck3d"] = pck3d(data.pairs, pck_threshold)
    report["mpjpe_mm"] = mpjpe(data.pairs)
    try:
        report["jitter_mm"] = jitter(data.pred_tracks)
    except MetricError:
        report["jitter_mm"] = None
    return report


def write_report(report, json_path=None, csv_path=None):
    if json_path:
        fileio.dump_json(report, json_path, indent=2)
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "value"])
            for key in sorted(report):
                writer.writerow([key, report[key]])
