"""Per-frame observation ingest and cross-modality association.

Each frame carries a normalized disparity map, 2D joint detections, body-model
parameter estimates and instance/background segmentation masks. Detections are
paired across modalities with minimum-cost assignment, instance IDs come from
max-voting mask labels at joint pixels, and identity over time either follows
the track IDs shipped with the joints files or a light root-distance tracker.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from . import fileio
from .camera import CameraIntrinsics

CONFIDENCE_THRESHOLD = 0.3


class ObservationError(ValueError):
    pass


@dataclass
class JointDetection:
    joints: np.ndarray       # (J, 2) pixels
    confidence: np.ndarray   # (J,) in [0, 1]
    track_id: int = None


@dataclass
class PoseEstimate:
    theta: np.ndarray        # (K, 3) axis-angle
    beta: np.ndarray         # (B,)
    joints2d: np.ndarray = None  # (J, 2) pre-projected joints, if the regressor provides them


@dataclass
class FrameObservations:
    disparity: np.ndarray              # (H, W) in [0, 1]
    joints: list                       # [JointDetection]
    poses: list                        # [PoseEstimate]
    person_masks: list                 # [(H, W) bool]
    background_mask: np.ndarray        # (H, W) bool

    @property
    def shape(self):
        return self.disparity.shape


@dataclass
class PersonTrack:
    """Per-frame (joint detection, pose estimate, mask instance) indices, or None."""
    entries: list
    beta_avg: np.ndarray = None

    def present(self, t):
        return self.entries[t] is not None


@dataclass
class TrackedSequence:
    camera: CameraIntrinsics
    fps: float
    frames: list               # [FrameObservations]
    tracks: list = field(default_factory=list)   # [PersonTrack]
    mask_morphology: bool = True

    @property
    def num_frames(self):
        return len(self.frames)

    @property
    def num_persons(self):
        return len(self.tracks)


def hungarian(cost):
    """Minimum-total-cost one-to-one assignment on a (possibly rectangular) matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def _orthographic_fit(points, target_bbox):
    """Scale+translate 2D points so their bounding box matches target_bbox."""
    pmin, pmax = points.min(axis=0), points.max(axis=0)
    span = np.maximum(pmax - pmin, 1e-6)
    tmin, tmax = target_bbox
    scale = np.min((tmax - tmin) / span)
    center_p = (pmin + pmax) / 2
    center_t = (np.asarray(tmin) + np.asarray(tmax)) / 2
    return (points - center_p) * scale + center_t


def _pose_image_joints(pose, detection):
    """2D joints of a pose estimate for matching against one detection.

    Prefers the regressor's own projected joints; otherwise fits the estimate's
    joint layout orthographically to the detection's bounding box.
    """
    if pose.joints2d is not None:
        return np.asarray(pose.joints2d, dtype=np.float64)
    # fall back: the pose's rest-joint x/y pattern scaled into the detection bbox
    rest = np.asarray(pose.theta, dtype=np.float64)[:, :2]
    det = np.asarray(detection.joints, dtype=np.float64)
    return _orthographic_fit(rest, (det.min(axis=0), det.max(axis=0)))


def match_pose_to_joints(frame, cam=None):
    """Pair pose estimates with 2D joint detections by mean projected distance.

    Cost(i, j) averages pixel distance over joints with detection confidence
    above the threshold. Returns [(pose_idx, joint_idx)]; surplus detections in
    the larger modality stay unassigned. Empty modalities give an empty pairing.
    """
    if not frame.poses or not frame.joints:
        return []
    cost = np.zeros((len(frame.poses), len(frame.joints)))
    for i, pose in enumerate(frame.poses):
        for j, det in enumerate(frame.joints):
            conf = np.asarray(det.confidence) > CONFIDENCE_THRESHOLD
            proj = _pose_image_joints(pose, det)
            if not conf.any():
                cost[i, j] = 1e6
                continue
            k = min(len(proj), det.joints.shape[0])
            d = np.linalg.norm(proj[:k] - det.joints[:k], axis=1)
            cost[i, j] = d[conf[:k]].mean()
    return hungarian(cost)


def assign_ids_by_mask(frame, label_image=None):
    """Majority-vote instance label for each 2D skeleton.

    Reads the label image at confident in-bounds joint pixels; the modal label
    wins, ties go to the label with more votes over *all* joints, then to the
    lower label index. Skeletons with every joint on background get None.
    """
    if label_image is None:
        label_image = masks_to_labels(frame.person_masks)
    h, w = label_image.shape
    ids = []
    for det in frame.joints:
        votes = {}
        votes_all = {}
        for (u, v), c in zip(det.joints, det.confidence):
            col, row = int(round(u)), int(round(v))
            if not (0 <= row < h and 0 <= col < w):
                continue
            label = int(label_image[row, col])
            if label <= 0:
                continue
            votes_all[label] = votes_all.get(label, 0) + 1
            if c > CONFIDENCE_THRESHOLD:
                votes[label] = votes.get(label, 0) + 1
        if not votes:
            ids.append(None)
            continue
        best = max(votes.values())
        tied = [l for l, n in votes.items() if n == best]
        if len(tied) > 1:
            best_all = max(votes_all.get(l, 0) for l in tied)
            tied = [l for l in tied if votes_all.get(l, 0) == best_all]
        ids.append(min(tied) - 1)  # back to 0-based instance index
    return ids


def masks_to_labels(person_masks):
    """Stack instance masks into a label image (0 = background, k = instance k-1)."""
    if not person_masks:
        raise ObservationError("no masks")
    h, w = person_masks[0].shape
    labels = np.zeros((h, w), dtype=np.int32)
    for k, m in enumerate(person_masks):
        labels[np.asarray(m, dtype=bool) & (labels == 0)] = k + 1
    return labels


def postprocess_masks(frame):
    """Morphological cleanup: 3x3 erosion on person masks, 5x5 opening on the
    background, then person pixels are removed from the background so the two
    are disjoint. Returns a new FrameObservations."""
    s3 = np.ones((3, 3), dtype=bool)
    s5 = np.ones((5, 5), dtype=bool)
    person = [ndimage.binary_erosion(np.asarray(m, dtype=bool), structure=s3)
              for m in frame.person_masks]
    bg = np.asarray(frame.background_mask, dtype=bool)
    bg = ndimage.binary_dilation(ndimage.binary_erosion(bg, structure=s5), structure=s5)
    for m in person:
        bg &= ~m
    return FrameObservations(
        disparity=frame.disparity, joints=frame.joints, poses=frame.poses,
        person_masks=person, background_mask=bg)


def average_shape(track, frames):
    """Arithmetic mean of the matched shape estimates over present frames."""
    betas = []
    for t, entry in enumerate(track.entries):
        if entry is None or entry[1] is None:
            continue
        betas.append(np.asarray(frames[t].poses[entry[1]].beta, dtype=np.float64))
    if not betas:
        raise ObservationError("track has no matched shape estimates")
    return np.mean(np.stack(betas), axis=0)


def _root_pixel(det):
    return np.asarray(det.joints[0], dtype=np.float64)


def build_tracks(frames, cam, min_track_length=5, gate_fraction=0.1):
    """Assemble per-person tracks across frames.

    When the joints files carry track IDs those define identity; otherwise
    identity propagates frame to frame by minimum root-pixel distance with a
    gate of gate_fraction * image diagonal, and short tracks are dropped.
    """
    t_count = len(frames)
    have_ids = all(all(d.track_id is not None for d in f.joints) for f in frames
                   if f.joints)

    per_frame = []
    for frame in frames:
        pairing = dict((j, i) for i, j in match_pose_to_joints(frame, cam))
        mask_ids = assign_ids_by_mask(frame) if frame.person_masks else [None] * len(frame.joints)
        per_frame.append((pairing, mask_ids))

    assignments = [dict() for _ in range(t_count)]  # frame -> {person: det index}
    if have_ids:
        ids = sorted({d.track_id for f in frames for d in f.joints})
        id_map = {tid: n for n, tid in enumerate(ids)}
        for t, frame in enumerate(frames):
            for j, det in enumerate(frame.joints):
                assignments[t][id_map[det.track_id]] = j
        n_persons = len(ids)
    else:
        gate = gate_fraction * cam.diagonal
        next_person = 0
        active = {}  # person -> (last frame, root pixel)
        for t, frame in enumerate(frames):
            dets = list(range(len(frame.joints)))
            persons = [p for p, (lt, _) in active.items() if lt == t - 1]
            if persons and dets:
                cost = np.array([[np.linalg.norm(_root_pixel(frame.joints[j]) - active[p][1])
                                  for j in dets] for p in persons])
                for pi, dj in hungarian(cost):
                    if cost[pi, dj] <= gate:
                        p, j = persons[pi], dets[dj]
                        assignments[t][p] = j
                        active[p] = (t, _root_pixel(frame.joints[j]))
            matched = set(assignments[t].values())
            for j in dets:
                if j not in matched:
                    assignments[t][next_person] = j
                    active[next_person] = (t, _root_pixel(frame.joints[j]))
                    next_person += 1
        n_persons = next_person

    tracks = []
    for p in range(n_persons):
        entries = []
        for t in range(t_count):
            j = assignments[t].get(p)
            if j is None:
                entries.append(None)
                continue
            pairing, mask_ids = per_frame[t]
            entries.append((j, pairing.get(j), mask_ids[j] if j < len(mask_ids) else None))
        length = sum(e is not None for e in entries)
        if not have_ids and length < min_track_length:
            continue
        track = PersonTrack(entries=entries)
        try:
            track.beta_avg = average_shape(track, frames)
        except ObservationError:
            track.beta_avg = None
        tracks.append(track)
    return tracks


def load_sequence(manifest_path, apply_morphology=None):
    """Load an observation manifest (sequence.json) into a TrackedSequence."""
    manifest_path = Path(manifest_path)
    manifest = fileio.load_json(manifest_path)
    root = manifest_path.parent
    cam = CameraIntrinsics.from_dict(manifest["camera"])
    polarity = manifest.get("disparity_polarity", "near_is_one")
    morph = manifest.get("mask_morphology", True)
    if apply_morphology is not None:
        morph = apply_morphology

    frames = []
    for entry in manifest["frames"]:
        disparity = fileio.read_pfm(root / entry["disparity"]).astype(np.float64)
        if polarity == "near_is_zero":
            disparity = 1.0 - disparity
        labels = fileio.read_label_png(root / entry["masks"])
        n_inst = int(labels.max())
        person_masks = [labels == k + 1 for k in range(n_inst)]
        background = labels == 0

        jdata = fileio.load_json(root / entry["joints"])
        joints = [JointDetection(joints=np.asarray(d["joints"], dtype=np.float64),
                                 confidence=np.asarray(d["confidence"], dtype=np.float64),
                                 track_id=d.get("track_id"))
                  for d in jdata["detections"]]
        sdata = fileio.load_json(root / entry["smpl"])
        poses = [PoseEstimate(theta=np.asarray(d["theta"], dtype=np.float64).reshape(-1, 3),
                              beta=np.asarray(d["beta"], dtype=np.float64),
                              joints2d=np.asarray(d["joints2d"], dtype=np.float64)
                              if d.get("joints2d") is not None else None)
                 for d in sdata["detections"]]
        frame = FrameObservations(disparity=disparity, joints=joints, poses=poses,
                                  person_masks=person_masks, background_mask=background)
        if morph:
            frame = postprocess_masks(frame)
        frames.append(frame)

    seq = TrackedSequence(camera=cam, fps=float(manifest.get("fps", 25.0)),
                          frames=frames, mask_morphology=morph)
    seq.tracks = build_tracks(frames, cam)
    return seq
