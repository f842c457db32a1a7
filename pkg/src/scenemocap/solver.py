"""Two-stage minimization of the energy with RMSprop.

Stage 1 fits the image-evidence terms; at the stage boundary the per-frame
depth ranges are frozen to aggregate a static scene point cloud, and stage 2
continues with the contact, slip and temporal terms added. The raster-backed
terms run on seeded mini-batches of frames; everything else covers the full
sequence every iteration.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import energy as energy_mod
from .body import regress_joints, skin
from .camera import back_project
from .energy import (EnergyWeights, OptimState, PreparedSequence,
                     compute_filtered_targets, constrain_positive, total_energy)
from .scene import SceneError, aggregate_background, build_point_cloud, disparity_to_depth

log = logging.getLogger(__name__)

DEFAULT_LR_MULTIPLIERS = {
    "theta": 1.0, "beta": 0.1, "gamma": 1.0,
    "raw_scale": 0.1, "raw_z_near": 1.0, "raw_z_gap": 1.0,
}


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    lr0: float = 0.01
    decay: float = 0.99            # per-iteration exponential decay
    alpha: float = 0.5             # squared-gradient averaging
    momentum: float = 0.9
    stage1_iters: int = 30
    stage2_iters: int = 200
    batch_frames: int = 10
    seed: int = 0
    target_refresh: int = 50       # iterations between filtered-target recomputes
    lr_multipliers: dict = field(default_factory=lambda: dict(DEFAULT_LR_MULTIPLIERS))
    downsample: int = 2
    tau: float = 8.0
    dtype: str = "float64"
    one_euro_min_cutoff: float = 1.0
    one_euro_beta: float = 0.007
    voxel_size: float = 0.05
    cell_size: float = 0.25
    init_z_near: float = 0.3
    init_z_far: float = 10.0
    full_eval_every: int = 10
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0 or not (0 < self.decay <= 1) or self.batch_frames < 1:
            raise SolverError("invalid solver configuration")

    @property
    def torch_dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def to_dict(self):
        d = self.__dict__.copy()
        d["lr_multipliers"] = dict(self.lr_multipliers)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def rmsprop_step(params, grads, memory, lr, alpha=0.5, momentum=0.9,
                 multipliers=None, eps=1e-8):
    """One RMSprop-with-momentum update, in place.

    v <- alpha*v + (1-alpha)*g^2; buf <- momentum*buf + g/sqrt(v+eps);
    x <- x - lr*buf. `memory` maps a parameter name to its (v, buf) pair and
    is created lazily.
    """
    multipliers = multipliers or {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in memory:
                memory[name] = (torch.zeros_like(p), torch.zeros_like(p))
            v, buf = memory[name]
            v.mul_(alpha).add_((1.0 - alpha) * g * g)
            buf.mul_(momentum).add_(g / torch.sqrt(v + eps))
            p.add_(buf, alpha=-lr * multipliers.get(name, 1.0))


class FrameBatcher:
    """Uniform mini-batches of frame indices without replacement per epoch."""

    def __init__(self, num_frames, batch_size, seed):
        self.num_frames = num_frames
        self.batch_size = min(batch_size, num_frames)
        self.rng = np.random.default_rng(seed)
        self._queue = []

    def next(self):
        if len(self._queue) < self.batch_size:
            self._queue = [int(i) for i in self.rng.permutation(self.num_frames)]
        batch = sorted(self._queue[:self.batch_size])
        self._queue = self._queue[self.batch_size:]
        return batch


def _fill_missing(values, available):
    """Forward fill along the first axis, backward fill any leading gap."""
    out = values.copy()
    last = None
    for t in range(len(out)):
        if available[t]:
            last = t
        elif last is not None:
            out[t] = out[last]
    first = next((t for t in range(len(out)) if available[t]), None)
    if first is not None:
        for t in range(first):
            out[t] = out[first]
    return out


def _fit_depth_range(anchors, fallback):
    """Per-frame (z_near, z_far) from (disparity, depth) anchor pairs.

    The conversion is linear in inverse depth: 1/D = d/z_near + (1-d)/z_far,
    so the anchors give a least-squares problem. Falls back to the configured
    defaults when the system is degenerate (fewer than two spread anchors).
    """
    zn0, zf0 = fallback
    if not anchors:
        return zn0, zf0
    d = np.array([a[0] for a in anchors])
    inv_z = np.array([1.0 / a[1] for a in anchors])
    if len(anchors) == 1 or np.ptp(d) < 0.05:
        # one reliable anchor: keep the default near/far ratio through it
        mid = 1.0 / inv_z.mean()
        ratio = zf0 / zn0
        zn = mid * (d.mean() * (ratio - 1.0) + 1.0) / ratio
        return max(zn, 0.05), max(zn * ratio, zn * 1.5)
    a = np.stack([d, 1.0 - d], axis=1)
    sol, *_ = np.linalg.lstsq(a, inv_z, rcond=None)
    if sol[0] <= 1e-6 or sol[1] <= 1e-6:
        return zn0, zf0
    zn, zf = 1.0 / sol[0], 1.0 / sol[1]
    if zf <= zn * 1.05:
        return zn0, zf0
    return float(zn), float(zf)


def initialize_state(sequence, body, config):
    """Data-driven starting point.

    Pose/shape come from the matched estimates (shape averaged over the
    sequence) and scale starts at 1. The per-frame depth range is fitted from
    body-size anchors: each detection's apparent joint height gives a depth
    estimate at its median disparity, and the inverse-depth conversion is
    linear in (1/z_near, 1/z_far). Each translation then places the detected
    root pixel at the median converted depth under the person's mask.
    """
    t_count, n_count = sequence.num_frames, sequence.num_persons
    if n_count == 0:
        raise SolverError("no person tracks in the input sequence")
    k, b = body.num_joints, body.num_shape_coeffs

    presence = np.zeros((t_count, n_count), dtype=bool)
    theta = np.zeros((n_count, t_count, k, 3))
    beta = np.zeros((n_count, b))
    gamma = np.zeros((n_count, t_count, 3))
    zn0, zf0 = config.init_z_near, config.init_z_far

    roots = {}
    spans = {}
    for n, track in enumerate(sequence.tracks):
        if track.beta_avg is not None:
            beta[n] = track.beta_avg[:b]
        detected = [t for t, e in enumerate(track.entries) if e is not None]
        if detected:
            presence[detected[0]:detected[-1] + 1, n] = True
        has_pose = np.zeros(t_count, dtype=bool)
        for t, entry in enumerate(track.entries):
            if entry is None:
                continue
            if entry[1] is not None:
                theta[n, t] = np.asarray(
                    sequence.frames[t].poses[entry[1]].theta, dtype=np.float64).reshape(k, 3)
                has_pose[t] = True
        theta[n] = _fill_missing(theta[n], has_pose)

        # rest root joint and vertical joint span under the initial pose/shape
        with torch.no_grad():
            for t, entry in enumerate(track.entries):
                if entry is None:
                    continue
                mesh = skin(body, theta[n, t], beta[n])
                joints3d = regress_joints(body, mesh).cpu().numpy()
                roots[(t, n)] = joints3d[0]
                spans[(t, n)] = float(np.ptp(joints3d[:, 1]))

    # fit the per-frame depth range from body-size anchors
    z_near = np.full(t_count, zn0)
    z_far = np.full(t_count, zf0)
    cam = sequence.camera
    median_disp = {}
    for t in range(t_count):
        anchors = []
        frame = sequence.frames[t]
        for n, track in enumerate(sequence.tracks):
            entry = track.entries[t]
            if entry is None:
                continue
            j_idx, _, m_idx = entry
            if j_idx is None or m_idx is None or m_idx >= len(frame.person_masks):
                continue
            mask = np.asarray(frame.person_masks[m_idx], dtype=bool)
            if not mask.any():
                continue
            det = frame.joints[j_idx]
            conf = np.asarray(det.confidence) > 0.3
            if conf.sum() < 2:
                continue
            h_px = float(np.ptp(np.asarray(det.joints)[conf, 1]))
            if h_px < 2.0 or spans[(t, n)] < 1e-3:
                continue
            depth_est = cam.fy * spans[(t, n)] / h_px
            d_med = float(np.median(frame.disparity[mask]))
            median_disp[(t, n)] = d_med
            anchors.append((d_med, depth_est))
        z_near[t], z_far[t] = _fit_depth_range(anchors, (zn0, zf0))

    for n, track in enumerate(sequence.tracks):
        has_gamma = np.zeros(t_count, dtype=bool)
        for t, entry in enumerate(track.entries):
            if entry is None:
                continue
            frame = sequence.frames[t]
            j_idx, _, m_idx = entry
            depth = 0.5 * (z_near[t] + z_far[t])
            if (t, n) in median_disp:
                depth = float(disparity_to_depth(np.float64(median_disp[(t, n)]),
                                                 z_near[t], z_far[t]))
            elif m_idx is not None and m_idx < len(frame.person_masks):
                mask = np.asarray(frame.person_masks[m_idx], dtype=bool)
                if mask.any():
                    d_med = float(np.median(frame.disparity[mask]))
                    depth = float(disparity_to_depth(np.float64(d_med),
                                                     z_near[t], z_far[t]))
            if j_idx is not None:
                pix = np.asarray(frame.joints[j_idx].joints[0], dtype=np.float64)
                target = back_project(sequence.camera, pix, np.float64(depth))
                gamma[n, t] = target - roots[(t, n)]
            else:
                gamma[n, t] = (0.0, 0.0, depth)
            has_gamma[t] = True
        # frames with missed detections inside the span inherit a neighbour
        gamma[n] = _fill_missing(gamma[n], has_gamma)

    return OptimState.from_values(
        theta=theta, beta=beta, gamma=gamma, scale=np.ones(n_count),
        z_near=z_near, z_far=z_far,
        presence=presence, dtype=config.torch_dtype)


def build_scene_cloud(sequence, state, config):
    """Freeze the current depth ranges and aggregate the background geometry."""
    with torch.no_grad():
        zn = state.z_near().cpu().numpy()
        zf = state.z_far().cpu().numpy()
    depths, masks = [], []
    for t, frame in enumerate(sequence.frames):
        depths.append(disparity_to_depth(frame.disparity, float(zn[t]), float(zf[t])))
        masks.append(np.asarray(frame.background_mask, dtype=bool))
    static_depth, valid = aggregate_background(np.stack(depths), np.stack(masks))
    cloud = build_point_cloud(static_depth, valid, sequence.camera,
                              voxel_size=config.voxel_size, cell_size=config.cell_size)
    return cloud, static_depth


def run(sequence, body, weights=None, config=None, init_state=None, disable=(),
        trace_path=None):
    """Full two-stage optimization; returns (state, trace, aux).

    `disable` removes individual energy terms (ablations). The trace holds one
    JSON-serializable record per iteration; `trace_path` additionally streams
    the records as JSON lines while the solver runs.
    """
    weights = weights or EnergyWeights()
    config = config or SolverConfig()
    disable = set(disable)
    trace_file = open(trace_path, "w") if trace_path else None

    if sequence.num_persons == 0:
        raise SolverError("degenerate input: no person tracks")
    if not any(np.asarray(f.background_mask, dtype=bool).any() for f in sequence.frames):
        raise SolverError("degenerate input: no background pixels for the scene")

    prepared = PreparedSequence(sequence, body, downsample=config.downsample,
                                tau=config.tau, dtype=config.torch_dtype)
    state = init_state if init_state is not None else initialize_state(sequence, body, config)
    if state.dtype != config.torch_dtype:
        raise SolverError("state dtype does not match solver configuration")

    torch.manual_seed(config.seed)
    batcher = FrameBatcher(prepared.num_frames, config.batch_frames, config.seed)
    memory = {}
    trace = []
    cloud = None
    static_depth = None
    targets = None
    lr_scale = 1.0
    total_iters = config.stage1_iters + config.stage2_iters

    for k in range(total_iters):
        stage = 1 if k < config.stage1_iters else 2
        if stage == 2:
            if k == config.stage1_iters:
                try:
                    cloud, static_depth = build_scene_cloud(sequence, state, config)
                except SceneError as exc:
                    log.warning("scene cloud unavailable, contact/slip disabled: %s", exc)
                    cloud = None
            if (k - config.stage1_iters) % config.target_refresh == 0:
                targets = compute_filtered_targets(
                    state, body, rate=sequence.fps,
                    min_cutoff=config.one_euro_min_cutoff, beta_gain=config.one_euro_beta)

        lr = config.lr0 * (config.decay ** k) * lr_scale
        batch = batcher.next()
        report = total_energy(state, prepared, weights, stage, body,
                              raster_frames=batch, cloud=cloud, targets=targets,
                              disable=disable, compute_grad=True)

        record = {"iter": k, "stage": stage, "lr": lr, "batch": batch,
                  "terms": report.terms, "total": report.total}
        grads = report.param_grads or {}
        finite = all(bool(torch.isfinite(g).all()) for g in grads.values())
        if not finite or not math.isfinite(report.total):
            lr_scale *= 0.5
            record["event"] = "non_finite_gradient_skipped"
            log.warning("iteration %d skipped: non-finite gradient; lr halved", k)
        else:
            rmsprop_step(state.parameters(), grads, memory, lr,
                         alpha=config.alpha, momentum=config.momentum,
                         multipliers=config.lr_multipliers, eps=config.eps)

        with torch.no_grad():
            zn, zf = state.z_near(), state.z_far()
            s = state.scales()
            assert bool((s > 0).all() and (zn > 0).all() and (zf > zn).all()), \
                "positivity/ordering constraint violated"

        if config.full_eval_every and (k % config.full_eval_every == 0 or k == total_iters - 1):
            full = total_energy(state, prepared, weights, stage, body,
                                raster_frames=None, cloud=cloud, targets=targets,
                                disable=disable, compute_grad=False)
            record["full_total"] = full.total
            record["full_terms"] = full.terms
        trace.append(record)
        if trace_file is not None:
            trace_file.write(json.dumps(record, sort_keys=True))
            trace_file.write("\n")
            trace_file.flush()

    if trace_file is not None:
        trace_file.close()
    aux = {"cloud": cloud, "static_depth": static_depth, "prepared": prepared,
           "targets": targets}
    return state, trace, aux


def predicted_joints(state, body, fps=None):
    """World-space evaluation joints per frame/person from a final state."""
    pairs = [(t, n) for t in range(state.num_frames) for n in range(state.num_persons)
             if state.presence[t, n]]
    frozen = state.detached_copy(requires_grad=False)
    with torch.no_grad():
        joints = energy_mod.world_eval_joints(frozen, body, pairs)
    return {pair: j.cpu().numpy() for pair, j in joints.items()}


# re-exported here because the positivity construction belongs to the solver contract
__all__ = ["SolverConfig", "SolverError", "rmsprop_step", "run", "initialize_state",
           "build_scene_cloud", "predicted_joints", "constrain_positive",
           "DEFAULT_LR_MULTIPLIERS", "FrameBatcher"]
