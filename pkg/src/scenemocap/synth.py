"""Synthetic scene oracle: known-truth multi-person scenarios rendered into the
observation formats the engine ingests.

A scenario poses scaled bodies on a ground plane in front of a back wall,
renders composite depth, converts it to per-frame normalized disparity with a
jittered (z_near, z_far) calibration (so the optimizer has to recover the
range), projects true joints, rasterizes instance masks, and emits noisy
body-parameter estimates. Everything is seeded and reproducible.
"""

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import fileio
from .body import regress_joints, skin, synthetic_body
from .camera import CameraIntrinsics, project
from .render import rasterize_depth
from .scene import depth_to_disparity
from .body import save_body_model


class ScenarioError(ValueError):
    pass


@dataclass
class NoiseSpec:
    joint_px: float = 0.0        # 2D joint detection noise, pixels
    disparity: float = 0.0       # additive disparity noise
    pose_angle: float = 0.0      # axis-angle noise on the body estimates, radians
    beta: float = 0.0            # shape estimate noise per frame
    mask_erosion: int = 0        # erosion iterations on emitted person masks


@dataclass
class PersonSpec:
    scale: float = 1.0
    beta: list = None                 # defaults to zeros
    motion: str = "stand"             # stand | walk-line | walk-circle
    start: tuple = (0.0, 4.0)         # (x, z) meters
    end: tuple = None                 # walk-line target
    radius: float = 0.8               # walk-circle radius
    speed: float = 0.5                # m/s along the path
    phase: float = 0.0                # gait phase offset


@dataclass
class ScenarioSpec:
    persons: list
    frame_count: int = 60
    fps: float = 25.0
    width: int = 128
    height: int = 96
    focal: float = 104.0
    ground_y: float = 1.05            # camera height above the plane (Y points down)
    wall_z: float = 9.0
    ramp: tuple = None                # optional (z_start, slope): y = ground_y - slope*(z - z_start)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    emit_track_ids: bool = True
    emit_pose_joints2d: bool = True
    name: str = "scenario"

    def camera(self):
        return CameraIntrinsics(fx=self.focal, fy=self.focal,
                                cx=self.width / 2.0, cy=self.height / 2.0,
                                width=self.width, height=self.height)

    def validate(self):
        if not self.persons:
            raise ScenarioError("scenario needs at least one person")
        if self.frame_count < 1:
            raise ScenarioError("frame_count must be positive")
        for p in self.persons:
            if p.scale <= 0:
                raise ScenarioError("person scale must be positive")
            if p.motion not in ("stand", "walk-line", "walk-circle"):
                raise ScenarioError("unknown motion profile %r" % p.motion)


@dataclass
class GroundTruth:
    theta: np.ndarray        # (N, T, K, 3)
    beta: np.ndarray         # (N, B)
    gamma: np.ndarray        # (N, T, 3)
    scale: np.ndarray        # (N,)
    z_near: np.ndarray       # (T,)
    z_far: np.ndarray        # (T,)
    joints3d: np.ndarray     # (N, T, J, 3)
    contact: np.ndarray      # (N, T) bool: lowest vertex on the scene surface
    manifest_path: Path = None
    poses_path: Path = None


# joint indices used by the gait generator
L_HIP, R_HIP, L_KNEE, R_KNEE = 1, 2, 4, 5
L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW = 16, 17, 18, 19
SPINE2 = 6


def _heading_to_rotvec(heading):
    # rotation about +Y; heading 0 keeps the template facing -Z
    return np.array([0.0, heading, 0.0])


_GAIT_PERIOD = 1.0 / 0.9  # seconds per stride cycle


def _hip_angle(u, amplitude):
    """Sagittal hip angle over one normalized gait cycle.

    Stance covers u in [0, 0.5): the hip rotates at a constant rate from
    -amplitude (foot in front) to +amplitude (foot behind), which keeps the
    planted foot stationary in the world when the rate matches the walking
    speed. The swing phase returns the leg along a cosine.
    """
    if u < 0.5:
        return amplitude * (4.0 * u - 1.0)
    return amplitude * math.cos(2.0 * math.pi * (u - 0.5))


def _gait_pose(t_sec, phase, walking, num_joints, speed=0.5, leg_length=0.84,
               sway=0.0):
    theta = np.zeros((num_joints, 3))
    # arms down from the T-pose template
    theta[L_SHOULDER, 2] = 1.25
    theta[R_SHOULDER, 2] = -1.25
    if walking:
        u = (t_sec / _GAIT_PERIOD + phase / (2.0 * math.pi)) % 1.0
        # stance hip rate 4*amp/period matched to the body speed plants the foot
        amp = min(0.35, speed * _GAIT_PERIOD / (4.0 * max(leg_length, 0.3)))
        theta[L_HIP, 0] = _hip_angle(u, amp)
        theta[R_HIP, 0] = _hip_angle((u + 0.5) % 1.0, amp)
        # the swinging knee lifts so the stance foot stays lowest
        swing_l = 0.0 if u < 0.5 else math.sin(math.pi * (u - 0.5) / 0.5)
        u_r = (u + 0.5) % 1.0
        swing_r = 0.0 if u_r < 0.5 else math.sin(math.pi * (u_r - 0.5) / 0.5)
        theta[L_KNEE, 0] = 0.40 * swing_l ** 2
        theta[R_KNEE, 0] = 0.40 * swing_r ** 2
        theta[L_ELBOW, 1] = 0.15 * math.sin(2.0 * math.pi * u)
        theta[R_ELBOW, 1] = -0.15 * math.sin(2.0 * math.pi * u)
    elif sway:
        theta[SPINE2, 2] = sway
    return theta


def _path_position(person, t_sec):
    """(x, z) position and heading along the motion profile."""
    x0, z0 = person.start
    if person.motion == "stand":
        return np.array([x0, z0]), 0.0
    if person.motion == "walk-line":
        if person.end is None:
            raise ScenarioError("walk-line needs an end position")
        x1, z1 = person.end
        span = np.hypot(x1 - x0, z1 - z0)
        # ping-pong along the segment so the person stays in frame
        s = (person.speed * t_sec) % (2.0 * span)
        frac = s / span if s <= span else 2.0 - s / span
        pos = np.array([x0 + frac * (x1 - x0), z0 + frac * (z1 - z0)])
        direction = np.array([x1 - x0, z1 - z0]) / max(span, 1e-9)
        if s > span:
            direction = -direction
        heading = math.atan2(-direction[0], -direction[1])
        return pos, heading
    # walk-circle
    omega = person.speed / max(person.radius, 1e-6)
    ang = omega * t_sec + person.phase
    pos = np.array([x0 + person.radius * math.cos(ang), z0 + person.radius * math.sin(ang)])
    tangent = np.array([-math.sin(ang), math.cos(ang)])
    heading = math.atan2(-tangent[0], -tangent[1])
    return pos, heading


def scene_depth_map(spec, cam):
    """Analytic depth of the ground plane (optional ramp) and the back wall."""
    vv = np.arange(cam.height, dtype=np.float64)[:, None] - cam.cy
    depth = np.full((cam.height, cam.width), spec.wall_z, dtype=np.float64)
    down = vv > 1e-9
    with np.errstate(divide="ignore"):
        plane_z = np.where(down, spec.ground_y * cam.fy / np.where(down, vv, 1.0), np.inf)
    plane_z = np.broadcast_to(plane_z, depth.shape)
    if spec.ramp is not None:
        z_start, slope = spec.ramp
        # iterate the ray-surface intersection once: y(z) = ground_y - slope*max(0, z - z_start)
        y_at = spec.ground_y - slope * np.maximum(0.0, plane_z - z_start)
        with np.errstate(divide="ignore", invalid="ignore"):
            plane_z = np.where(down, y_at * cam.fy / np.where(down, vv, 1.0), np.inf)
    return np.minimum(plane_z, spec.wall_z)


def surface_height(spec, x, z):
    """Ground Y at (x, z); larger Y is lower (camera convention)."""
    if spec.ramp is None:
        return spec.ground_y
    z_start, slope = spec.ramp
    return spec.ground_y - slope * max(0.0, z - z_start)


def generate(spec, outdir, body=None):
    """Write the observation manifest plus ground truth; returns GroundTruth."""
    spec.validate()
    outdir = Path(outdir)
    cam = spec.camera()
    body = body or synthetic_body()
    rng = np.random.default_rng(spec.seed)
    n = len(spec.persons)
    t_count = spec.frame_count
    k = body.num_joints
    b = body.num_shape_coeffs
    j = body.num_eval_joints

    theta = np.zeros((n, t_count, k, 3))
    beta = np.zeros((n, b))
    gamma = np.zeros((n, t_count, 3))
    scale = np.array([p.scale for p in spec.persons], dtype=np.float64)
    joints3d = np.zeros((n, t_count, j, 3))
    contact = np.zeros((n, t_count), dtype=bool)

    for i, person in enumerate(spec.persons):
        if person.beta is not None:
            beta[i, :len(person.beta)] = person.beta

    meshes = np.zeros((n, t_count, body.num_vertices, 3))
    in_frustum = np.zeros((n, t_count), dtype=bool)
    for i, person in enumerate(spec.persons):
        walking = person.motion != "stand"
        leg = 0.84 * person.scale
        for t in range(t_count):
            t_sec = t / spec.fps
            pose = _gait_pose(t_sec, person.phase, walking, k,
                              speed=person.speed, leg_length=leg,
                              sway=0.03 * math.sin(2 * math.pi * 0.4 * t_sec))
            pos, heading = _path_position(person, t_sec)
            pose[0] = _heading_to_rotvec(heading)
            theta[i, t] = pose
            with torch.no_grad():
                verts = skin(body, pose, beta[i]).cpu().numpy() * person.scale
            ground = surface_height(spec, pos[0], pos[1])
            gamma[i, t] = (pos[0], ground - verts[:, 1].max(), pos[1])
            world = verts + gamma[i, t]
            meshes[i, t] = world
            joints3d[i, t] = regress_joints(body, world)
            contact[i, t] = True  # feet placed exactly on the surface
            root_px, valid = project(cam, joints3d[i, t][0])
            in_frustum[i, t] = bool(valid) and \
                0 <= root_px[0] < cam.width and 0 <= root_px[1] < cam.height

    frustum_frac = in_frustum.mean(axis=1)
    if (frustum_frac < 0.8).any():
        raise ScenarioError("persons must stay in the camera frustum for >= 80%% "
                            "of frames (got %s)" % np.round(frustum_frac, 2).tolist())

    scene_bg = scene_depth_map(spec, cam)
    faces = body.faces

    z_near = np.zeros(t_count)
    z_far = np.zeros(t_count)

    (outdir / "disparity").mkdir(parents=True, exist_ok=True)
    (outdir / "masks").mkdir(exist_ok=True)
    (outdir / "joints").mkdir(exist_ok=True)
    (outdir / "smpl").mkdir(exist_ok=True)

    frames_manifest = []
    poses_frames = []
    for t in range(t_count):
        person_depths = []
        for i in range(n):
            r = rasterize_depth(cam, torch.as_tensor(meshes[i, t]), faces, cull=True)
            d = r.depth.cpu().numpy()
            person_depths.append(np.where(d > 0, d, np.inf))
        stack = np.stack(person_depths + [scene_bg], axis=0)
        owner = np.argmin(stack, axis=0)  # ties go to the lower person index
        composite = np.min(stack, axis=0)

        person_masks = [(owner == i) for i in range(n)]
        if spec.noise.mask_erosion > 0:
            person_masks = [ndimage.binary_erosion(m, iterations=spec.noise.mask_erosion)
                            for m in person_masks]
        labels = np.zeros((cam.height, cam.width), dtype=np.uint8)
        for i, m in enumerate(person_masks):
            labels[m] = i + 1

        d_lo, d_hi = composite.min(), composite.max()
        z_near[t] = d_lo * math.exp(-abs(rng.normal(0.0, 0.18))) * 0.999
        z_far[t] = d_hi * math.exp(abs(rng.normal(0.0, 0.18))) * 1.001
        disparity = depth_to_disparity(composite, z_near[t], z_far[t])
        if spec.noise.disparity > 0:
            disparity = disparity + rng.normal(0.0, spec.noise.disparity, disparity.shape)
        disparity = np.clip(disparity, 0.0, 1.0)

        detections = []
        pose_dets = []
        gt_persons = []
        for i in range(n):
            joints_px, valid = project(cam, joints3d[i, t])
            joints_px = np.asarray(joints_px)
            emitted = joints_px + rng.normal(0.0, spec.noise.joint_px, joints_px.shape) \
                if spec.noise.joint_px > 0 else joints_px.copy()
            det = {"joints": emitted.tolist(),
                   "confidence": np.ones(j).tolist()}
            if spec.emit_track_ids:
                det["track_id"] = i
            detections.append(det)

            theta_hat = theta[i, t] + rng.normal(0.0, spec.noise.pose_angle, (k, 3)) \
                if spec.noise.pose_angle > 0 else theta[i, t].copy()
            beta_hat = beta[i] + rng.normal(0.0, spec.noise.beta, b) \
                if spec.noise.beta > 0 else beta[i].copy()
            pose_det = {"theta": theta_hat.ravel().tolist(), "beta": beta_hat.tolist()}
            if spec.emit_pose_joints2d:
                proj2d = joints_px + rng.normal(0.0, spec.noise.joint_px, joints_px.shape) \
                    if spec.noise.joint_px > 0 else joints_px
                pose_det["joints2d"] = np.asarray(proj2d).tolist()
            pose_dets.append(pose_det)
            gt_persons.append({"track_id": i, "joints": joints3d[i, t].tolist()})

        # shuffle detection order so the matching stages are exercised
        det_order = rng.permutation(n)
        pose_order = rng.permutation(n)
        detections = [detections[int(q)] for q in det_order]
        pose_dets = [pose_dets[int(q)] for q in pose_order]

        stem = "frame_%04d" % t
        fileio.write_pfm(outdir / "disparity" / (stem + ".pfm"), disparity)
        fileio.write_label_png(outdir / "masks" / (stem + ".png"), labels)
        fileio.dump_json({"detections": detections}, outdir / "joints" / (stem + ".json"))
        fileio.dump_json({"detections": pose_dets}, outdir / "smpl" / (stem + ".json"))
        frames_manifest.append({
            "disparity": "disparity/%s.pfm" % stem,
            "masks": "masks/%s.png" % stem,
            "joints": "joints/%s.json" % stem,
            "smpl": "smpl/%s.json" % stem,
        })
        poses_frames.append(gt_persons)

    manifest = {
        "name": spec.name,
        "camera": cam.to_dict(),
        "fps": spec.fps,
        "frame_count": t_count,
        "disparity_polarity": "near_is_one",
        "mask_morphology": False,  # synthetic masks are already exact and disjoint
        "frames": frames_manifest,
    }
    manifest_path = outdir / "sequence.json"
    fileio.dump_json(manifest, manifest_path, indent=2)

    poses_path = outdir / "poses_gt.json"
    fileio.dump_json({"fps": spec.fps, "root_index": 0, "frames": poses_frames},
                     poses_path, indent=None)

    save_body_model(body, outdir / "body_model")
    fileio.dump_json({
        "theta": theta.tolist(), "beta": beta.tolist(), "gamma": gamma.tolist(),
        "scale": scale.tolist(), "z_near": z_near.tolist(), "z_far": z_far.tolist(),
        "contact": contact.tolist(),
    }, outdir / "truth.json")

    return GroundTruth(theta=theta, beta=beta, gamma=gamma, scale=scale,
                       z_near=z_near, z_far=z_far, joints3d=joints3d,
                       contact=contact, manifest_path=manifest_path,
                       poses_path=poses_path)


# ---------------------------------------------------------------------------
# presets

def preset(name, seed=0):
    """Named scenarios used by the demos and the verification suite."""
    # the walking lanes are laid out so the persons never substantially overlap
    # in the image: mask-vote identity is only reliable outside deep occlusion
    if name == "three-person-plane":
        return ScenarioSpec(
            name=name, seed=seed, frame_count=100,
            persons=[
                PersonSpec(scale=1.0, motion="walk-line", start=(-1.6, 4.5), end=(-0.8, 4.5),
                           speed=0.5, beta=[0.3, -0.2]),
                PersonSpec(scale=1.0, motion="walk-circle", start=(0.3, 3.5), radius=0.3,
                           speed=0.35, phase=1.2, beta=[-0.4, 0.1]),
                PersonSpec(scale=1.0, motion="stand", start=(1.4, 4.1), beta=[0.1, 0.4]),
            ])
    if name == "multi-scale":
        # near-field layout and a short clip: with batch_frames >= frame_count
        # every iteration sees the full sequence, all persons stay unoccluded,
        # and the absolute-position error floor from the scale-anchor gauge
        # stays small
        return ScenarioSpec(
            name=name, seed=seed, frame_count=10, fps=12.5,
            width=128, height=112, focal=80.0, ground_y=0.8, wall_z=6.0,
            persons=[
                PersonSpec(scale=0.8, motion="walk-line", start=(-0.85, 2.2),
                           end=(-0.55, 2.45), speed=0.45),
                PersonSpec(scale=1.0, motion="stand", start=(0.02, 2.35)),
                PersonSpec(scale=1.25, motion="walk-circle", start=(0.78, 2.35),
                           radius=0.1, speed=0.3, phase=0.5),
            ])
    if name == "children":
        return ScenarioSpec(
            name=name, seed=seed, frame_count=60,
            persons=[
                PersonSpec(scale=0.55, motion="walk-line", start=(-1.3, 3.6), end=(-0.6, 3.6),
                           speed=0.4),
                PersonSpec(scale=1.0, motion="stand", start=(1.35, 4.1)),
                PersonSpec(scale=1.05, motion="walk-circle", start=(0.3, 3.5), radius=0.25,
                           speed=0.3, phase=2.1),
            ])
    if name == "walking-noisy":
        # persons spread in depth so the per-frame disparity calibration is
        # anchored across the scene's depth range, not just one narrow band
        return ScenarioSpec(
            name=name, seed=seed, frame_count=80,
            width=128, height=112, focal=80.0, ground_y=0.8, wall_z=6.0,
            noise=NoiseSpec(joint_px=3.0, disparity=0.02, pose_angle=0.12, beta=0.05,
                            mask_erosion=0),
            persons=[
                PersonSpec(scale=0.9, motion="walk-line", start=(-0.8, 2.05),
                           end=(-0.35, 2.9), speed=0.3),
                PersonSpec(scale=1.0, motion="stand", start=(0.75, 2.45)),
                PersonSpec(scale=1.1, motion="walk-circle", start=(0.1, 4.35),
                           radius=0.45, speed=0.3, phase=0.8),
            ])
    raise ScenarioError("unknown preset %r" % name)


def spec_from_dict(d):
    noise = NoiseSpec(**d.get("noise", {}))
    persons = [PersonSpec(**{**p, "start": tuple(p.get("start", (0.0, 4.0))),
                             "end": tuple(p["end"]) if p.get("end") else None})
               for p in d["persons"]]
    kwargs = {k: v for k, v in d.items() if k not in ("noise", "persons")}
    if "ramp" in kwargs and kwargs["ramp"] is not None:
        kwargs["ramp"] = tuple(kwargs["ramp"])
    return ScenarioSpec(persons=persons, noise=noise, **kwargs)


def spec_to_dict(spec):
    d = asdict(spec)
    return d
