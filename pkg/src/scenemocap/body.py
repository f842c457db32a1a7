"""Parametric articulated body: shape blendshapes, forward kinematics, linear blend skinning.

The model follows the standard 24-joint layout (axis-angle pose theta with the
global rotation at joint 0, PCA shape coefficients beta). On top of the
skinned mesh V, a per-person uniform scale s and translation gamma place the
body in the camera frame: V_world = s * V + gamma.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

NUM_JOINTS = 24

JOINT_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
]

KINEMATIC_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int64,
)

ROOT_JOINT = 0


class BodyModelError(ValueError):
    pass


@dataclass
class BodyModel:
    """Container for the body template and its linear deformation machinery.

    template_vertices: (Vn, 3) meters
    shape_dirs:        (Vn, 3, B) meters per unit beta
    skin_weights:      (Vn, K) rows sum to 1
    kinematic_parents: (K,) parent joint indices, parents[0] == -1
    joint_regressor_skeleton: (K, Vn) rest joints for forward kinematics
    joint_regressor_eval:     (J, Vn) evaluation joints
    faces:             (F, 3) vertex indices
    pose_dirs: optional (Vn, 3, P) corrective blendshapes; added after the
        shape blendshapes when a converted full-featured asset provides them.
    """

    template_vertices: np.ndarray
    shape_dirs: np.ndarray
    skin_weights: np.ndarray
    kinematic_parents: np.ndarray
    joint_regressor_skeleton: np.ndarray
    joint_regressor_eval: np.ndarray
    faces: np.ndarray
    joint_names: list = field(default_factory=lambda: list(JOINT_NAMES))
    pose_dirs: np.ndarray = None

    def __post_init__(self):
        self.validate()
        self._torch_cache = {}

    @property
    def num_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def num_joints(self):
        return self.kinematic_parents.shape[0]

    @property
    def num_shape_coeffs(self):
        return self.shape_dirs.shape[2]

    @property
    def num_eval_joints(self):
        return self.joint_regressor_eval.shape[0]

    def validate(self):
        vn = self.template_vertices.shape[0]
        k = self.kinematic_parents.shape[0]
        if k != NUM_JOINTS:
            raise BodyModelError("expected %d joints, got %d" % (NUM_JOINTS, k))
        if self.template_vertices.shape != (vn, 3):
            raise BodyModelError("template_vertices must be (Vn, 3)")
        if self.shape_dirs.shape[:2] != (vn, 3):
            raise BodyModelError("shape_dirs must be (Vn, 3, B)")
        if self.skin_weights.shape != (vn, k):
            raise BodyModelError("skin_weights must be (Vn, K)")
        if self.joint_regressor_skeleton.shape != (k, vn):
            raise BodyModelError("joint_regressor_skeleton must be (K, Vn)")
        if self.joint_regressor_eval.shape[1] != vn:
            raise BodyModelError("joint_regressor_eval must be (J, Vn)")
        if (self.skin_weights < -1e-9).any():
            raise BodyModelError("skin weights must be non-negative")
        for name, mat in (("skin_weights", self.skin_weights),
                          ("joint_regressor_skeleton", self.joint_regressor_skeleton),
                          ("joint_regressor_eval", self.joint_regressor_eval)):
            sums = mat.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise BodyModelError("%s rows must sum to 1" % name)
        if self.kinematic_parents[0] != -1:
            raise BodyModelError("joint 0 must be the root")
        # tree check: every parent index precedes its child and no cycles
        for j in range(1, k):
            p = self.kinematic_parents[j]
            if not (0 <= p < j):
                raise BodyModelError("kinematic_parents must form a tree in topological order")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise BodyModelError("faces must be (F, 3)")
        if self.faces.min() < 0 or self.faces.max() >= vn:
            raise BodyModelError("face indices out of range")

    def tensors(self, dtype=torch.float64):
        """Model arrays as torch tensors, cached per dtype."""
        if dtype not in self._torch_cache:
            self._torch_cache[dtype] = {
                "template": torch.as_tensor(self.template_vertices, dtype=dtype),
                "shape_dirs": torch.as_tensor(self.shape_dirs, dtype=dtype),
                "skin_weights": torch.as_tensor(self.skin_weights, dtype=dtype),
                "j_skel": torch.as_tensor(self.joint_regressor_skeleton, dtype=dtype),
                "j_eval": torch.as_tensor(self.joint_regressor_eval, dtype=dtype),
            }
        return self._torch_cache[dtype]


@dataclass
class PersonParams:
    """Per-person trajectory variables: pose per frame, shared shape/scale.

    theta: (T, K, 3) axis-angle (global rotation at joint 0)
    beta:  (B,) shape coefficients, shared across frames
    gamma: (T, 3) translation meters
    scale: positive scalar
    """
    theta: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    scale: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.scale <= 0:
            raise BodyModelError("scale must be positive")
        if not np.isfinite(self.beta).all():
            raise BodyModelError("beta must be finite")
        self.theta = canonicalize_axis_angle(self.theta)


def rodrigues(omega):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Uses the Taylor expansion of sin(t)/t and (1-cos(t))/t^2 below 1e-8 so the
    map stays differentiable (and finite) at zero rotation.
    """
    omega = torch.as_tensor(omega)
    theta2 = (omega * omega).sum(dim=-1)
    small = theta2 < 1e-16
    # evaluate sqrt on a safe argument so the unselected branch cannot produce NaN grads
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2.clamp(min=1e-16))

    zeros = torch.zeros_like(theta2)
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    k = torch.stack([
        zeros, -wz, wy,
        wz, zeros, -wx,
        -wy, wx, zeros,
    ], dim=-1).reshape(omega.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def _check_pose_shape(model, theta, beta):
    k, b = model.num_joints, model.num_shape_coeffs
    if theta.shape[-2:] != (k, 3):
        raise BodyModelError("theta must be (..., %d, 3), got %s" % (k, tuple(theta.shape)))
    if beta.shape[-1] != b:
        raise BodyModelError("beta must be (..., %d), got %s" % (b, tuple(beta.shape)))


def skin(model, theta, beta, dtype=torch.float64):
    """Skinned mesh for pose theta (K, 3) and shape beta (B,).

    Batched inputs (N, K, 3) / (N, B) produce (N, Vn, 3). Accepts numpy or
    torch; returns torch (differentiable w.r.t. theta and beta when they are
    torch tensors with requires_grad).
    """
    as_batch = True
    theta = torch.as_tensor(theta)
    beta = torch.as_tensor(beta)
    if theta.dtype.is_floating_point:
        dtype = theta.dtype
    beta = beta.to(dtype)
    theta = theta.to(dtype)
    if theta.ndim == 2:
        as_batch = False
        theta = theta[None]
        beta = beta[None]
    _check_pose_shape(model, theta, beta)
    t = model.tensors(dtype)

    n = theta.shape[0]
    k = model.num_joints
    v_shaped = t["template"][None] + torch.einsum("vcb,nb->nvc", t["shape_dirs"], beta)
    rest_joints = torch.einsum("kv,nvc->nkc", t["j_skel"], v_shaped)

    rots = rodrigues(theta)  # (n, k, 3, 3)
    if model.pose_dirs is not None:
        # corrective blendshapes of a converted full-featured asset: driven by
        # the flattened non-root rotations minus identity, added after shape
        pose_dirs = torch.as_tensor(model.pose_dirs, dtype=dtype)
        eye = torch.eye(3, dtype=dtype)
        feature = (rots[:, 1:] - eye).reshape(n, -1)
        v_shaped = v_shaped + torch.einsum("vcp,np->nvc", pose_dirs, feature)
    parents = model.kinematic_parents

    # forward kinematics: world rotation and origin of each joint
    world_rot = [rots[:, 0]]
    world_pos = [rest_joints[:, 0]]
    for j in range(1, k):
        p = parents[j]
        offset = rest_joints[:, j] - rest_joints[:, p]
        world_rot.append(world_rot[p] @ rots[:, j])
        world_pos.append(world_pos[p] + (world_rot[p] @ offset[..., None])[..., 0])
    world_rot = torch.stack(world_rot, dim=1)  # (n, k, 3, 3)
    world_pos = torch.stack(world_pos, dim=1)  # (n, k, 3)

    # remove the rest-pose joint location so transforms act on rest vertices
    trans = world_pos - (world_rot @ rest_joints[..., None])[..., 0]  # (n, k, 3)

    w = t["skin_weights"]  # (v, k)
    blended_rot = torch.einsum("vk,nkab->nvab", w, world_rot)
    blended_trans = torch.einsum("vk,nka->nva", w, trans)
    verts = (blended_rot @ v_shaped[..., None])[..., 0] + blended_trans
    return verts if as_batch else verts[0]


def pose_in_world(mesh, scale, gamma):
    """Apply the global wrapper: s * V + gamma, row-wise."""
    if isinstance(mesh, torch.Tensor):
        scale_t = torch.as_tensor(scale, dtype=mesh.dtype)
        if (scale_t <= 0).any():
            raise BodyModelError("scale must be positive")
        gamma_t = torch.as_tensor(gamma, dtype=mesh.dtype)
        return mesh * scale_t + gamma_t
    mesh = np.asarray(mesh, dtype=np.float64)
    if np.any(np.asarray(scale) <= 0):
        raise BodyModelError("scale must be positive")
    return mesh * scale + np.asarray(gamma, dtype=np.float64)


def regress_joints(model, mesh):
    """Evaluation joints W @ V; linear, so it commutes with pose_in_world."""
    if isinstance(mesh, torch.Tensor):
        return model.tensors(mesh.dtype)["j_eval"] @ mesh
    return model.joint_regressor_eval @ np.asarray(mesh, dtype=np.float64)


def canonicalize_axis_angle(theta):
    """Wrap axis-angle magnitudes into [0, 2*pi)."""
    theta = np.asarray(theta, dtype=np.float64)
    norm = np.linalg.norm(theta, axis=-1, keepdims=True)
    wrapped = np.mod(norm, 2.0 * np.pi)
    factor = np.where(norm > 0, wrapped / np.maximum(norm, 1e-12), 1.0)
    return theta * factor


# ---------------------------------------------------------------------------
# model container on disk: model.json + little-endian row-major blobs

_BLOBS = {
    "template_vertices": ("template.f32", np.float32),
    "shape_dirs": ("shape_dirs.f32", np.float32),
    "skin_weights": ("skin_weights.f32", np.float32),
    "joint_regressor_skeleton": ("J_skel.f32", np.float32),
    "joint_regressor_eval": ("J_eval.f32", np.float32),
    "faces": ("faces.u32", np.uint32),
}


def save_body_model(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "vertex_count": int(model.num_vertices),
        "joint_count": int(model.num_joints),
        "shape_count": int(model.num_shape_coeffs),
        "eval_joint_count": int(model.num_eval_joints),
        "face_count": int(model.faces.shape[0]),
        "joint_names": list(model.joint_names),
        "kinematic_parents": model.kinematic_parents.tolist(),
        "files": {},
    }
    for attr, (fname, np_dtype) in _BLOBS.items():
        arr = getattr(model, attr)
        blob = np.ascontiguousarray(arr, dtype="<" + np.dtype(np_dtype).str[1:])
        (directory / fname).write_bytes(blob.tobytes())
        meta["files"][attr] = {"path": fname, "shape": list(arr.shape)}
    if model.pose_dirs is not None:
        blob = np.ascontiguousarray(model.pose_dirs, dtype="<f4")
        (directory / "pose_dirs.f32").write_bytes(blob.tobytes())
        meta["files"]["pose_dirs"] = {"path": "pose_dirs.f32", "shape": list(model.pose_dirs.shape)}
    with open(directory / "model.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_body_model(directory):
    directory = Path(directory)
    with open(directory / "model.json") as f:
        meta = json.load(f)
    arrays = {}
    for attr, (fname, np_dtype) in _BLOBS.items():
        info = meta["files"][attr]
        raw = (directory / info["path"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<" + np.dtype(np_dtype).str[1:])
        arrays[attr] = arr.reshape(info["shape"]).astype(
            np.int64 if np_dtype == np.uint32 else np.float64)
    pose_dirs = None
    if "pose_dirs" in meta["files"]:
        info = meta["files"]["pose_dirs"]
        raw = (directory / info["path"]).read_bytes()
        pose_dirs = np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).astype(np.float64)
    return BodyModel(
        template_vertices=arrays["template_vertices"],
        shape_dirs=arrays["shape_dirs"],
        skin_weights=arrays["skin_weights"],
        kinematic_parents=np.asarray(meta["kinematic_parents"], dtype=np.int64),
        joint_regressor_skeleton=arrays["joint_regressor_skeleton"],
        joint_regressor_eval=arrays["joint_regressor_eval"],
        faces=arrays["faces"],
        joint_names=meta.get("joint_names", list(JOINT_NAMES)),
        pose_dirs=pose_dirs,
    )


# ---------------------------------------------------------------------------
# procedural low-poly body: capsules along each bone
#
# Template convention: pelvis at the origin, +Y points toward the feet
# (gravity direction in the camera/image frame), the body faces -Z. An
# untransformed template therefore stands upright for a camera looking down +Z.

_REST_JOINTS = {
    "pelvis": (0.0, 0.0, 0.0),
    "left_hip": (0.09, 0.02, 0.0),
    "right_hip": (-0.09, 0.02, 0.0),
    "spine1": (0.0, -0.12, 0.01),
    "left_knee": (0.10, 0.45, 0.0),
    "right_knee": (-0.10, 0.45, 0.0),
    "spine2": (0.0, -0.25, 0.01),
    "left_ankle": (0.105, 0.86, 0.02),
    "right_ankle": (-0.105, 0.86, 0.02),
    "spine3": (0.0, -0.38, 0.0),
    "left_foot": (0.11, 0.93, -0.10),
    "right_foot": (-0.11, 0.93, -0.10),
    "neck": (0.0, -0.50, 0.0),
    "left_collar": (0.06, -0.46, 0.0),
    "right_collar": (-0.06, -0.46, 0.0),
    "head": (0.0, -0.60, 0.01),
    "left_shoulder": (0.17, -0.47, 0.0),
    "right_shoulder": (-0.17, -0.47, 0.0),
    "left_elbow": (0.44, -0.47, 0.0),
    "right_elbow": (-0.44, -0.47, 0.0),
    "left_wrist": (0.70, -0.47, 0.0),
    "right_wrist": (-0.70, -0.47, 0.0),
    "left_hand": (0.78, -0.47, 0.0),
    "right_hand": (-0.78, -0.47, 0.0),
}

# (proximal joint, distal endpoint, radius); endpoint is a joint name or an
# explicit offset from the proximal joint for terminal bones.
_CAPSULES = [
    ("pelvis", "spine1", 0.11),
    ("spine1", "spine2", 0.115),
    ("spine2", "spine3", 0.12),
    ("spine3", "neck", 0.10),
    ("neck", "head", 0.05),
    ("head", (0.0, -0.14, 0.0), 0.085),
    ("left_hip", "left_knee", 0.065),
    ("right_hip", "right_knee", 0.065),
    ("left_knee", "left_ankle", 0.05),
    ("right_knee", "right_ankle", 0.05),
    ("left_ankle", "left_foot", 0.042),
    ("right_ankle", "right_foot", 0.042),
    ("left_foot", (0.0, 0.025, -0.06), 0.032),
    ("right_foot", (0.0, 0.025, -0.06), 0.032),
    ("left_collar", "left_shoulder", 0.05),
    ("right_collar", "right_shoulder", 0.05),
    ("left_shoulder", "left_elbow", 0.045),
    ("right_shoulder", "right_elbow", 0.045),
    ("left_elbow", "left_wrist", 0.04),
    ("right_elbow", "right_wrist", 0.04),
    ("left_wrist", "left_hand", 0.035),
    ("right_wrist", "right_hand", 0.035),
    ("left_hand", (0.07, 0.0, 0.0), 0.028),
    ("right_hand", (-0.07, 0.0, 0.0), 0.028),
]


def _orthonormal_frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2, axis


def _capsule(p0, p1, radius, segments, rings):
    """Vertices/faces of a capped tube from p0 to p1, outward CCW winding."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    e1, e2, axis = _orthonormal_frame(p1 - p0)
    angles = 2.0 * np.pi * np.arange(segments) / segments
    circle = np.outer(np.cos(angles), e1) + np.outer(np.sin(angles), e2)

    verts = []
    stations = np.linspace(0.0, 1.0, rings)
    for s in stations:
        center = p0 + s * (p1 - p0)
        verts.append(center + radius * circle)
    ring_verts = np.concatenate(verts, axis=0)
    pole0 = p0 - 0.8 * radius * axis
    pole1 = p1 + 0.8 * radius * axis
    verts = np.concatenate([ring_verts, [pole0], [pole1]], axis=0)

    faces = []
    n = segments
    for r in range(rings - 1):
        base0, base1 = r * n, (r + 1) * n
        for s in range(n):
            s2 = (s + 1) % n
            faces.append((base0 + s, base0 + s2, base1 + s))
            faces.append((base0 + s2, base1 + s2, base1 + s))
    i_pole0, i_pole1 = rings * n, rings * n + 1
    last = (rings - 1) * n
    for s in range(n):
        s2 = (s + 1) % n
        faces.append((i_pole0, s2, s))
        faces.append((i_pole1, last + s, last + s2))
    return verts, np.asarray(faces, dtype=np.int64), rings * n + 2


def synthetic_body(num_shape_coeffs=10, segments=6, rings=4, seed=0):
    """Procedural capsule-limb humanoid with the standard 24-joint layout.

    Defaults give ~620 vertices. `segments`/`rings` shrink the mesh for tests.
    """
    name_to_idx = {n: i for i, n in enumerate(JOINT_NAMES)}
    joints = np.array([_REST_JOINTS[n] for n in JOINT_NAMES], dtype=np.float64)
    children = {j: [] for j in range(NUM_JOINTS)}
    for j in range(1, NUM_JOINTS):
        children[KINEMATIC_PARENTS[j]].append(j)

    all_verts, all_faces = [], []
    weights_rows, offset = [], 0
    regressor_rings = {}  # joint -> vertex indices of its proximal ring

    for prox_name, distal, radius in _CAPSULES:
        prox = name_to_idx[prox_name]
        parent = KINEMATIC_PARENTS[prox]
        if isinstance(distal, str):
            dist_idx = name_to_idx[distal]
            p1 = joints[dist_idx]
        else:
            dist_idx = None
            p1 = joints[prox] + np.asarray(distal, dtype=np.float64)
        verts, faces, count = _capsule(joints[prox], p1, radius, segments, rings)
        all_verts.append(verts)
        all_faces.append(faces + offset)

        # weights: mostly the proximal joint; end rings blend with the
        # neighbouring joint for smooth bends
        for r in range(rings):
            row = np.zeros(NUM_JOINTS)
            if r == 0 and parent >= 0:
                row[prox], row[parent] = 0.65, 0.35
            elif r == rings - 1 and dist_idx is not None:
                row[prox], row[dist_idx] = 0.65, 0.35
            else:
                row[prox] = 1.0
            weights_rows.extend([row] * segments)
        pole0_row = np.zeros(NUM_JOINTS)
        if parent >= 0:
            pole0_row[prox], pole0_row[parent] = 0.65, 0.35
        else:
            pole0_row[prox] = 1.0
        pole1_row = np.zeros(NUM_JOINTS)
        if dist_idx is not None:
            pole1_row[prox], pole1_row[dist_idx] = 0.65, 0.35
        else:
            pole1_row[prox] = 1.0
        weights_rows.extend([pole0_row, pole1_row])

        if prox not in regressor_rings:
            regressor_rings[prox] = np.arange(offset, offset + segments)
        offset += count

    template = np.concatenate(all_verts, axis=0)
    faces = np.concatenate(all_faces, axis=0)
    skin_weights = np.asarray(weights_rows, dtype=np.float64)
    vn = template.shape[0]

    j_skel = np.zeros((NUM_JOINTS, vn))
    for j in range(NUM_JOINTS):
        ring = regressor_rings[j]
        j_skel[j, ring] = 1.0 / len(ring)
    j_eval = j_skel.copy()

    rng = np.random.default_rng(seed)
    shape_dirs = np.zeros((vn, 3, num_shape_coeffs))
    if num_shape_coeffs > 0:
        shape_dirs[:, :, 0] = 0.06 * template  # stature
    if num_shape_coeffs > 1:
        shape_dirs[:, 0, 1] = 0.05 * template[:, 0]  # girth (x/z only)
        shape_dirs[:, 2, 1] = 0.05 * template[:, 2]
    for b in range(2, num_shape_coeffs):
        freq = rng.uniform(1.0, 3.0, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.uniform(0.004, 0.012, size=3)
        for c in range(3):
            shape_dirs[:, c, b] = amp[c] * np.sin(freq[c] * template[:, 1] * np.pi + phase[c])

    return BodyModel(
        template_vertices=template,
        shape_dirs=shape_dirs,
        skin_weights=skin_weights,
        kinematic_parents=KINEMATIC_PARENTS.copy(),
        joint_regressor_skeleton=j_skel,
        joint_regressor_eval=j_eval,
        faces=faces,
    )
