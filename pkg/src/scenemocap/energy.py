"""Energy terms of the two-stage objective and their gradients.

Stage I couples the humans and the scene in absolute space: log-depth
consistency between rendered bodies and calibrated disparity, 2D joint
reprojection, silhouette overlap, closeness to the per-frame body-parameter
estimates, and scale/speed regularizers. Stage II adds ground contact,
slip suppression and temporal smoothness against filtered vertex targets.

All terms are torch scalars; gradients w.r.t. the free variables come from
reverse-mode differentiation through skinning, projection and rasterization.
Per-instance quantities are batched over the present (frame, person) pairs.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .body import regress_joints, skin
from .camera import MIN_DEPTH, project
from .render import MeshTopology, render_mesh, visibility_masks
from .scene import disparity_to_depth

TERM_NAMES = ("depth", "joints", "silhouette", "smpl", "scale", "speed",
              "contact", "slip", "temporal")
STAGE2_TERMS = ("contact", "slip", "temporal")

DEPTH_CLAMP = 1e-4


class EnergyError(ValueError):
    pass


@dataclass
class EnergyWeights:
    """Term weights; defaults balance the magnitudes of the individual terms."""
    depth: float = 0.05
    silhouette: float = 0.1
    smpl: float = 0.002
    scale: float = 0.0001
    speed: float = 0.05
    contact: float = 0.001
    slip: float = 0.01
    temporal: float = 0.002
    contact_threshold: float = 0.20
    l1_huber_delta: float = None  # optional smoothing of the L1 terms
    scale_lambda_on_both: bool = False  # apply the scale weight to the mean term too

    def __post_init__(self):
        for name in TERM_NAMES:
            if name != "joints" and getattr(self, name) < 0:
                raise EnergyError("weights must be non-negative")
        if self.contact_threshold <= 0:
            raise EnergyError("contact_threshold must be positive")

    def to_dict(self):
        d = {k: getattr(self, k) for k in TERM_NAMES if k != "joints"}
        d["contact_threshold"] = self.contact_threshold
        return d


class OptimState:
    """The full optimization variable set.

    Per person: pose theta (T, K, 3), shape beta (B,), translation gamma
    (T, 3) and a positive scale. Per frame: positive, ordered (z_near, z_far).
    Positive quantities are stored as exponentials of unconstrained reals, and
    z_far = z_near + exp(raw gap) keeps the ordering by construction.
    """

    PARAM_NAMES = ("theta", "beta", "gamma", "raw_scale", "raw_z_near", "raw_z_gap")

    def __init__(self, theta, beta, gamma, raw_scale, raw_z_near, raw_z_gap, presence):
        self.theta = theta
        self.beta = beta
        self.gamma = gamma
        self.raw_scale = raw_scale
        self.raw_z_near = raw_z_near
        self.raw_z_gap = raw_z_gap
        self.presence = np.asarray(presence, dtype=bool)  # (T, N)

    @classmethod
    def from_values(cls, theta, beta, gamma, scale, z_near, z_far, presence,
                    dtype=torch.float64, requires_grad=True):
        scale = np.asarray(scale, dtype=np.float64)
        z_near = np.asarray(z_near, dtype=np.float64)
        z_far = np.asarray(z_far, dtype=np.float64)
        if (scale <= 0).any() or (z_near <= 0).any() or (z_far <= z_near).any():
            raise EnergyError("scale and depth range must be positive with z_near < z_far")

        def t(x):
            out = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype).clone()
            out.requires_grad_(requires_grad)
            return out

        return cls(theta=t(theta), beta=t(beta), gamma=t(gamma),
                   raw_scale=t(np.log(scale)), raw_z_near=t(np.log(z_near)),
                   raw_z_gap=t(np.log(z_far - z_near)), presence=presence)

    @property
    def num_persons(self):
        return self.theta.shape[0]

    @property
    def num_frames(self):
        return self.theta.shape[1]

    @property
    def dtype(self):
        return self.theta.dtype

    def scales(self):
        return torch.exp(self.raw_scale)

    def z_near(self):
        return torch.exp(self.raw_z_near)

    def z_far(self):
        return torch.exp(self.raw_z_near) + torch.exp(self.raw_z_gap)

    def parameters(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def flat_gradient(self, grads):
        """Concatenate per-parameter gradients in the documented order."""
        out = []
        for name in self.PARAM_NAMES:
            g = grads.get(name)
            p = getattr(self, name)
            out.append(np.zeros(p.numel()) if g is None
                       else g.detach().cpu().numpy().ravel())
        return np.concatenate(out)

    def detached_copy(self, requires_grad=True):
        def c(x):
            out = x.detach().clone()
            out.requires_grad_(requires_grad)
            return out
        return OptimState(c(self.theta), c(self.beta), c(self.gamma), c(self.raw_scale),
                          c(self.raw_z_near), c(self.raw_z_gap), self.presence.copy())

    def to_dict(self):
        with torch.no_grad():
            return {
                "theta": self.theta.detach().cpu().numpy().tolist(),
                "beta": self.beta.detach().cpu().numpy().tolist(),
                "gamma": self.gamma.detach().cpu().numpy().tolist(),
                "scale": self.scales().detach().cpu().numpy().tolist(),
                "z_near": self.z_near().detach().cpu().numpy().tolist(),
                "z_far": self.z_far().detach().cpu().numpy().tolist(),
                "presence": self.presence.tolist(),
            }

    @classmethod
    def from_dict(cls, d, dtype=torch.float64):
        return cls.from_values(theta=d["theta"], beta=d["beta"], gamma=d["gamma"],
                               scale=d["scale"], z_near=d["z_near"], z_far=d["z_far"],
                               presence=np.asarray(d["presence"], dtype=bool), dtype=dtype)


def constrain_positive(raw_scale, raw_z_near, raw_z_gap):
    """Positive scale and ordered (z_near, z_far) from unconstrained reals."""
    s = torch.exp(torch.as_tensor(raw_scale))
    zn = torch.exp(torch.as_tensor(raw_z_near))
    zf = zn + torch.exp(torch.as_tensor(raw_z_gap))
    return s, zn, zf


@dataclass
class FilteredTargets:
    """Low-pass filtered vertex trajectories, fixed between refreshes."""
    v_bar: dict  # (t, n) -> (Vn, 3) float64


@dataclass
class EnergyReport:
    terms: dict
    total: float
    stage: int
    gradient: np.ndarray = None
    param_grads: dict = None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# prepared observation tensors

def _area_downsample(arr, factor):
    h, w = arr.shape
    return arr.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def downsample_mask(mask, factor):
    """Area-average then re-binarize at 0.5."""
    if factor == 1:
        return np.asarray(mask, dtype=bool)
    return _area_downsample(np.asarray(mask, dtype=np.float64), factor) >= 0.5


class PreparedSequence:
    """Observation targets converted to tensors at the rasterization resolution.

    Besides the per-(t, n) targets this caches the batched index arrays that
    let the energy terms run as single tensor expressions over all present
    (frame, person) pairs.
    """

    def __init__(self, sequence, body, downsample=2, tau=8.0, dtype=torch.float64):
        self.cam = sequence.camera
        self.cam_ds = sequence.camera.downsampled(downsample)
        self.downsample = downsample
        self.tau = float(tau)
        self.dtype = dtype
        self.fps = sequence.fps
        self.faces = torch.as_tensor(np.ascontiguousarray(body.faces), dtype=torch.long)
        self.topology = MeshTopology(body.faces)

        t_count, n_count = sequence.num_frames, sequence.num_persons
        self.num_frames, self.num_persons = t_count, n_count
        self.presence = np.zeros((t_count, n_count), dtype=bool)
        self.has_joints = np.zeros((t_count, n_count), dtype=bool)
        self.has_pose = np.zeros((t_count, n_count), dtype=bool)
        self.has_mask = np.zeros((t_count, n_count), dtype=bool)
        self.joints2d = {}
        self.joint_conf = {}
        self.masks_ds = {}
        self.omega_count = np.zeros((t_count, n_count), dtype=np.int64)
        theta_hat = {}
        self.beta_hat = torch.zeros(n_count, body.num_shape_coeffs, dtype=dtype)
        self.has_beta = np.zeros(n_count, dtype=bool)

        k = body.num_joints
        for n, track in enumerate(sequence.tracks):
            if track.beta_avg is not None:
                self.beta_hat[n] = torch.as_tensor(track.beta_avg, dtype=dtype)
                self.has_beta[n] = True
            detected = [t for t, e in enumerate(track.entries) if e is not None]
            if detected:
                # frames with missed detections inside the track span stay
                # present: excluded from the data terms but still chained
                # through the speed/temporal terms
                self.presence[detected[0]:detected[-1] + 1, n] = True
            for t, entry in enumerate(track.entries):
                if entry is None:
                    continue
                j_idx, p_idx, m_idx = entry
                frame = sequence.frames[t]
                if j_idx is not None:
                    det = frame.joints[j_idx]
                    self.joints2d[(t, n)] = np.asarray(det.joints, dtype=np.float64)
                    self.joint_conf[(t, n)] = np.asarray(det.confidence, dtype=np.float64)
                    self.has_joints[t, n] = True
                if p_idx is not None:
                    theta_hat[(t, n)] = np.asarray(
                        frame.poses[p_idx].theta, dtype=np.float64).reshape(k, 3)
                    self.has_pose[t, n] = True
                if m_idx is not None and m_idx < len(frame.person_masks):
                    mask = downsample_mask(frame.person_masks[m_idx], downsample)
                    self.masks_ds[(t, n)] = torch.as_tensor(mask)
                    self.omega_count[t, n] = int(mask.sum())
                    self.has_mask[t, n] = self.omega_count[t, n] > 0

        self.disparity_ds = torch.stack([
            torch.as_tensor(
                _area_downsample(f.disparity, downsample) if downsample > 1 else f.disparity,
                dtype=dtype)
            for f in sequence.frames])
        self.diagonal = self.cam.diagonal

        # batched index structures over present pairs, in (t, n) order
        self.pairs = [(t, n) for t in range(t_count) for n in range(n_count)
                      if self.presence[t, n]]
        self.pair_index = {pair: i for i, pair in enumerate(self.pairs)}
        self.pair_t = torch.as_tensor([t for t, _ in self.pairs], dtype=torch.long)
        self.pair_n = torch.as_tensor([n for _, n in self.pairs], dtype=torch.long)

        rows = [self.pair_index[(t, n)] for (t, n) in self.pairs if self.has_joints[t, n]]
        self.joint_rows = torch.as_tensor(rows, dtype=torch.long)
        if rows:
            sel = [self.pairs[r] for r in rows]
            self.joint_targets = torch.as_tensor(
                np.stack([self.joints2d[p] for p in sel]), dtype=dtype)
            self.joint_weights = torch.as_tensor(
                np.stack([self.joint_conf[p] for p in sel]), dtype=dtype)
        else:
            self.joint_targets = torch.zeros(0, 0, 2, dtype=dtype)
            self.joint_weights = torch.zeros(0, 0, dtype=dtype)

        rows = [self.pair_index[(t, n)] for (t, n) in self.pairs if self.has_pose[t, n]]
        self.pose_rows = torch.as_tensor(rows, dtype=torch.long)
        if rows:
            self.theta_hat = torch.as_tensor(
                np.stack([theta_hat[self.pairs[r]] for r in rows]), dtype=dtype)
        else:
            self.theta_hat = torch.zeros(0, k, 3, dtype=dtype)
        # frames-with-pose count per person weights the shape L1 term
        self.pose_counts = torch.as_tensor(
            self.has_pose.sum(axis=0).astype(np.float64), dtype=dtype)

        prev_rows, cur_rows = [], []
        for (t, n) in self.pairs:
            if t > 0 and self.presence[t - 1, n]:
                prev_rows.append(self.pair_index[(t - 1, n)])
                cur_rows.append(self.pair_index[(t, n)])
        self.consec_prev = torch.as_tensor(prev_rows, dtype=torch.long)
        self.consec_cur = torch.as_tensor(cur_rows, dtype=torch.long)

    def present_pairs(self, frames=None):
        if frames is None:
            return list(self.pairs)
        fset = set(frames)
        return [(t, n) for (t, n) in self.pairs if t in fset]


# ---------------------------------------------------------------------------
# mesh evaluation

def world_meshes(state, body, pairs):
    """Posed, shaped, scaled and translated vertices for the given (t, n) pairs."""
    if not pairs:
        return {}
    stacked = stacked_world_meshes(state, body,
                                   [n for _, n in pairs], [t for t, _ in pairs])
    return {pair: stacked[i] for i, pair in enumerate(pairs)}


def stacked_world_meshes(state, body, idx_n, idx_t):
    theta = state.theta[idx_n, idx_t]
    beta = state.beta[idx_n]
    verts = skin(body, theta, beta, dtype=state.dtype)
    s = state.scales()[idx_n][:, None, None]
    g = state.gamma[idx_n, idx_t][:, None, :]
    return verts * s + g


def world_eval_joints(state, body, pairs):
    meshes = world_meshes(state, body, pairs)
    return {pair: regress_joints(body, mesh) for pair, mesh in meshes.items()}


class EnergyEvaluation:
    """Shared per-evaluation tensors: stacked meshes, joints and renders."""

    def __init__(self, state, prepared, body, raster_frames, need_raster=True):
        self.state = state
        self.prepared = prepared
        self.meshes = stacked_world_meshes(state, body, prepared.pair_n, prepared.pair_t)
        j_eval = body.tensors(state.dtype)["j_eval"]
        self.joints_world = torch.einsum("jv,mvc->mjc", j_eval, self.meshes)
        self.raster_frames = raster_frames
        self.renders = {}
        if need_raster:
            fset = set(int(t) for t in raster_frames)
            by_frame = {}
            for i, (t, n) in enumerate(prepared.pairs):
                if t in fset:
                    by_frame.setdefault(t, []).append((n, i))
            for t, entries in by_frame.items():
                frame_renders = []
                for n, i in entries:
                    r = render_mesh(prepared.cam_ds, self.meshes[i], prepared.faces,
                                    tau=prepared.tau, cull=True,
                                    topology=prepared.topology)
                    self.renders[(t, n)] = r
                    frame_renders.append(r)
                visibility_masks(frame_renders)

    def mesh(self, t, n):
        return self.meshes[self.prepared.pair_index[(t, n)]]


# ---------------------------------------------------------------------------
# stage-I terms

def masked_log_depth_mean(depth, mask, diagnostics=None):
    """Mean log-depth over the masked pixels: sum(mask/|mask| * log D)."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    count = int(mask.sum())
    if count == 0:
        raise EnergyError("masked_log_depth_mean needs a non-empty mask")
    vals = torch.as_tensor(depth)[mask]
    n_clamped = int((vals < DEPTH_CLAMP).sum())
    if n_clamped and diagnostics is not None:
        diagnostics["clamped_pixels"] = diagnostics.get("clamped_pixels", 0) + n_clamped
    return torch.log(vals.clamp(min=DEPTH_CLAMP)).mean()


def e_depth(state, ev, weights, diagnostics=None):
    """Squared difference of masked mean log-depth: rendered bodies vs the
    calibrated disparity map. Gradients reach the body parameters through the
    rasterizer and the per-frame depth range through the conversion."""
    prepared = ev.prepared
    total = None
    converted = {}
    zn, zf = state.z_near(), state.z_far()
    for t in ev.raster_frames:
        converted[t] = disparity_to_depth(prepared.disparity_ds[t], zn[t], zf[t])
    for (t, n), render in ev.renders.items():
        if t not in converted or not prepared.has_mask[t, n]:
            continue
        omega = prepared.masks_ds[(t, n)]
        left_mask = omega & render.cover
        if not bool(left_mask.any()):
            if not bool(render.cover.any()):
                if diagnostics is not None:
                    diagnostics["depth_skipped"] = diagnostics.get("depth_skipped", 0) + 1
                continue
            left_mask = render.cover  # mask/render disjoint: use the render's own coverage
            if diagnostics is not None:
                diagnostics["depth_fallback"] = diagnostics.get("depth_fallback", 0) + 1
        left = masked_log_depth_mean(render.depth, left_mask, diagnostics)
        right = masked_log_depth_mean(converted[t], omega, diagnostics)
        term = (left - right) ** 2
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=state.dtype)
    return weights.depth * total


def e_joints(state, ev, diagnostics=None):
    """Confidence-weighted squared reprojection error of the evaluation joints,
    with pixel residuals normalized by the image diagonal."""
    prepared = ev.prepared
    if prepared.joint_rows.numel() == 0:
        return torch.zeros((), dtype=state.dtype)
    joints = ev.joints_world[prepared.joint_rows]         # (M, J, 3)
    proj, valid = project(prepared.cam, joints)
    j = min(proj.shape[1], prepared.joint_targets.shape[1])
    res = (proj[:, :j] - prepared.joint_targets[:, :j]) / prepared.diagonal
    w = prepared.joint_weights[:, :j] * valid[:, :j].to(res.dtype)
    return (w * (res ** 2).sum(dim=2)).sum()


def e_silhouette(state, ev, weights, diagnostics=None):
    """Visibility-gated squared difference between the soft silhouette and the
    observed instance mask, normalized by the mask area."""
    prepared = ev.prepared
    total = None
    for (t, n), render in ev.renders.items():
        if not prepared.has_mask[t, n]:
            continue
        omega = prepared.masks_ds[(t, n)]
        count = prepared.omega_count[t, n]
        sigma = torch.as_tensor(render.visibility) if render.visibility is not None \
            else render.cover
        res = (render.silhouette - omega.to(render.silhouette.dtype)) ** 2
        term = res[sigma].sum() / count
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=state.dtype)
    return weights.silhouette * total


def _l1(residual, delta):
    if delta is None:
        return residual.abs().sum()
    a = residual.abs()
    return torch.where(a < delta, a * a / (2 * delta), a - delta / 2).sum()


def e_smpl(state, ev, weights):
    """L1 distance of pose to the per-frame estimates and of shape to the
    sequence-averaged estimate (the shape residual counts once per matched
    frame, following the per-frame sum)."""
    prepared = ev.prepared
    if prepared.pose_rows.numel() == 0:
        return torch.zeros((), dtype=state.dtype)
    delta = weights.l1_huber_delta
    theta_sel = state.theta[prepared.pair_n[prepared.pose_rows],
                            prepared.pair_t[prepared.pose_rows]]
    total = _l1(theta_sel - prepared.theta_hat, delta)
    beta_res = state.beta - prepared.beta_hat
    if delta is None:
        beta_l1 = beta_res.abs().sum(dim=1)
    else:
        a = beta_res.abs()
        beta_l1 = torch.where(a < delta, a * a / (2 * delta), a - delta / 2).sum(dim=1)
    has = torch.as_tensor(prepared.has_beta, dtype=torch.bool)
    total = total + (prepared.pose_counts * beta_l1)[has].sum()
    return weights.smpl * total


def e_scale(state, weights):
    """Keeps individual scales near 1 and the group mean anchored; the weight
    applies to the individual sum only, the mean term is unweighted. A zero
    weight switches the whole term off (ablation semantics)."""
    if weights.scale == 0.0:
        return torch.zeros((), dtype=state.dtype)
    dev = state.scales() - 1.0
    individual = (dev ** 2).sum()
    group = dev.sum() ** 2
    if weights.scale_lambda_on_both:
        return weights.scale * (individual + group)
    return weights.scale * individual + group


def e_speed(state, ev, weights):
    """Squared root-translation velocity over consecutive present frames."""
    prepared = ev.prepared
    if prepared.consec_cur.numel() == 0:
        return torch.zeros((), dtype=state.dtype)
    n_prev = prepared.pair_n[prepared.consec_prev]
    t_prev = prepared.pair_t[prepared.consec_prev]
    n_cur = prepared.pair_n[prepared.consec_cur]
    t_cur = prepared.pair_t[prepared.consec_cur]
    d = state.gamma[n_cur, t_cur] - state.gamma[n_prev, t_prev]
    return weights.speed * (d ** 2).sum()


# ---------------------------------------------------------------------------
# stage-II terms

def lowest_vertex_contacts(ev, cloud, gravity_sign=+1):
    """Per present pair: the vertex furthest along the gravity axis, its L1
    distance to the nearest scene point, and the in-contact gate. The
    correspondence is fixed during differentiation (gradients flow through the
    vertex, not the pairing)."""
    with torch.no_grad():
        y = ev.meshes[:, :, 1] * gravity_sign
        low_idx = torch.argmax(y, dim=1)
    rows = torch.arange(ev.meshes.shape[0])
    v_low = ev.meshes[rows, low_idx]                      # (M, 3)
    nearest = cloud.nearest_points(v_low.detach().cpu().numpy())
    target = torch.as_tensor(nearest, dtype=ev.meshes.dtype)
    dist = (v_low - target).abs().sum(dim=1)              # (M,)
    return v_low, dist


def e_contact(state, ev, contacts, weights):
    """Pulls each person's lowest vertex onto the scene; distances beyond the
    threshold are ignored (robust gate)."""
    _, dist = contacts
    gate = (dist.detach() < weights.contact_threshold)
    if not bool(gate.any()):
        return torch.zeros((), dtype=state.dtype)
    return weights.contact * dist[gate].sum()


def e_slip(state, ev, contacts, weights):
    """Penalizes motion of the lowest vertex while it is in contact in both of
    two consecutive present frames."""
    prepared = ev.prepared
    v_low, dist = contacts
    if prepared.consec_cur.numel() == 0:
        return torch.zeros((), dtype=state.dtype)
    gate = dist.detach() < weights.contact_threshold
    both = gate[prepared.consec_prev] & gate[prepared.consec_cur]
    if not bool(both.any()):
        return torch.zeros((), dtype=state.dtype)
    delta = v_low[prepared.consec_cur[both]] - v_low[prepared.consec_prev[both]]
    return weights.slip * delta.abs().sum()


def e_temporal(state, ev, targets, weights):
    """Squared mismatch between live and filtered vertex velocities."""
    prepared = ev.prepared
    if prepared.consec_cur.numel() == 0:
        return torch.zeros((), dtype=state.dtype)
    rows_ok, bar_prev, bar_cur = [], [], []
    for i in range(prepared.consec_cur.numel()):
        rp, rc = int(prepared.consec_prev[i]), int(prepared.consec_cur[i])
        bp = targets.v_bar.get(prepared.pairs[rp])
        bc = targets.v_bar.get(prepared.pairs[rc])
        if bp is None or bc is None:
            continue
        rows_ok.append(i)
        bar_prev.append(bp)
        bar_cur.append(bc)
    if not rows_ok:
        return torch.zeros((), dtype=state.dtype)
    rows_ok = torch.as_tensor(rows_ok, dtype=torch.long)
    delta_live = ev.meshes[prepared.consec_cur[rows_ok]] \
        - ev.meshes[prepared.consec_prev[rows_ok]]
    delta_bar = torch.as_tensor(np.stack(bar_cur) - np.stack(bar_prev), dtype=state.dtype)
    return weights.temporal * ((delta_live - delta_bar) ** 2).sum()


# ---------------------------------------------------------------------------
# 1-euro filtering of vertex trajectories

def one_euro_alpha(cutoff, rate):
    tau = 1.0 / (2.0 * np.pi * cutoff)
    return 1.0 / (1.0 + tau * rate)


def one_euro_filter(values, rate, min_cutoff=1.0, beta_gain=0.007, d_cutoff=1.0):
    """Speed-adaptive exponential low-pass over the leading (time) axis."""
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise EnergyError("non-finite input to the temporal filter")
    if len(values) == 0:
        return values.copy()
    out = np.empty_like(values)
    out[0] = values[0]
    dx_hat = np.zeros_like(values[0])
    a_d = one_euro_alpha(d_cutoff, rate)
    for t in range(1, len(values)):
        dx = (values[t] - out[t - 1]) * rate
        dx_hat = a_d * dx + (1.0 - a_d) * dx_hat
        cutoff = min_cutoff + beta_gain * np.abs(dx_hat)
        a = one_euro_alpha(cutoff, rate)
        out[t] = a * values[t] + (1.0 - a) * out[t - 1]
    return out


def compute_filtered_targets(state, body, rate, min_cutoff=1.0, beta_gain=0.007):
    """1-euro-filter the current vertex trajectories; gaps restart the filter."""
    pairs = [(t, n) for t in range(state.num_frames) for n in range(state.num_persons)
             if state.presence[t, n]]
    with torch.no_grad():
        meshes = world_meshes(state.detached_copy(requires_grad=False), body, pairs)
    v_bar = {}
    for n in range(state.num_persons):
        run = []
        for t in range(state.num_frames + 1):
            if t < state.num_frames and state.presence[t, n]:
                run.append(t)
                continue
            if run:
                traj = np.stack([meshes[(t_, n)].cpu().numpy() for t_ in run])
                filtered = one_euro_filter(traj, rate, min_cutoff, beta_gain)
                for i, t_ in enumerate(run):
                    v_bar[(t_, n)] = filtered[i]
                run = []
    return FilteredTargets(v_bar=v_bar)


# ---------------------------------------------------------------------------
# total

def total_energy(state, prepared, weights, stage, body, raster_frames=None,
                 cloud=None, targets=None, disable=(), compute_grad=True,
                 flat_gradient=False):
    """Evaluate the staged objective and its gradient.

    Stage 1 evaluates the image-evidence terms only; stage 2 adds contact,
    slip and temporal smoothness. Raster-backed terms (depth, silhouette) are
    evaluated on `raster_frames` (default: all); the remaining terms always
    cover the full sequence.
    """
    if stage not in (1, 2):
        raise EnergyError("stage must be 1 or 2")
    if not compute_grad:
        with torch.no_grad():
            return _total_energy_impl(state, prepared, weights, stage, body,
                                      raster_frames, cloud, targets, disable,
                                      False, False)
    return _total_energy_impl(state, prepared, weights, stage, body,
                              raster_frames, cloud, targets, disable,
                              True, flat_gradient)


def _total_energy_impl(state, prepared, weights, stage, body, raster_frames,
                       cloud, targets, disable, compute_grad, flat_gradient):
    disable = set(disable)
    diagnostics = {}
    if raster_frames is None:
        raster_frames = list(range(prepared.num_frames))
    need_raster = ("depth" not in disable) or ("silhouette" not in disable)
    ev = EnergyEvaluation(state, prepared, body, raster_frames, need_raster)

    terms = {}
    zero = torch.zeros((), dtype=state.dtype)
    terms["depth"] = zero if "depth" in disable else e_depth(state, ev, weights, diagnostics)
    terms["joints"] = zero if "joints" in disable else e_joints(state, ev, diagnostics)
    terms["silhouette"] = zero if "silhouette" in disable else \
        e_silhouette(state, ev, weights, diagnostics)
    terms["smpl"] = zero if "smpl" in disable else e_smpl(state, ev, weights)
    terms["scale"] = zero if "scale" in disable else e_scale(state, weights)
    terms["speed"] = zero if "speed" in disable else e_speed(state, ev, weights)

    if stage == 2:
        contacts = None
        if cloud is not None and len(cloud) > 0 and not {"contact", "slip"} <= disable:
            contacts = lowest_vertex_contacts(ev, cloud)
        elif cloud is None or (cloud is not None and len(cloud) == 0):
            diagnostics["contact_disabled"] = True
        terms["contact"] = zero if ("contact" in disable or contacts is None) else \
            e_contact(state, ev, contacts, weights)
        terms["slip"] = zero if ("slip" in disable or contacts is None) else \
            e_slip(state, ev, contacts, weights)
        if "temporal" in disable or targets is None:
            terms["temporal"] = zero
        else:
            terms["temporal"] = e_temporal(state, ev, targets, weights)

    total = None
    for v in terms.values():
        total = v if total is None else total + v

    report = EnergyReport(
        terms={k: float(v.detach()) for k, v in terms.items()},
        total=float(total.detach()), stage=stage, diagnostics=diagnostics)

    if compute_grad:
        params = state.parameters()
        names = list(params.keys())
        grads = torch.autograd.grad(total, [params[k] for k in names],
                                    allow_unused=True, retain_graph=False)
        report.param_grads = {k: g for k, g in zip(names, grads) if g is not None}
        if flat_gradient:
            report.gradient = state.flat_gradient(report.param_grads)
    return report
