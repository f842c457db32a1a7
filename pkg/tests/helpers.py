"""Shared fixtures for the energy gradient checks and small pipeline tests."""

import numpy as np
import torch

from scenemocap.body import synthetic_body
from scenemocap.energy import (EnergyWeights, OptimState, PreparedSequence,
                               compute_filtered_targets, total_energy)
from scenemocap.observations import load_sequence
from scenemocap.scene import UniformGridIndex, ScenePointCloud
from scenemocap.synth import NoiseSpec, PersonSpec, ScenarioSpec, generate


def point_triangle_distance(p, a, b, c):
    """Exact distance from point p to triangle (a, b, c); test-side oracle."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.linalg.norm(p - a)
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.linalg.norm(p - b)
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        t = d1 / (d1 - d3)
        return np.linalg.norm(p - (a + t * ab))
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.linalg.norm(p - c)
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        t = d2 / (d2 - d6)
        return np.linalg.norm(p - (a + t * ac))
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.linalg.norm(p - (b + t * (c - b)))
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return np.linalg.norm(p - (a + ab * v + ac * w))


def point_mesh_distance(p, verts, faces):
    return min(point_triangle_distance(p, verts[f[0]], verts[f[1]], verts[f[2]])
               for f in faces)


def mini_scenario(seed=0, frame_count=2, noisy=True):
    noise = NoiseSpec(joint_px=1.0, disparity=0.01, pose_angle=0.05, beta=0.05) \
        if noisy else NoiseSpec()
    return ScenarioSpec(
        name="mini", seed=seed, frame_count=frame_count, fps=10.0,
        width=64, height=48, focal=44.0, ground_y=0.8, wall_z=5.0, noise=noise,
        persons=[
            PersonSpec(scale=0.9, motion="walk-line", start=(-0.7, 2.2),
                       end=(-0.4, 2.4), speed=0.4),
            PersonSpec(scale=1.1, motion="stand", start=(0.55, 2.4)),
        ])


def plane_cloud(y=0.8, extent=2.5, step=0.08):
    xs, zs = np.meshgrid(np.arange(-extent, extent, step),
                         np.arange(0.5, 2 * extent, step))
    pts = np.stack([xs.ravel(), np.full(xs.size, y), zs.ravel()], axis=1)
    return ScenePointCloud(points=pts, source_pixels=np.zeros((len(pts), 2), np.int64),
                           index=UniformGridIndex(pts, cell_size=0.25))


def fd_fixture(tmp_path, seed, body=None, frame_count=2):
    """Small prepared sequence + a random state off the ground truth."""
    body = body or synthetic_body(segments=3, rings=2)
    truth = generate(mini_scenario(seed=seed, frame_count=frame_count), tmp_path, body=body)
    seq = load_sequence(truth.manifest_path)
    prepared = PreparedSequence(seq, body, downsample=1, tau=8.0)
    rng = np.random.default_rng(seed + 1000)
    t_count, n_count = prepared.num_frames, prepared.num_persons
    state = OptimState.from_values(
        theta=truth.theta[:n_count] + rng.normal(0, 0.03, truth.theta[:n_count].shape),
        beta=truth.beta[:n_count] + rng.normal(0, 0.1, truth.beta[:n_count].shape),
        gamma=truth.gamma[:n_count] + rng.normal(0, 0.02, truth.gamma[:n_count].shape),
        scale=truth.scale[:n_count] * np.exp(rng.normal(0, 0.03, n_count)),
        z_near=truth.z_near * np.exp(rng.normal(0, 0.05, t_count)),
        z_far=truth.z_far * np.exp(rng.normal(0, 0.05, t_count)),
        presence=prepared.presence)
    cloud = plane_cloud(y=0.8)
    targets = compute_filtered_targets(state, body, rate=seq.fps)
    # perturb away from the targets so the temporal term is active
    with torch.no_grad():
        state.gamma += torch.as_tensor(rng.normal(0, 0.01, tuple(state.gamma.shape)))
    return state, prepared, body, cloud, targets


def flat_energy_fn(prepared, body, weights, stage, term, cloud, targets):
    """Scalar objective of the flat parameter vector with one term enabled."""
    disable = set(n for n in ("depth", "joints", "silhouette", "smpl", "scale",
                              "speed", "contact", "slip", "temporal") if n != term)

    def f(state):
        rep = total_energy(state, prepared, weights, stage, body,
                           cloud=cloud, targets=targets, disable=disable,
                           compute_grad=False)
        return rep.terms[term]
    return f


def perturb_flat(state, index, delta):
    """New state with one flat-vector coordinate shifted by delta."""
    new = state.detached_copy(requires_grad=True)
    offset = 0
    with torch.no_grad():
        for name in state.PARAM_NAMES:
            p = getattr(new, name)
            n = p.numel()
            if offset <= index < offset + n:
                flat = p.view(-1)
                flat[index - offset] += delta
                break
            offset += n
    return new


def check_term_gradient(state, prepared, body, weights, term, stage, cloud, targets,
                        coord_indices, step=1e-5, rel_tol=1e-4):
    """Compare the analytic gradient against central differences on a subset
    of flat coordinates; returns the worst relative error."""
    disable = set(n for n in ("depth", "joints", "silhouette", "smpl", "scale",
                              "speed", "contact", "slip", "temporal") if n != term)
    rep = total_energy(state, prepared, weights, stage, body, cloud=cloud,
                       targets=targets, disable=disable, compute_grad=True,
                       flat_gradient=True)
    f = flat_energy_fn(prepared, body, weights, stage, term, cloud, targets)
    worst = 0.0
    scale_ref = max(np.abs(rep.gradient).max(), 1e-8)
    for idx in coord_indices:
        hi = f(perturb_flat(state, idx, +step))
        lo = f(perturb_flat(state, idx, -step))
        num = (hi - lo) / (2 * step)
        ana = rep.gradient[idx]
        denom = max(abs(num), 1e-3 * scale_ref, 1e-10)
        worst = max(worst, abs(ana - num) / denom)
    return worst, rep
