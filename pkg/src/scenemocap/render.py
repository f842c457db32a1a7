"""Differentiable rasterization of triangle meshes into depth maps and silhouettes.

Depth uses a hard z-buffer with perspective-correct barycentric interpolation:
interior pixels carry gradients w.r.t. the vertices, coverage boundaries do
not. Silhouettes are soft: sigmoid of the signed pixel distance to the
coverage outline (sharpness tau), so gradients exist across boundaries.

Rasterization is sparse: candidate (face, pixel) pairs come from integer
bounding boxes computed on detached geometry, the per-pair math is
differentiable, and per-pixel winners are selected by an exact value match
with ties broken toward the lowest pair index, so repeated runs are
bit-identical.

Meshes live in camera coordinates. Faces with any vertex at or behind the
camera plane are dropped and flagged.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .camera import project

_AREA_EPS = 1e-12
_FAR_DIST = 1.0e4  # saturates the sigmoid exactly at any practical sharpness


class MeshTopology:
    """Static edge structure of a triangle mesh, shared across renders."""

    def __init__(self, faces):
        faces = np.asarray(faces, dtype=np.int64)
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
        edges.sort(axis=1)
        self.edges, inverse = np.unique(edges, axis=0, return_inverse=True)
        self.face_edges = inverse.reshape(3, len(faces)).T  # (F, 3) edge ids


@dataclass
class RenderResult:
    """Per-person render. `depth` is 0 on empty pixels, `silhouette` in [0, 1].

    `visibility` is filled in by visibility_masks: 1 where this person is the
    frontmost rendered surface (a subset of the hard coverage mask).
    """
    depth: torch.Tensor
    silhouette: torch.Tensor
    cover: torch.Tensor  # bool, detached hard coverage
    visibility: np.ndarray = None
    behind_camera: bool = False
    empty: bool = False


def _empty_result(cam, dtype, behind):
    return RenderResult(
        depth=torch.zeros(cam.height, cam.width, dtype=dtype),
        silhouette=torch.zeros(cam.height, cam.width, dtype=dtype),
        cover=torch.zeros(cam.height, cam.width, dtype=torch.bool),
        behind_camera=behind, empty=True)


def _face_setup(cam, verts, faces, cull):
    """Project and select rasterizable faces; returns None if nothing remains."""
    if isinstance(faces, np.ndarray):
        faces = torch.as_tensor(np.ascontiguousarray(faces), dtype=torch.long)
    pix, valid = project(cam, verts)
    z = verts[..., 2]
    face_ok = valid[faces].all(dim=1)
    dropped_behind = bool((~face_ok).any())
    if not face_ok.any():
        return None, dropped_behind
    idx = torch.nonzero(face_ok, as_tuple=False)[:, 0]
    tri = pix[faces[idx]]                 # (F, 3, 2)
    triz = z[faces[idx]]                  # (F, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    if cull:
        # outward-wound (counter-clockwise seen from outside) faces that look
        # toward the camera project with negative signed area
        keep = area2 < -_AREA_EPS
    else:
        keep = area2.abs() > _AREA_EPS
    if not keep.any():
        return None, dropped_behind
    idx = idx[keep]
    return (tri[keep], triz[keep], area2[keep], faces[idx], idx, pix), dropped_behind


def _box_pairs(x0, x1, y0, y1, u0, u1, v0, v1):
    """Sparse (item, pixel) pairs from per-item integer boxes, clipped to the
    patch [u0,u1) x [v0,v1). Returns (item_idx, px, py) int arrays."""
    x0 = np.maximum(x0, u0)
    y0 = np.maximum(y0, v0)
    x1 = np.minimum(x1, u1 - 1)
    y1 = np.minimum(y1, v1 - 1)
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    ok = (w > 0) & (h > 0)
    if not ok.any():
        return (np.empty(0, np.int64),) * 3
    idx = np.nonzero(ok)[0]
    wmax, hmax = int(w[ok].max()), int(h[ok].max())
    du, dv = np.meshgrid(np.arange(wmax), np.arange(hmax), indexing="xy")
    du, dv = du.ravel(), dv.ravel()
    item = np.repeat(idx, du.size)
    px = (x0[idx][:, None] + du[None, :]).ravel()
    py = (y0[idx][:, None] + dv[None, :]).ravel()
    keep = (px <= x1[item]) & (py <= y1[item])
    return item[keep], px[keep], py[keep]


def _winner_gather(values, pid, n_pix):
    """Per-pixel minimum of `values` grouped by pixel id, differentiable.

    The winning pair per pixel is found on detached values (exact match, ties
    to the lowest pair index) and the result gathers the live tensor, so
    gradients flow only to the winner. Returns (out (n_pix,), covered bool)."""
    detached = values.detach()
    vmin = torch.full((n_pix,), float("inf"), dtype=values.dtype)
    vmin.scatter_reduce_(0, pid, detached, reduce="amin", include_self=True)
    is_win = detached == vmin[pid]
    big = torch.iinfo(torch.long).max
    widx = torch.full((n_pix,), big, dtype=torch.long)
    pair_ids = torch.arange(values.shape[0], dtype=torch.long)
    widx.scatter_reduce_(0, pid[is_win], pair_ids[is_win], reduce="amin",
                         include_self=True)
    covered = widx < big
    out = torch.zeros(n_pix, dtype=values.dtype)
    if bool(covered.any()):
        out = out.masked_scatter(covered, values[widx[covered]])
    return out, covered


def _rasterize_faces(tri, triz, area2, patch, want_depth):
    """Coverage and (optionally) z-buffer depth over the patch, sparsely."""
    u0, u1, v0, v1 = patch
    pw, ph = u1 - u0, v1 - v0
    n_pix = pw * ph
    dtype = tri.dtype

    with torch.no_grad():
        t = tri.cpu().numpy()
        x0 = np.floor(t[..., 0].min(axis=1)).astype(np.int64)
        x1 = np.ceil(t[..., 0].max(axis=1)).astype(np.int64)
        y0 = np.floor(t[..., 1].min(axis=1)).astype(np.int64)
        y1 = np.ceil(t[..., 1].max(axis=1)).astype(np.int64)
    face, px, py = _box_pairs(x0, x1, y0, y1, u0, u1, v0, v1)
    cover = torch.zeros(n_pix, dtype=torch.bool)
    if face.size == 0:
        return (torch.zeros(n_pix, dtype=dtype), cover) if want_depth else (None, cover)

    face_t = torch.as_tensor(face)
    pxt = torch.as_tensor(px).to(dtype)
    pyt = torch.as_tensor(py).to(dtype)
    a = tri[face_t, 0]
    b = tri[face_t, 1]
    c = tri[face_t, 2]
    a2 = area2[face_t]
    # barycentric weights via edge functions, normalized by the signed area
    wa = ((c[:, 0] - b[:, 0]) * (pyt - b[:, 1]) - (c[:, 1] - b[:, 1]) * (pxt - b[:, 0])) / a2
    wb = ((a[:, 0] - c[:, 0]) * (pyt - c[:, 1]) - (a[:, 1] - c[:, 1]) * (pxt - c[:, 0])) / a2
    wc = 1.0 - wa - wb
    inside = ((wa >= 0) & (wb >= 0) & (wc >= 0)).detach()
    if not bool(inside.any()):
        return (torch.zeros(n_pix, dtype=dtype), cover) if want_depth else (None, cover)

    pid = (torch.as_tensor(py) - v0) * pw + (torch.as_tensor(px) - u0)
    pid_in = pid[inside]
    cover[pid_in] = True
    if not want_depth:
        return None, cover

    sel = inside
    zface = triz[face_t[sel]]
    inv_z = wa[sel] / zface[:, 0] + wb[sel] / zface[:, 1] + wc[sel] / zface[:, 2]
    zval = 1.0 / inv_z.clamp(min=1.0 / 1e9)
    depth, _ = _winner_gather(zval, pid_in, n_pix)
    return depth, cover


def _outline_edges(kept_faces, kept_idx, topology, pix, cover_patch, patch):
    """Endpoint indices of the coverage outline.

    Edges belonging to exactly one kept face bound the projected coverage (for
    a closed mesh with back faces culled these are the silhouette edges).
    Edges buried inside the coverage of other faces (all four pixel neighbours
    of the midpoint covered) are interior to the union and dropped. Falls back
    to all edges when the face set has no once-counted edge.
    """
    if topology is not None:
        used = topology.face_edges[kept_idx.cpu().numpy()].ravel()
        counts = np.bincount(used, minlength=len(topology.edges))
        boundary = topology.edges[counts == 1]
        if len(boundary) == 0:
            boundary = topology.edges[np.unique(used)]
    else:
        f = kept_faces.detach().cpu().numpy()
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        edges.sort(axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        boundary = uniq[counts == 1]
        if len(boundary) == 0:
            boundary = uniq

    u0, u1, v0, v1 = patch
    cov = cover_patch.detach().cpu().numpy().reshape(v1 - v0, u1 - u0)
    with torch.no_grad():
        p = pix.detach().cpu().numpy()
    mid = 0.5 * (p[boundary[:, 0]] + p[boundary[:, 1]])  # (E, 2)
    mx = mid[:, 0] - u0
    my = mid[:, 1] - v0
    interior = np.ones(len(boundary), dtype=bool)
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        ix = np.floor(mx).astype(np.int64) + dx
        iy = np.floor(my).astype(np.int64) + dy
        ok = (ix >= 0) & (ix < cov.shape[1]) & (iy >= 0) & (iy < cov.shape[0])
        covered = np.zeros(len(boundary), dtype=bool)
        covered[ok] = cov[iy[ok], ix[ok]]
        interior &= covered
    if interior.all():
        return torch.as_tensor(boundary, dtype=torch.long)
    return torch.as_tensor(boundary[~interior], dtype=torch.long)


def _outline_distance(edge_idx, pix, patch, margin, dtype):
    """Per-pixel distance to the nearest outline edge within `margin` pixels;
    pixels further away read a saturating constant."""
    u0, u1, v0, v1 = patch
    pw, ph = u1 - u0, v1 - v0
    n_pix = pw * ph
    p0 = pix[edge_idx[:, 0]]
    p1 = pix[edge_idx[:, 1]]
    with torch.no_grad():
        q0 = p0.cpu().numpy()
        q1 = p1.cpu().numpy()
        x0 = np.floor(np.minimum(q0[:, 0], q1[:, 0])).astype(np.int64) - margin
        x1 = np.ceil(np.maximum(q0[:, 0], q1[:, 0])).astype(np.int64) + margin
        y0 = np.floor(np.minimum(q0[:, 1], q1[:, 1])).astype(np.int64) - margin
        y1 = np.ceil(np.maximum(q0[:, 1], q1[:, 1])).astype(np.int64) + margin
    edge, px, py = _box_pairs(x0, x1, y0, y1, u0, u1, v0, v1)
    if edge.size == 0:
        return torch.full((n_pix,), _FAR_DIST, dtype=dtype)
    edge_t = torch.as_tensor(edge)
    a = p0[edge_t]
    b = p1[edge_t]
    pxt = torch.as_tensor(px).to(dtype)
    pyt = torch.as_tensor(py).to(dtype)
    ex = b[:, 0] - a[:, 0]
    ey = b[:, 1] - a[:, 1]
    dx = pxt - a[:, 0]
    dy = pyt - a[:, 1]
    t = torch.clamp((dx * ex + dy * ey) / (ex * ex + ey * ey).clamp(min=1e-30), 0.0, 1.0)
    rx = dx - t * ex
    ry = dy - t * ey
    d2 = rx * rx + ry * ry
    pid = (torch.as_tensor(py) - v0) * pw + (torch.as_tensor(px) - u0)
    d2min, covered = _winner_gather(d2, pid, n_pix)
    out = torch.where(covered, torch.sqrt(d2min + 1e-30),
                      torch.full((n_pix,), _FAR_DIST, dtype=dtype))
    return out


def _patch_bounds(tri, cam, margin):
    with torch.no_grad():
        u0 = int(torch.floor(tri[..., 0].min()).item()) - margin
        u1 = int(torch.ceil(tri[..., 0].max()).item()) + margin + 1
        v0 = int(torch.floor(tri[..., 1].min()).item()) - margin
        v1 = int(torch.ceil(tri[..., 1].max()).item()) + margin + 1
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, cam.width), min(v1, cam.height)
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, u1, v0, v1


def sil_margin_for_tau(tau):
    """Distance beyond which the sigmoid saturates to exactly 0/1 in float64."""
    return max(2, int(np.ceil(40.0 / tau)))


def render_mesh(cam, verts, faces, tau=8.0, cull=False, want_depth=True,
                want_sil=True, topology=None):
    """Render one mesh; shared geometry pass for depth and soft silhouette."""
    verts = torch.as_tensor(verts)
    dtype = verts.dtype
    setup, dropped = _face_setup(cam, verts, faces, cull)
    if setup is None:
        return _empty_result(cam, dtype, dropped)
    tri, triz, area2, kept_faces, kept_idx, pix = setup
    margin = sil_margin_for_tau(tau) if want_sil else 0
    bounds = _patch_bounds(tri, cam, margin)
    if bounds is None:
        return _empty_result(cam, dtype, dropped)
    u0, u1, v0, v1 = bounds
    pw, ph = u1 - u0, v1 - v0

    depth_patch, cover_patch = _rasterize_faces(tri, triz, area2, bounds, want_depth)

    depth_full = torch.zeros(cam.height, cam.width, dtype=dtype)
    cover_full = torch.zeros(cam.height, cam.width, dtype=torch.bool)
    sil_full = torch.zeros(cam.height, cam.width, dtype=dtype)
    cover_full[v0:v1, u0:u1] = cover_patch.reshape(ph, pw)
    if want_depth:
        depth_full[v0:v1, u0:u1] = depth_patch.reshape(ph, pw)
    if want_sil:
        edge_idx = _outline_edges(kept_faces, kept_idx, topology, pix, cover_patch, bounds)
        dist = _outline_distance(edge_idx, pix, bounds, margin, dtype)
        field = torch.where(cover_patch, dist, -dist)
        sil_full[v0:v1, u0:u1] = torch.sigmoid(tau * field).reshape(ph, pw)
    return RenderResult(depth=depth_full, silhouette=sil_full, cover=cover_full,
                        behind_camera=dropped, empty=not bool(cover_full.any()))


def rasterize_depth(cam, verts, faces, cull=False):
    """Z-buffered depth map (0 = empty). Differentiable on interior pixels."""
    return render_mesh(cam, verts, faces, cull=cull, want_sil=False)


def rasterize_silhouette(cam, verts, faces, tau=8.0, cull=False):
    """Soft coverage in [0, 1]: sigmoid(tau * signed distance to the outline)."""
    return render_mesh(cam, verts, faces, tau=tau, cull=cull, want_depth=False)


def visibility_masks(renders):
    """Fill per-person visibility: 1 iff the person is strictly frontmost.

    Ties go to the lower person index. Pixels covered by a single person keep
    visibility 1 there. Returns the masks and stores them on each render.
    """
    if not renders:
        return []
    stack = []
    covers = []
    for r in renders:
        d = r.depth.detach().cpu().numpy() if isinstance(r.depth, torch.Tensor) else np.asarray(r.depth)
        c = r.cover.detach().cpu().numpy() if isinstance(r.cover, torch.Tensor) else np.asarray(r.cover)
        covers.append(c.astype(bool))
        stack.append(np.where(c, d, np.inf))
    stack = np.stack(stack, axis=0)
    front = np.argmin(stack, axis=0)  # first minimum -> lowest index on ties
    any_cover = np.isfinite(stack).any(axis=0)
    masks = []
    for n, r in enumerate(renders):
        sigma = covers[n] & any_cover & (front == n)
        r.visibility = sigma
        masks.append(sigma)
    return masks
