"""Orthographic rasterizer and ground-truth flow for the kinematic hand."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .skeleton import BONES, HandSkeleton, NUM_JOINTS, forward_kinematics, palm_outline

BACKGROUND = 0.08


class HandOutOfFrame(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    height: int = 64
    width: int = 64
    mm_per_px: float = 4.0
    finger_radius_mm: tuple = (8.0, 7.0, 7.5, 7.0, 6.0)
    background: float = BACKGROUND
    # depth range mapped onto shading 1.0 (near) .. 0.5 (far)
    z_near: float = 200.0
    z_far: float = 400.0
    margin_px: float = 1.0
    # ground-truth flow extends this far past the silhouette
    flow_margin_px: float = 2.0
    aa_width_px: float = 3.0

    @classmethod
    def for_size(cls, height: int, width: int | None = None, **kw) -> "RenderConfig":
        width = height if width is None else width
        return cls(height=height, width=width, mm_per_px=4.0 * 64.0 / min(height, width), **kw)


@dataclass
class Raster:
    image: np.ndarray        # (H, W) linear intensity
    coverage: np.ndarray     # (H, W) union coverage in [0, 1]
    cov: np.ndarray          # (K, H, W) per-primitive coverage
    dist: np.ndarray         # (K, H, W) distance past the primitive surface, px
    weights: np.ndarray      # (K, H, W) visibility weights after compositing
    params: list = field(default_factory=list)  # per-primitive correspondence data


def project(cfg: RenderConfig, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthographic projection to pixel coordinates ``(u, v)`` and depth."""
    cx = (cfg.width - 1) / 2.0
    cy = (cfg.height - 1) / 2.0
    uv = np.stack([cx + pts[:, 0] / cfg.mm_per_px, cy + pts[:, 1] / cfg.mm_per_px], axis=1)
    return uv, pts[:, 2]


def _grid(cfg: RenderConfig):
    gy, gx = np.meshgrid(np.arange(cfg.height, dtype=np.float64), np.arange(cfg.width, dtype=np.float64), indexing="ij")
    return gx, gy


def _edge(cfg, x):
    t = np.clip(x / cfg.aa_width_px + 0.5, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _shade(cfg: RenderConfig, z: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - 0.5 * (z - cfg.z_near) / (cfg.z_far - cfg.z_near), 0.5, 1.0)


def _capsule(cfg, gx, gy, a, b, za, zb, r):
    ab = b - a
    l2 = float(ab @ ab)
    if l2 < 1e-12:
        u = np.zeros_like(gx)
    else:
        u = np.clip(((gx - a[0]) * ab[0] + (gy - a[1]) * ab[1]) / l2, 0.0, 1.0)
    dx = gx - (a[0] + u * ab[0])
    dy = gy - (a[1] + u * ab[1])
    d = np.sqrt(dx * dx + dy * dy)
    cov = _edge(cfg, r - d)
    bulge = np.maximum(r * r - d * d, 0.0) / r * cfg.mm_per_px
    depth = za + u * (zb - za) - bulge
    return cov, depth, d - r, (u, dx, dy)


def _polygon(gx, gy, poly):
    area = 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    sgn = 1.0 if area > 0 else -1.0
    sd = np.full(gx.shape, -np.inf)
    n = len(poly)
    for i in range(n):
        p0, p1 = poly[i], poly[(i + 1) % n]
        e = p1 - p0
        length = np.hypot(e[0], e[1])
        # outward normal for a polygon of orientation sgn (image y points down)
        nx, ny = sgn * e[1] / length, -sgn * e[0] / length
        sd = np.maximum(sd, (gx - p0[0]) * nx + (gy - p0[1]) * ny)
    return sd


def check_in_frame(cfg: RenderConfig, skel: HandSkeleton) -> None:
    pts = np.concatenate([forward_kinematics(skel), palm_outline(skel)])
    uv, _ = project(cfg, pts)
    m = cfg.margin_px + max(cfg.finger_radius_mm) / cfg.mm_per_px
    if (uv[:, 0] < m).any() or (uv[:, 0] > cfg.width - 1 - m).any() or (uv[:, 1] < m).any() or (uv[:, 1] > cfg.height - 1 - m).any():
        raise HandOutOfFrame("hand projects outside the frame margin")


def rasterize(skel: HandSkeleton, cfg: RenderConfig) -> Raster:
    check_in_frame(cfg, skel)
    joints = forward_kinematics(skel)
    juv, jz = project(cfg, joints)
    outline = palm_outline(skel)
    puv, pz = project(cfg, outline)
    gx, gy = _grid(cfg)

    covs, depths, dists, params = [], [], [], []
    sd = _polygon(gx, gy, puv)
    covs.append(_edge(cfg, -sd))
    plane, *_ = np.linalg.lstsq(np.c_[puv, np.ones(len(puv))], pz, rcond=None)
    depths.append(plane[0] * gx + plane[1] * gy + plane[2])
    dists.append(sd)
    params.append(("palm", puv))
    for f, j0, j1 in BONES:
        r = cfg.finger_radius_mm[f] / cfg.mm_per_px
        cov, depth, dist, local = _capsule(cfg, gx, gy, juv[j0], juv[j1], jz[j0], jz[j1], r)
        covs.append(cov)
        depths.append(depth)
        dists.append(dist)
        params.append(("bone", (j0, j1), juv[j0], juv[j1], local, f))
    cov = np.stack(covs)
    depth = np.stack(depths)
    shade = _shade(cfg, depth)

    # painter's compositing, far to near per pixel
    order = np.argsort(-np.where(cov > 0, depth, -np.inf), axis=0, kind="stable")
    cov_o = np.take_along_axis(cov, order, axis=0)
    shade_o = np.take_along_axis(shade, order, axis=0)
    img = np.full(gx.shape, cfg.background)
    for k in range(cov.shape[0]):
        img = img * (1.0 - cov_o[k]) + shade_o[k] * cov_o[k]

    # visibility weights, near to far
    w_o = np.zeros_like(cov_o)
    trans = np.ones(gx.shape)
    for k in range(cov.shape[0] - 1, -1, -1):
        w_o[k] = trans * cov_o[k]
        trans = trans * (1.0 - cov_o[k])
    weights = np.empty_like(w_o)
    np.put_along_axis(weights, order, w_o, axis=0)
    return Raster(img, 1.0 - trans, cov, np.stack(dists), weights, params)


def render_hand(skel: HandSkeleton, height: int = 64, width: int = 64, cfg: RenderConfig | None = None) -> np.ndarray:
    """Linear-intensity image in [0, 1]; background 0.08, hand shaded by depth."""
    cfg = cfg or RenderConfig.for_size(height, width)
    return rasterize(skel, cfg).image


def _rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def gt_flow(skel_a: HandSkeleton, skel_b: HandSkeleton, height: int = 64, width: int = 64, cfg: RenderConfig | None = None) -> np.ndarray:
    """Per-pixel displacement (H, W, 2) of the hand surface from a to b.

    Every primitive maps its pixels by its own correspondence: capsules keep the
    axis parameter and rotate the perpendicular offset with the bone, the rigid
    palm maps affinely. Visible primitives are blended by their compositing
    weights, so the nearest surface wins on opaque pixels. Pixels within
    ``flow_margin_px`` outside the silhouette take the flow of the closest
    primitive; the rest of the background has zero flow.
    """
    cfg = cfg or RenderConfig.for_size(height, width)
    ra = rasterize(skel_a, cfg)
    check_in_frame(cfg, skel_b)
    juv_b, _ = project(cfg, forward_kinematics(skel_b))
    puv_b, _ = project(cfg, palm_outline(skel_b))
    gx, gy = _grid(cfg)

    flows = []
    for prm in ra.params:
        if prm[0] == "palm":
            puv_a = prm[1]
            src = np.c_[puv_a, np.ones(len(puv_a))]
            # affine fit of the displacement, exact zero for no motion
            aff, *_ = np.linalg.lstsq(src, puv_b - puv_a, rcond=None)  # (3, 2)
            fu = aff[0, 0] * gx + aff[1, 0] * gy + aff[2, 0]
            fv = aff[0, 1] * gx + aff[1, 1] * gy + aff[2, 1]
            flows.append(np.stack([fu, fv], axis=-1))
            continue
        _, (j0, j1), a, b, (u, dx, dy), _ = prm
        a2, b2 = juv_b[j0], juv_b[j1]
        ab, ab2 = b - a, b2 - a2
        # the axis direction of a bone seen end-on is ill-defined, so the
        # offset rotation fades out as the projected length drops below r
        r = cfg.finger_radius_mm[prm[5]] / cfg.mm_per_px
        short = min(np.hypot(*ab), np.hypot(*ab2))
        if short < 1e-9:
            rot = np.eye(2)
        else:
            dth = np.arctan2(ab2[1], ab2[0]) - np.arctan2(ab[1], ab[0])
            dth = (dth + np.pi) % (2 * np.pi) - np.pi
            rot = _rot2(dth * np.clip(short / r - 1.0, 0.0, 1.0))
        da, dab = a2 - a, ab2 - ab
        m = rot - np.eye(2)
        fu = da[0] + u * dab[0] + m[0, 0] * dx + m[0, 1] * dy
        fv = da[1] + u * dab[1] + m[1, 0] * dx + m[1, 1] * dy
        flows.append(np.stack([fu, fv], axis=-1))
    flows = np.stack(flows)  # (K, H, W, 2)

    wsum = ra.weights.sum(axis=0)
    out = np.zeros(gx.shape + (2,))
    vis = wsum > 1e-12
    out[vis] = (ra.weights[:, vis, None] * flows[:, vis]).sum(axis=0) / wsum[vis, None]
    nearest = np.argmin(ra.dist, axis=0)
    near_d = np.take_along_axis(ra.dist, nearest[None], axis=0)[0]
    band = ~vis & (near_d < cfg.flow_margin_px)
    if band.any():
        sel = np.take_along_axis(flows, nearest[None, ..., None], axis=0)[0]
        out[band] = sel[band]
    return out


def hand_mask(*rasters: Raster) -> np.ndarray:
    m = np.zeros(rasters[0].coverage.shape, dtype=bool)
    for r in rasters:
        m |= r.coverage > 0
    return m
