"""Software Gaussian splatting with per-pixel, per-Gaussian blend weights.

Camera frame is OpenCV style: x right, y down, z forward. Pixel (x, y) is
sampled at its integer coordinates. A Gaussian takes part at a pixel only if
the pixel lies inside its axis-aligned 3-sigma screen box; tiling merely
accelerates that test, so results do not depend on the tile size.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .scene import GaussianScene, quat_to_matrix

ALPHA_MAX = 0.99
LOWPASS = 0.3
T_MIN = 1e-4
WEIGHT_CUTOFF = 1.0 / 255.0
TILE = 16


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray      # 3x3 world-to-camera
    translation: np.ndarray   # world-to-camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def center(self):
        return -np.asarray(self.rotation).T @ np.asarray(self.translation)

    def world_to_camera(self, pts):
        return np.asarray(pts) @ np.asarray(self.rotation).T + np.asarray(self.translation)

    def scaled(self, factor):
        """Same pose and field of view at ``factor`` times the resolution."""
        return Camera(self.rotation, self.translation, self.fx * factor, self.fy * factor,
                      self.cx * factor, self.cy * factor, int(round(self.width * factor)),
                      int(round(self.height * factor)), self.near, self.far)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(rot, -rot @ eye, **intrinsics)


@dataclass
class ScreenGaussians:
    """Projected, non-culled Gaussians of one view (columnar)."""

    mean2d: np.ndarray   # (K, 2)
    cov2d: np.ndarray    # (K, 2, 2)
    depth: np.ndarray    # (K,)
    source_index: np.ndarray  # (K,)
    opacity: np.ndarray  # (K,)

    def __len__(self):
        return len(self.depth)


@dataclass
class WeightRecords:
    """Blend weights of one view, pixel-major then front-to-back."""

    pixel_x: np.ndarray
    pixel_y: np.ndarray
    gaussian: np.ndarray
    weight: np.ndarray
    width: int
    height: int
    transmittance: np.ndarray  # (H, W) final transmittance, before any cutoff

    def __len__(self):
        return len(self.weight)

    @property
    def pixel_index(self):
        return self.pixel_y.astype(np.int64) * self.width + self.pixel_x


def _covariance3d(scales, rotations):
    m = quat_to_matrix(rotations) * scales[:, None, :]
    return m @ np.swapaxes(m, 1, 2)


def project_gaussians(scene: GaussianScene, cam: Camera) -> ScreenGaussians:
    """EWA projection of all Gaussians, dropping culled ones."""
    w = np.asarray(cam.rotation, dtype=np.float64)
    pc = cam.world_to_camera(scene.positions)
    z = pc[:, 2]
    keep = (z > cam.near) & (z < cam.far)
    idx = np.flatnonzero(keep)
    pc, z = pc[idx], z[idx]
    mean = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * pc[:, 0] / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * pc[:, 1] / (z * z)
    t = jac @ w
    sigma = _covariance3d(scene.scales[idx], scene.rotations[idx])
    cov = t @ sigma @ np.swapaxes(t, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    cov[:, 0, 0] += LOWPASS
    cov[:, 1, 1] += LOWPASS
    sx = 3.0 * np.sqrt(cov[:, 0, 0])
    sy = 3.0 * np.sqrt(cov[:, 1, 1])
    onscreen = ((mean[:, 0] + sx >= 0) & (mean[:, 0] - sx <= cam.width - 1)
                & (mean[:, 1] + sy >= 0) & (mean[:, 1] - sy <= cam.height - 1))
    sel = np.flatnonzero(onscreen)
    return ScreenGaussians(mean[sel], cov[sel], z[sel], idx[sel], scene.opacities[idx[sel]])


def project_gaussian(g, cam: Camera):
    """Project one primitive; returns a 1-element ScreenGaussians or None if culled."""
    scene = GaussianScene(g.position[None], g.rotation[None], g.scale[None],
                          [g.opacity], g.color[None])
    sg = project_gaussians(scene, cam)
    return sg if len(sg) else None


def _depth_order(sg):
    return np.lexsort((sg.source_index, sg.depth))


def _screen_boxes(sg, cam):
    sx = 3.0 * np.sqrt(sg.cov2d[:, 0, 0])
    sy = 3.0 * np.sqrt(sg.cov2d[:, 1, 1])
    x0 = np.clip(np.ceil(sg.mean2d[:, 0] - sx), 0, cam.width - 1).astype(np.int64)
    x1 = np.clip(np.floor(sg.mean2d[:, 0] + sx), 0, cam.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(sg.mean2d[:, 1] - sy), 0, cam.height - 1).astype(np.int64)
    y1 = np.clip(np.floor(sg.mean2d[:, 1] + sy), 0, cam.height - 1).astype(np.int64)
    return x0, x1, y0, y1


def _tile_lists(x0, x1, y0, y1, tiles_x):
    """Pairs (tile id, position in depth order), grouped by tile, depth order kept."""
    tx0, tx1, ty0, ty1 = x0 // TILE, x1 // TILE, y0 // TILE, y1 // TILE
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    counts = nx * ny
    g = np.repeat(np.arange(len(x0)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[g] + local % nx[g]
    ty = ty0[g] + local // nx[g]
    tile = ty * tiles_x + tx
    order = np.argsort(tile, kind="stable")
    return tile[order], g[order]


def _composite(scene, cam, cutoff):
    """Yield per-tile compositing results in tile order."""
    sg = project_gaussians(scene, cam)
    order = _depth_order(sg)
    mean, cov = sg.mean2d[order], sg.cov2d[order]
    opac, src = sg.opacity[order], sg.source_index[order]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    assert np.all(det > 0), "singular screen covariance"
    ca, cb, cc = cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det
    boxes = _screen_boxes(ScreenGaussians(mean, cov, sg.depth[order], src, opac), cam)
    x0, x1, y0, y1 = boxes
    tiles_x = (cam.width + TILE - 1) // TILE
    tile_ids, gauss = _tile_lists(x0, x1, y0, y1, tiles_x)
    starts = np.searchsorted(tile_ids, np.arange((tiles_x * ((cam.height + TILE - 1) // TILE)) + 1))
    transmittance = np.ones((cam.height, cam.width))
    chunks = []
    for t in range(len(starts) - 1):
        lo, hi = starts[t], starts[t + 1]
        if lo == hi:
            continue
        gs = gauss[lo:hi]
        ty, tx = divmod(t, tiles_x)
        ys = np.arange(ty * TILE, min((ty + 1) * TILE, cam.height))
        xs = np.arange(tx * TILE, min((tx + 1) * TILE, cam.width))
        py, px = np.meshgrid(ys, xs, indexing="ij")
        px, py = px.ravel(), py.ravel()
        dx = px[:, None] - mean[gs, 0][None, :]
        dy = py[:, None] - mean[gs, 1][None, :]
        power = -0.5 * (ca[gs] * dx * dx + 2.0 * cb[gs] * dx * dy + cc[gs] * dy * dy)
        alpha = np.minimum(opac[gs] * np.exp(power), ALPHA_MAX)
        inside = ((px[:, None] >= x0[gs]) & (px[:, None] <= x1[gs])
                  & (py[:, None] >= y0[gs]) & (py[:, None] <= y1[gs]))
        alpha = np.where(inside, alpha, 0.0)
        trans = np.cumprod(1.0 - alpha, axis=1)
        before = np.concatenate([np.ones((len(px), 1)), trans[:, :-1]], axis=1)
        active = before >= T_MIN
        w = np.where(active, alpha * before, 0.0)
        last = active.sum(axis=1)  # active entries form a prefix
        final = np.where(last > 0, trans[np.arange(len(px)), np.maximum(last - 1, 0)], 1.0)
        transmittance[py, px] = final
        keep = w > cutoff
        pix, col = np.nonzero(keep)
        chunks.append((py[pix], px[pix], src[gs[col]], w[pix, col]))
    if chunks:
        py = np.concatenate([c[0] for c in chunks])
        px = np.concatenate([c[1] for c in chunks])
        gid = np.concatenate([c[2] for c in chunks])
        wt = np.concatenate([c[3] for c in chunks])
        # canonical order: pixel-major, then front-to-back (already in depth order per tile)
        perm = np.argsort(py.astype(np.int64) * cam.width + px, kind="stable")
        py, px, gid, wt = py[perm], px[perm], gid[perm], wt[perm]
    else:
        py = px = gid = np.zeros(0, dtype=np.int64)
        wt = np.zeros(0)
    return WeightRecords(px.astype(np.int64), py.astype(np.int64), gid.astype(np.int64), wt,
                         cam.width, cam.height, transmittance)


def render_weights(scene: GaussianScene, cam: Camera, cutoff=WEIGHT_CUTOFF) -> WeightRecords:
    """Blend weights w_i(p) = alpha_i(p) * prod_{j in front} (1 - alpha_j(p))."""
    return _composite(scene, cam, cutoff)


def blend(records: WeightRecords, values, background):
    """Composite per-Gaussian ``values`` (N, C) with the given weights."""
    values = np.asarray(values, dtype=np.float64)
    c = values.shape[1]
    out = np.zeros((records.height * records.width, c))
    np.add.at(out, records.pixel_index, records.weight[:, None] * values[records.gaussian])
    out = out.reshape(records.height, records.width, c)
    return out + records.transmittance[..., None] * np.asarray(background, dtype=np.float64)


def render_rgb(scene: GaussianScene, cam: Camera, background=(0.0, 0.0, 0.0),
               cutoff=WEIGHT_CUTOFF, records=None):
    if records is None:
        records = render_weights(scene, cam, cutoff)
    return blend(records, scene.rgb(), background)


def default_view_ring(scene: GaussianScene, m=8, resolution=(256, 256), elevation_deg=30.0):
    """``m`` cameras evenly spaced in azimuth, looking at the bounding-sphere center."""
    if m < 1:
        raise ValueError("need at least one view")
    width, height = resolution
    center, radius = scene.bounding_sphere()
    if radius <= 1e-12:
        raise ValueError("degenerate scene: zero bounding radius")
    dist = 1.5 * radius
    half = np.arcsin(radius / dist) * 1.05
    fx = 0.5 * width / np.tan(half)
    fy = 0.5 * height / np.tan(half)
    elev = np.radians(elevation_deg)
    cams = []
    for k in range(m):
        az = 2.0 * np.pi * k / m
        eye = center + dist * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az),
                                        np.sin(elev)])
        cams.append(Camera.look_at(eye, center, fx=fx, fy=fy, cx=(width - 1) / 2.0,
                                   cy=(height - 1) / 2.0, width=width, height=height,
                                   near=0.05 * radius, far=dist + 2.0 * radius))
    return cams


# -- file formats ---------------------------------------------------------------
WEIGHT_MAGIC = b"SSWT"
_WEIGHT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("g", "<u4"), ("w", "<f4")])


def dump_weights(records: WeightRecords, path):
    rec = np.empty(len(records), dtype=_WEIGHT_DTYPE)
    rec["x"], rec["y"] = records.pixel_x, records.pixel_y
    rec["g"], rec["w"] = records.gaussian, records.weight
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(rec.tobytes())


def read_weight_dump(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != WEIGHT_MAGIC:
        raise ValueError("not a weight dump (bad magic)")
    if (len(raw) - 4) % _WEIGHT_DTYPE.itemsize:
        raise ValueError("weight dump has a partial record")
    return np.frombuffer(raw, dtype=_WEIGHT_DTYPE, offset=4)


def write_ppm(image, path):
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.reshape(h, w, 3).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(raw, pos)
        if m is None:
            raise ValueError("truncated PPM header")
        fields.append(m.group(2))
        pos = m.end()
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
