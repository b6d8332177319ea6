"""Learning-free lifting of 2D feature maps onto Gaussians.

Each Gaussian's feature is the blend-weight-weighted mean of every pixel
feature it contributes to, over all views.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates, uniform_filter

from .raster import default_view_ring, render_rgb, render_weights


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, d)
    view_id: int = 0

    @property
    def d(self):
        return self.data.shape[-1]


@dataclass
class FeatureBank:
    data: np.ndarray      # (N, d)
    coverage: np.ndarray  # (N,) summed weights; 0 means no evidence

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def d(self):
        return self.data.shape[1]

    @classmethod
    def zeros(cls, n, d):
        return cls(np.zeros((n, d)), np.zeros(n))

    def permute(self, perm):
        return FeatureBank(self.data[perm], self.coverage[perm])


class Featureizer:
    """Image (H, W, 3) -> feature map (H', W', d_sem); must be deterministic."""

    name = "base"
    d_sem = 0

    def __call__(self, image):
        raise NotImplementedError


class ProceduralFeatureizer(Featureizer):
    """Colour, positional encodings and local colour moments (16 channels)."""

    name = "procedural-v1"
    d_sem = 16

    def __call__(self, image):
        return procedural_featureize(image)


def procedural_featureize(image, view_id=0) -> FeatureMap:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ax = 2.0 * np.pi * xs / w
    ay = 2.0 * np.pi * ys / h
    pos = np.stack([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=-1)
    mean = uniform_filter(img, size=(3, 3, 1), mode="nearest")
    second = uniform_filter(img * img, size=(3, 3, 1), mode="nearest")
    third = uniform_filter(img ** 3, size=(3, 3, 1), mode="nearest")
    var = np.maximum(second - mean * mean, 0.0)
    central3 = third - 3.0 * mean * second + 2.0 * mean ** 3
    std = np.sqrt(var)
    skew = np.cbrt(central3)
    data = np.concatenate([img, pos, mean, std, skew], axis=-1)
    return FeatureMap(data, view_id)


def upsample_bilinear(data, height, width):
    """Resample an (h, w, d) grid to (height, width, d), pixel centers aligned."""
    h, w, d = data.shape
    if (h, w) == (height, width):
        return data
    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((height, width, d))
    for c in range(d):
        out[..., c] = map_coordinates(data[..., c], [gy, gx], order=1, mode="nearest")
    return out


def lift_features(scene, cams, maps, weights) -> FeatureBank:
    """Weighted mean of pixel features per Gaussian.

    ``weights`` holds one :class:`~seqsplat.raster.WeightRecords` per camera.
    Views are accumulated in ascending ``view_id`` order whatever the input
    order, with compensated summation across views.
    """
    if not (len(cams) == len(maps) == len(weights)):
        raise ValueError(f"view count mismatch: {len(cams)} cameras, {len(maps)} maps, "
                         f"{len(weights)} weight sets")
    n = scene.n
    if not maps:
        return FeatureBank.zeros(n, 0)
    d = maps[0].d
    total = np.zeros((n, d))
    comp = np.zeros((n, d))
    wtotal = np.zeros(n)
    wcomp = np.zeros(n)
    order = sorted(range(len(maps)), key=lambda k: (maps[k].view_id, k))
    for k in order:
        cam, fmap, rec = cams[k], maps[k], weights[k]
        if fmap.d != d:
            raise ValueError("feature maps disagree on d")
        if len(rec) and rec.gaussian.max() >= n:
            raise ValueError("weight record references a Gaussian outside the scene")
        grid = upsample_bilinear(fmap.data, cam.height, cam.width).reshape(-1, d)
        feats = grid[rec.pixel_index]
        view_sum = np.empty((n, d))
        for c in range(d):
            view_sum[:, c] = np.bincount(rec.gaussian, weights=rec.weight * feats[:, c],
                                         minlength=n)
        view_w = np.bincount(rec.gaussian, weights=rec.weight, minlength=n)
        total, comp = _neumaier_add(total, comp, view_sum)
        wtotal, wcomp = _neumaier_add(wtotal, wcomp, view_w)
    total += comp
    wtotal += wcomp
    data = np.zeros((n, d))
    covered = wtotal > 0
    data[covered] = total[covered] / wtotal[covered, None]
    return FeatureBank(data, wtotal)


def _neumaier_add(total, comp, x):
    t = total + x
    big = np.abs(total) >= np.abs(x)
    comp = comp + np.where(big, (total - t) + x, (x - t) + total)
    return t, comp


def lift_pipeline(scene, m=8, featureizer=None, resolution=(256, 256), cache_dir=None,
                  background=(0.0, 0.0, 0.0)) -> FeatureBank:
    """Ring of views -> render -> featureize -> blend weights -> lifted bank."""
    featureizer = featureizer or ProceduralFeatureizer()
    cache_path = None
    if cache_dir is not None:
        key = f"{scene.content_hash()}-m{m}-{featureizer.name}-{resolution[0]}x{resolution[1]}"
        cache_path = os.path.join(cache_dir, key + ".ssfb")
        if os.path.exists(cache_path):
            return load_bank(cache_path)
    cams = default_view_ring(scene, m, resolution)
    maps, recs = [], []
    for v, cam in enumerate(cams):
        rec = render_weights(scene, cam)
        image = render_rgb(scene, cam, background, records=rec)
        fmap = featureizer(image)
        if not isinstance(fmap, FeatureMap):
            fmap = FeatureMap(np.asarray(fmap, dtype=np.float64), v)
        fmap.view_id = v
        maps.append(fmap)
        recs.append(rec)
    bank = lift_features(scene, cams, maps, recs)
    if cache_path is not None:
        save_bank(bank, cache_path)
    return bank


BANK_MAGIC = b"SSFB"


def save_bank(bank: FeatureBank, path):
    from .autograd.checkpoint import atomic_write_bytes

    payload = (BANK_MAGIC + struct.pack("<II", bank.n, bank.d)
               + np.ascontiguousarray(bank.data, dtype="<f4").tobytes()
               + np.ascontiguousarray(bank.coverage, dtype="<f4").tobytes())
    atomic_write_bytes(path, payload)


def load_bank(path) -> FeatureBank:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != BANK_MAGIC:
        raise ValueError("not a feature bank (bad magic)")
    n, d = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 4 * (n * d + n):
        raise ValueError("feature bank size does not match its header")
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=12).reshape(n, d)
    cov = np.frombuffer(raw, dtype="<f4", count=n, offset=12 + 4 * n * d)
    return FeatureBank(data.astype(np.float64), cov.astype(np.float64))
