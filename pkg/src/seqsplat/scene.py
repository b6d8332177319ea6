"""Gaussian scenes, affordance annotations, rigid+scale transforms and file I/O.

Quaternions are (w, x, y, z), Hamilton product, right-handed.
"""
from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

SH_C0 = 0.28209479177387814

PLY_PROPERTIES = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                  "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")

AFFORDANCE_TYPES = (
    "grasp", "contain", "lift", "open", "lay", "sit", "support", "wrap_grasp", "pour",
    "move", "display", "push", "listen", "wear", "press", "cut", "stab", "pull",
)


class SceneFormatError(ValueError):
    pass


# -- quaternion algebra -----------------------------------------------------
def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    """Hamilton product a ⊗ b; broadcasts over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


# -- data model ---------------------------------------------------------------
@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray  # degree-0 SH coefficient


@dataclass
class GaussianScene:
    """N Gaussians stored column-wise; row order defines mask indexing."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh_dc: np.ndarray
    object_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.sh_dc = np.asarray(self.sh_dc, dtype=np.float64).reshape(n, 3)
        if self.object_labels is not None:
            self.object_labels = np.asarray(self.object_labels, dtype=np.int64).reshape(n)

    @property
    def n(self):
        return len(self.positions)

    def __len__(self):
        return self.n

    def validate(self):
        if self.n < 1:
            raise SceneFormatError("scene must contain at least one Gaussian")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise SceneFormatError("rotations must be unit quaternions")
        if np.any(self.scales <= 0):
            raise SceneFormatError("scales must be strictly positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise SceneFormatError("opacities must lie in [0, 1]")
        return self

    def primitive(self, i):
        return GaussianPrimitive(self.positions[i].copy(), self.rotations[i].copy(),
                                 self.scales[i].copy(), float(self.opacities[i]),
                                 self.sh_dc[i].copy())

    def rgb(self):
        return np.clip(0.5 + SH_C0 * self.sh_dc, 0.0, 1.0)

    def subset(self, idx):
        idx = np.asarray(idx)
        labels = None if self.object_labels is None else self.object_labels[idx]
        return GaussianScene(self.positions[idx], self.rotations[idx], self.scales[idx],
                             self.opacities[idx], self.sh_dc[idx], labels)

    def bounding_sphere(self):
        lo, hi = self.positions.min(axis=0), self.positions.max(axis=0)
        center = 0.5 * (lo + hi)
        radius = float(np.max(np.linalg.norm(self.positions - center, axis=1)))
        return center, radius

    def content_hash(self):
        import hashlib

        h = hashlib.sha256()
        for arr in (self.positions, self.rotations, self.scales, self.opacities, self.sh_dc):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def allclose(self, other, atol=1e-6):
        return (self.n == other.n
                and all(np.allclose(a, b, rtol=0.0, atol=atol) for a, b in (
                    (self.positions, other.positions), (self.rotations, other.rotations),
                    (self.scales, other.scales), (self.opacities, other.opacities),
                    (self.sh_dc, other.sh_dc))))

    @classmethod
    def from_primitives(cls, prims, object_labels=None):
        prims = list(prims)
        return cls(np.array([p.position for p in prims]), np.array([p.rotation for p in prims]),
                   np.array([p.scale for p in prims]), np.array([p.opacity for p in prims]),
                   np.array([p.color for p in prims]), object_labels)

    @classmethod
    def concatenate(cls, scenes):
        labels = None
        if all(s.object_labels is not None for s in scenes):
            labels = np.concatenate([s.object_labels for s in scenes])
        return cls(np.concatenate([s.positions for s in scenes]),
                   np.concatenate([s.rotations for s in scenes]),
                   np.concatenate([s.scales for s in scenes]),
                   np.concatenate([s.opacities for s in scenes]),
                   np.concatenate([s.sh_dc for s in scenes]), labels)


@dataclass
class AffordanceMask:
    scores: np.ndarray
    affordance_type: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if np.any((self.scores < 0) | (self.scores > 1)) or not np.all(np.isfinite(self.scores)):
            raise ValueError("mask scores must lie in [0, 1]")

    @property
    def n(self):
        return len(self.scores)

    @property
    def is_binary(self):
        return bool(np.all((self.scores == 0) | (self.scores == 1)))

    def indices(self):
        return np.flatnonzero(self.scores > 0)

    def binary(self, threshold=0.5):
        return self.scores >= threshold

    @classmethod
    def from_indices(cls, idx, n, affordance_type=""):
        s = np.zeros(n)
        s[np.asarray(idx, dtype=np.int64)] = 1.0
        return cls(s, affordance_type)

    @classmethod
    def empty(cls, n):
        return cls(np.zeros(n), "")


@dataclass
class AffordanceSequence:
    instruction: str
    steps: list = field(default_factory=list)  # [(step_text, AffordanceMask)]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a sequence needs at least one step")
        sizes = {m.n for _, m in self.steps}
        if len(sizes) != 1:
            raise ValueError(f"step masks disagree on N: {sorted(sizes)}")

    @property
    def T(self):
        return len(self.steps)

    @property
    def masks(self):
        return [m for _, m in self.steps]

    @property
    def texts(self):
        return [t for t, _ in self.steps]


@dataclass(frozen=True)
class RigidScaleTransform:
    translation: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    uniform_scale: float = 1.0

    def __post_init__(self):
        if not self.uniform_scale > 0:
            raise ValueError("uniform_scale must be positive")
        q = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("rotation must be a unit quaternion")

    @classmethod
    def identity(cls):
        return cls()

    def matrix(self):
        return quat_to_matrix(np.asarray(self.rotation, dtype=np.float64))

    def apply_points(self, pts):
        return self.uniform_scale * np.asarray(pts) @ self.matrix().T + np.asarray(self.translation)

    def then(self, outer):
        """The transform equal to applying ``self`` first and ``outer`` second."""
        t = outer.uniform_scale * outer.matrix() @ np.asarray(self.translation) \
            + np.asarray(outer.translation)
        q = quat_normalize(quat_multiply(outer.rotation, self.rotation))
        return RigidScaleTransform(tuple(t), tuple(q), outer.uniform_scale * self.uniform_scale)


def apply_transform(scene: GaussianScene, t: RigidScaleTransform) -> GaussianScene:
    s = float(t.uniform_scale)
    q = np.asarray(t.rotation, dtype=np.float64)
    if s == 1.0 and np.array_equal(q, [1.0, 0.0, 0.0, 0.0]) and not np.any(t.translation):
        return replace(scene, positions=scene.positions.copy(), rotations=scene.rotations.copy(),
                       scales=scene.scales.copy(), opacities=scene.opacities.copy(),
                       sh_dc=scene.sh_dc.copy())
    positions = t.apply_points(scene.positions)
    rotations = quat_normalize(quat_multiply(q, scene.rotations))
    return replace(scene, positions=positions, rotations=rotations, scales=s * scene.scales,
                   opacities=scene.opacities.copy(), sh_dc=scene.sh_dc.copy())


def compose_scenes(parts):
    """Transform and concatenate parts; re-index each part's masks into the union.

    ``parts`` is a list of (scene, transform, masks).
    """
    scenes, offsets = [], []
    total = 0
    for scene, t, masks in parts:
        for m in masks:
            if m.n != scene.n:
                raise ValueError(f"mask length {m.n} does not match part size {scene.n}")
        scenes.append(apply_transform(scene, t))
        offsets.append(total)
        total += scene.n
    out_masks = []
    for (scene, _, masks), off in zip(parts, offsets):
        for m in masks:
            s = np.zeros(total)
            s[off:off + scene.n] = m.scores
            out_masks.append(AffordanceMask(s, m.affordance_type))
    return GaussianScene.concatenate(scenes), out_masks


# -- PLY ----------------------------------------------------------------------
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(raw):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise SceneFormatError("malformed PLY header at byte 0: missing 'ply' or 'end_header'")
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt, count, props, element = None, None, [], None
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            element = tok[1] if len(tok) > 1 else None
            if element == "vertex":
                try:
                    count = int(tok[2])
                except (IndexError, ValueError):
                    raise SceneFormatError(f"malformed element line at header line {lineno}")
        elif tok[0] == "property":
            if element != "vertex":
                continue
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise SceneFormatError(f"unsupported property at header line {lineno}: {line!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise SceneFormatError(f"unexpected header keyword at line {lineno}: {tok[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise SceneFormatError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise SceneFormatError("PLY header has no vertex element")
    names = [p for p, _ in props]
    for req in PLY_PROPERTIES:
        if req not in names:
            raise SceneFormatError(f"missing required property {req!r}")
    return fmt, count, props, body_start


def load_scene(path, raw_3dgs=False) -> GaussianScene:
    """Read a PLY scene (ASCII or binary little-endian).

    With ``raw_3dgs`` the file holds optimizer-space values as written by
    standard 3DGS training (logit opacity, log scale); they are activated here.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    fmt, count, props, start = _parse_header(raw)
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    if fmt == "binary_little_endian":
        need = count * dtype.itemsize
        if len(raw) - start < need:
            raise SceneFormatError(
                f"truncated binary body at byte {len(raw)}: expected {need} bytes from {start}")
        rec = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        bad = np.zeros(count, dtype=bool)
        for name in PLY_PROPERTIES:
            bad |= ~np.isfinite(rec[name].astype(np.float64))
        if bad.any():
            i = int(np.argmax(bad))
            raise SceneFormatError(
                f"non-finite value in vertex {i} at byte offset {start + i * dtype.itemsize}")
        cols = {name: rec[name].astype(np.float64) for name in PLY_PROPERTIES}
    else:
        header_lines = raw[:start].count(b"\n")
        body = raw[start:].decode("ascii", errors="replace").splitlines()
        rows = []
        for k, line in enumerate(body[:count]):
            tok = line.split()
            lineno = header_lines + k + 1
            if len(tok) != len(props):
                raise SceneFormatError(
                    f"line {lineno}: expected {len(props)} values, found {len(tok)}")
            try:
                vals = [float(x) for x in tok]
            except ValueError:
                raise SceneFormatError(f"line {lineno}: unparseable number") from None
            if not all(np.isfinite(vals)):
                raise SceneFormatError(f"line {lineno}: non-finite value")
            rows.append(vals)
        if len(rows) < count:
            raise SceneFormatError(f"line {header_lines + len(rows) + 1}: expected {count} vertices")
        arr = np.array(rows, dtype=np.float64).reshape(count, len(props))
        names = [p for p, _ in props]
        # values pass through float32 as if stored in a binary file
        cols = {n: arr[:, names.index(n)].astype(np.float32).astype(np.float64)
                for n in PLY_PROPERTIES}
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    dc = np.stack([cols[f"f_dc_{i}"] for i in range(3)], axis=1)
    scale = np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1)
    rot = np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1)
    opacity = cols["opacity"]
    if raw_3dgs:
        opacity = 1.0 / (1.0 + np.exp(-opacity))
        scale = np.exp(scale)
    norms = np.linalg.norm(rot, axis=1)
    if np.any(norms == 0):
        raise SceneFormatError(f"zero quaternion in vertex {int(np.argmax(norms == 0))}")
    off = np.abs(norms - 1.0) > 1e-6
    rot[off] = rot[off] / norms[off, None]
    labels = None
    names = [p for p, _ in props]
    if "object_id" in names:
        if fmt == "binary_little_endian":
            labels = rec["object_id"].astype(np.int64)
        else:
            labels = arr[:, names.index("object_id")].astype(np.int64)
    return GaussianScene(pos, rot, scale, np.clip(opacity, 0.0, 1.0), dc, labels)


def ply_header(n, with_labels=False):
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in PLY_PROPERTIES]
    if with_labels:
        lines.append("property int object_id")
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def save_scene(scene: GaussianScene, path) -> None:
    from .autograd.checkpoint import atomic_write_bytes

    with_labels = scene.object_labels is not None
    fields = [(p, "<f4") for p in PLY_PROPERTIES]
    if with_labels:
        fields.append(("object_id", "<i4"))
    rec = np.empty(scene.n, dtype=np.dtype(fields))
    for i, a in enumerate("xyz"):
        rec[a] = scene.positions[:, i]
    for i in range(3):
        rec[f"f_dc_{i}"] = scene.sh_dc[:, i]
        rec[f"scale_{i}"] = scene.scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = scene.rotations[:, i]
    rec["opacity"] = scene.opacities
    if with_labels:
        rec["object_id"] = scene.object_labels
    atomic_write_bytes(path, ply_header(scene.n, with_labels) + rec.tobytes())


# -- annotations ----------------------------------------------------------------
def rle_encode(mask_bits) -> str:
    idx = np.flatnonzero(np.asarray(mask_bits) > 0)
    if idx.size == 0:
        return ""
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    runs = np.split(idx, breaks)
    return ",".join(f"{int(r[0])}:{len(r)}" for r in runs)


def rle_decode(text: str, n: int) -> np.ndarray:
    out = np.zeros(n)
    text = text.strip()
    if not text:
        return out
    for chunk in text.split(","):
        try:
            start, length = (int(v) for v in chunk.split(":"))
        except ValueError:
            raise SceneFormatError(f"bad RLE run {chunk!r}") from None
        if start < 0 or length < 1 or start + length > n:
            raise SceneFormatError(f"RLE run {chunk!r} out of bounds for N={n}")
        out[start:start + length] = 1.0
    return out


def soft_encode(scores) -> str:
    q = np.round(np.clip(np.asarray(scores, dtype=np.float64), 0, 1) * 65535).astype("<u2")
    return base64.b64encode(q.tobytes()).decode("ascii")


def soft_decode(text: str, n: int) -> np.ndarray:
    q = np.frombuffer(base64.b64decode(text), dtype="<u2")
    if q.size != n:
        raise SceneFormatError(f"soft mask has {q.size} entries, scene has N={n}")
    return q.astype(np.float64) / 65535.0


def encode_mask(mask: AffordanceMask) -> dict:
    if mask.is_binary:
        return {"type": mask.affordance_type, "rle": rle_encode(mask.scores)}
    return {"type": mask.affordance_type, "soft_b16": soft_encode(mask.scores)}


def decode_mask(entry: dict, n: int) -> AffordanceMask:
    if "rle" in entry:
        scores = rle_decode(entry["rle"], n)
    elif "soft_b16" in entry:
        scores = soft_decode(entry["soft_b16"], n)
    else:
        raise SceneFormatError("mask entry needs 'rle' or 'soft_b16'")
    return AffordanceMask(scores, entry.get("type", ""))


def annotations_to_dict(scene_path, sequences, n):
    """Serialize sequences, deduplicating identical masks."""
    masks, ids, samples = {}, {}, []
    for seq in sequences:
        steps = []
        for text, m in seq.steps:
            if m.n != n:
                raise ValueError(f"mask length {m.n} != scene N {n}")
            enc = encode_mask(m)
            key = json.dumps(enc, sort_keys=True)
            if key not in ids:
                ids[key] = f"m{len(ids)}"
                masks[ids[key]] = enc
            steps.append({"text": text, "mask": ids[key]})
        samples.append({"instruction": seq.instruction, "steps": steps})
    return {"scene": os.fspath(scene_path), "num_gaussians": n, "masks": masks, "samples": samples}


def save_annotations(path, scene_path, sequences, n):
    from .autograd.checkpoint import atomic_write_bytes

    doc = annotations_to_dict(scene_path, sequences, n)
    atomic_write_bytes(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def parse_step_lists(doc: dict, n: int, allow_empty=False):
    """(instruction, [(text, AffordanceMask), ...]) per sample.

    Prediction dumps share the annotation schema but may hold zero steps,
    hence ``allow_empty``.
    """
    masks = doc.get("masks", {})
    out = []
    for k, sample in enumerate(doc.get("samples", [])):
        steps = sample.get("steps") or []
        if not steps and not allow_empty:
            raise SceneFormatError(f"sample {k} has an empty steps list")
        decoded = []
        for step in steps:
            ref = step.get("mask")
            if ref not in masks:
                raise SceneFormatError(f"sample {k} references unknown mask {ref!r}")
            decoded.append((step.get("text", ""), decode_mask(masks[ref], n)))
        out.append((sample.get("instruction", ""), decoded))
    return out


def parse_annotations(doc: dict, n: int):
    return [AffordanceSequence(ins, steps) for ins, steps in parse_step_lists(doc, n)]


def load_annotations(path, n: Optional[int] = None):
    """Read an annotation file; N comes from the referenced scene unless given."""
    with open(path) as fh:
        doc = json.load(fh)
    if n is None:
        n = doc.get("num_gaussians")
    if n is None:
        scene_path = os.path.join(os.path.dirname(os.fspath(path)), doc["scene"])
        n = load_scene(scene_path).n
    return parse_annotations(doc, int(n))
