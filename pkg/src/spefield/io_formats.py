"""Readers and writers: XYZ point clouds, OBJ meshes, PPM/PGM images,
JSON checkpoints and shape-space bundles."""

from __future__ import annotations

import json

import numpy as np

from .geometry import PointCloud, TriangleMesh
from .network import Checkpoint

__all__ = [
    "FileFormatError",
    "read_xyz",
    "write_xyz",
    "read_obj",
    "write_obj",
    "read_ppm",
    "write_ppm",
    "save_checkpoint",
    "load_checkpoint",
    "save_shape_space",
    "load_shape_space",
]

CHECKPOINT_FORMAT_VERSION = 1


class FileFormatError(Exception):
    """Parse failure with a file position."""

    def __init__(self, path, position, message):
        self.path = str(path)
        self.position = position
        self.message = message
        super().__init__(f"{path}:{position}: {message}")


# -- XYZ point clouds -----------------------------------------------------------


def read_xyz(path):
    """Text point cloud, one point per line: 'x y z [nx ny nz]'."""
    positions, normals = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            fields = body.split()
            if len(fields) not in (3, 6):
                raise FileFormatError(
                    path, lineno, f"expected 3 or 6 columns, got {len(fields)}"
                )
            try:
                values = [float(f) for f in fields]
            except ValueError as exc:
                raise FileFormatError(path, lineno, f"bad number: {exc}") from None
            positions.append(values[:3])
            if len(values) == 6:
                normals.append(values[3:])
    if not positions:
        raise FileFormatError(path, 0, "no points in file")
    if normals and len(normals) != len(positions):
        raise FileFormatError(path, 0, "some lines have normals and some do not")
    return PointCloud(
        positions=np.array(positions),
        normals=np.array(normals) if normals else None,
    )


def write_xyz(path, pc: PointCloud):
    with open(path, "w") as fh:
        for i in range(len(pc)):
            cols = [f"{v:.17g}" for v in pc.positions[i]]
            if pc.normals is not None:
                cols += [f"{v:.17g}" for v in pc.normals[i]]
            fh.write(" ".join(cols) + "\n")


# -- OBJ meshes ------------------------------------------------------------------


def read_obj(path):
    """OBJ subset: v/f records; polygon faces fanned into triangles."""
    vertices, triangles = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            fields = body.split()
            tag = fields[0]
            if tag == "v":
                if len(fields) < 4:
                    raise FileFormatError(path, lineno, "vertex needs 3 coordinates")
                try:
                    vertices.append([float(f) for f in fields[1:4]])
                except ValueError as exc:
                    raise FileFormatError(path, lineno, f"bad number: {exc}") from None
            elif tag == "f":
                if len(fields) < 4:
                    raise FileFormatError(path, lineno, "face needs >= 3 vertices")
                idx = []
                for f in fields[1:]:
                    ref = f.split("/", 1)[0]
                    try:
                        i = int(ref)
                    except ValueError:
                        raise FileFormatError(
                            path, lineno, f"bad face index {ref!r}"
                        ) from None
                    if i < 0:
                        i = len(vertices) + i
                    else:
                        i = i - 1
                    if not 0 <= i < len(vertices):
                        raise FileFormatError(path, lineno, f"face index {f} out of range")
                    idx.append(i)
                for j in range(1, len(idx) - 1):
                    triangles.append([idx[0], idx[j], idx[j + 1]])
            # vt / vn / usemtl / o / g / s / mtllib are ignored
    return TriangleMesh(
        vertices=np.array(vertices) if vertices else np.zeros((0, 3)),
        triangles=np.array(triangles, dtype=np.int64)
        if triangles
        else np.zeros((0, 3), dtype=np.int64),
    )


def write_obj(path, mesh: TriangleMesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# -- PPM / PGM images -------------------------------------------------------------


def _read_header_tokens(data, path, count):
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise FileFormatError(path, pos, "truncated header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    return tokens, pos + 1  # skip the single whitespace after the last token


def read_ppm(path):
    """Binary P6 (RGB) or P5 (grayscale), maxval 255, mapped to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_header_tokens(data, path, 4)
    magic = tokens[0]
    if magic not in (b"P6", b"P5"):
        raise FileFormatError(path, 0, f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise FileFormatError(path, 0, "non-integer header field") from None
    if maxval != 255:
        raise FileFormatError(path, 0, f"only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raw = data[offset : offset + expected]
    if len(raw) < expected:
        raise FileFormatError(path, offset, "truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).astype(float) / 255.0
    if channels == 3:
        return img.reshape(height, width, 3)
    return img.reshape(height, width)


def write_ppm(path, image):
    """Write P6 for (H, W, 3) images, P5 for (H, W); round-half-up to bytes."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"unsupported image shape {image.shape}")
    quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    height, width = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{width} {height}\n255\n".encode())
        fh.write(quantized.tobytes())


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, ckpt: Checkpoint):
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": ckpt.config,
        "param_order": ckpt.param_order,
        "params": ckpt.params.tolist(),
        "meta": ckpt.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(path, exc.pos, f"invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise FileFormatError(path, 0, "not a checkpoint file")
    if doc["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise FileFormatError(
            path, 0, f"unknown format_version {doc['format_version']}"
        )
    try:
        return Checkpoint(
            config=doc["config"],
            params=np.asarray(doc["params"], dtype=float),
            param_order=doc["param_order"],
            meta=doc.get("meta", {}),
        )
    except KeyError as exc:
        raise FileFormatError(path, 0, f"missing field {exc}") from None


# -- shape spaces ------------------------------------------------------------------


def save_shape_space(path, space):
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "shape_space",
        "mlp_dims": [space.mlp.in_dim]
        + [w.shape[0] for w in space.mlp.weights],
        "mlp_weights": [w.tolist() for w in space.mlp.weights],
        "mlp_biases": [b.tolist() for b in space.mlp.biases],
        "encodings": [
            {
                "config": enc.to_config(),
                "weights": enc.weights.tolist(),
                "angles": enc.angles.tolist(),
            }
            for enc in space.encodings
        ],
        "train_config": {
            "lam": space.config.lam,
            "tau": space.config.tau,
            "lr": space.config.lr,
            "batch_points": space.config.batch_points,
            "seed": space.config.seed,
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_shape_space(path):
    from .encoding import SplineEncoding
    from .network import Mlp
    from .training import ShapeSpace, TrainConfig, shape_space_config

    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(path, exc.pos, f"invalid JSON: {exc.msg}") from None
    if doc.get("kind") != "shape_space":
        raise FileFormatError(path, 0, "not a shape-space file")
    if doc["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise FileFormatError(path, 0, f"unknown format_version {doc['format_version']}")
    mlp = Mlp(
        weights=[np.asarray(w, dtype=float) for w in doc["mlp_weights"]],
        biases=[np.asarray(b, dtype=float) for b in doc["mlp_biases"]],
    )
    encodings = []
    for entry in doc["encodings"]:
        cfg = entry["config"]
        encodings.append(
            SplineEncoding(
                degree=cfg["degree"],
                segments=cfg["segments"],
                channels=cfg["channels"],
                angles=np.asarray(entry["angles"], dtype=float),
                weights=np.asarray(entry["weights"], dtype=float),
                domain_radius=cfg["domain_radius"],
                input_dim=cfg["input_dim"],
                train_directions=cfg.get("train_directions", True),
            )
        )
    tc = doc.get("train_config", {})
    cfg = shape_space_config(
        TrainConfig(
            lam=tc.get("lam", 0.1),
            tau=tc.get("tau", 1.0),
            lr=tc.get("lr", 1e-4),
            batch_points=tc.get("batch_points", 10000),
            seed=tc.get("seed", 0),
        )
    )
    return ShapeSpace(mlp=mlp, encodings=encodings, config=cfg)
