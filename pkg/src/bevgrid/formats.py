"""On-disk formats: scene text files, grid files, box files and point files.

See docs/formats.md for the byte-level description. Floats are written with ``repr`` so text
round trips are exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .boxes import BOX_DIM, BoxSet
from .geometry import Camera, CameraIntrinsics, CameraRig, RigidTransform
from .scenegen import Scene
from .voxelizer import BinaryVoxelGrid, LabeledPointCloud, SemanticVoxelGrid, VoxelGridSpec

SCENE_MAGIC = "bevgrid-scene"
SCENE_VERSION = 1
BOXES_MAGIC = "bevgrid-boxes"
BOXES_VERSION = 1
GRID_MAGIC = b"BEVGRID 1\n"
GRID_DTYPES = ("<f8", "<f4", "<i8", "<i4", "|u1")


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line and the field being read."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None, path=None):
        self.message = message
        self.line = line
        self.field = field
        self.path = str(path) if path is not None else None
        where = []
        if self.path:
            where.append(self.path)
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)

    def to_dict(self) -> dict:
        return {"error": "parse_error", "path": self.path, "line": self.line, "field": self.field, "message": self.message}


def _fmt(x: float) -> str:
    return repr(float(x))


def _mat12(t: RigidTransform) -> str:
    return " ".join(_fmt(v) for v in t.matrix[:3].reshape(-1))


# --------------------------------------------------------------------------- scene text files


def dumps_scene(scene: Scene) -> str:
    rig = scene.rig
    out = [f"{SCENE_MAGIC} {SCENE_VERSION}", f"seed {int(scene.seed)}", f"image {rig.image_height} {rig.image_width}"]
    out.append(f"cameras {len(rig)}")
    for name, cam in zip(rig.names, rig.cameras):
        k = cam.intrinsics
        out.append(f"{name} {_fmt(k.fx)} {_fmt(k.fy)} {_fmt(k.cx)} {_fmt(k.cy)} {_mat12(cam.cam_to_lidar)}")
    out.append(f"points {len(scene.cloud)}")
    for p, lab in zip(scene.cloud.points, scene.cloud.labels):
        out.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(lab)}")
    out.append(f"boxes {len(scene.boxes)}")
    for row, cls in zip(scene.boxes.rows, scene.boxes.classes):
        out.append(f"{int(cls)} " + " ".join(_fmt(v) for v in row))
    out.append("ego")
    out.append(f"curr {_mat12(scene.ego_curr)}")
    out.append(f"adj {_mat12(scene.ego_adj)}")
    out.append("end")
    return "\n".join(out) + "\n"


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps_scene(scene))


class _Lines:
    def __init__(self, text: str, path=None):
        self.lines = text.splitlines()
        self.pos = 0
        self.path = path

    def next(self, section: str) -> tuple[int, list[str]]:
        while self.pos < len(self.lines):
            self.pos += 1
            raw = self.lines[self.pos - 1].strip()
            if raw and not raw.startswith("#"):
                return self.pos, raw.split()
        raise ParseError(f"unexpected end of file: missing section '{section}'", self.pos or None, section, self.path)

    def header(self, keyword: str, nargs: int) -> tuple[int, list[str]]:
        ln, tok = self.next(keyword)
        if tok[0] != keyword:
            raise ParseError(f"expected section '{keyword}', found '{tok[0]}'", ln, keyword, self.path)
        if len(tok) != nargs + 1:
            raise ParseError(f"'{keyword}' takes {nargs} value(s), got {len(tok) - 1}", ln, keyword, self.path)
        return ln, tok[1:]

    def floats(self, tok, ln, field) -> list[float]:
        try:
            vals = [float(t) for t in tok]
        except ValueError as e:
            raise ParseError(f"not a number ({e})", ln, field, self.path) from None
        if not all(np.isfinite(vals)):
            raise ParseError("non-finite number", ln, field, self.path)
        return vals

    def ints(self, tok, ln, field) -> list[int]:
        try:
            return [int(t) for t in tok]
        except ValueError:
            raise ParseError(f"expected integer(s), got {' '.join(tok)!r}", ln, field, self.path) from None

    def count(self, keyword: str) -> tuple[int, int]:
        ln, args = self.header(keyword, 1)
        (n,) = self.ints(args, ln, keyword)
        if n < 0:
            raise ParseError("count must be non-negative", ln, keyword, self.path)
        return ln, n


def _transform(lines: _Lines, vals, ln, field) -> RigidTransform:
    m = np.eye(4)
    m[:3] = np.array(vals).reshape(3, 4)
    try:
        return RigidTransform(m)
    except ValueError as e:
        raise ParseError(str(e), ln, field, lines.path) from None


def loads_scene(text: str, path=None) -> Scene:
    lines = _Lines(text, path)
    ln, tok = lines.next("header")
    if len(tok) != 2 or tok[0] != SCENE_MAGIC:
        raise ParseError(f"not a scene file (expected '{SCENE_MAGIC} <version>')", ln, "header", path)
    (version,) = lines.ints(tok[1:], ln, "version")
    if version != SCENE_VERSION:
        raise ParseError(f"unsupported scene version {version} (this reader handles {SCENE_VERSION})", ln, "version", path)
    ln, args = lines.header("seed", 1)
    (seed,) = lines.ints(args, ln, "seed")
    ln, args = lines.header("image", 2)
    img_h, img_w = lines.ints(args, ln, "image")

    _, n_cam = lines.count("cameras")
    cams, names = [], []
    for _ in range(n_cam):
        ln, tok = lines.next("cameras")
        if len(tok) != 17:
            raise ParseError(f"camera line needs name + 16 numbers, got {len(tok)} tokens", ln, "cameras", path)
        vals = lines.floats(tok[1:], ln, "cameras")
        try:
            k = CameraIntrinsics(*vals[:4])
        except ValueError as e:
            raise ParseError(str(e), ln, "cameras", path) from None
        cams.append(Camera(k, _transform(lines, vals[4:], ln, "cameras")))
        names.append(tok[0])

    _, n_pts = lines.count("points")
    pts = np.zeros((n_pts, 3))
    labels = np.zeros(n_pts, dtype=np.int64)
    for i in range(n_pts):
        ln, tok = lines.next("points")
        if len(tok) != 4:
            raise ParseError(f"point line needs 4 values, got {len(tok)}", ln, "points", path)
        pts[i] = lines.floats(tok[:3], ln, "points")
        labels[i] = lines.ints(tok[3:], ln, "points")[0]

    _, n_box = lines.count("boxes")
    rows = np.zeros((n_box, BOX_DIM))
    classes = np.zeros(n_box, dtype=np.int64)
    for i in range(n_box):
        ln, tok = lines.next("boxes")
        if len(tok) != BOX_DIM + 1:
            raise ParseError(f"box line needs class + {BOX_DIM} values, got {len(tok)}", ln, "boxes", path)
        classes[i] = lines.ints(tok[:1], ln, "boxes")[0]
        rows[i] = lines.floats(tok[1:], ln, "boxes")

    lines.header("ego", 0)
    ego = {}
    for key in ("curr", "adj"):
        ln, tok = lines.next("ego")
        if tok[0] != key or len(tok) != 13:
            raise ParseError(f"expected '{key}' followed by 12 numbers", ln, "ego", path)
        ego[key] = _transform(lines, lines.floats(tok[1:], ln, "ego"), ln, "ego")
    lines.header("end", 0)

    try:
        rig = CameraRig(tuple(cams), img_h, img_w, tuple(names))
        cloud = LabeledPointCloud(pts, labels)
        boxes = BoxSet(rows, classes)
    except ValueError as e:
        raise ParseError(str(e), None, "scene", path) from None
    return Scene(rig, cloud, boxes, ego["curr"], ego["adj"], seed)


def load_scene(path) -> Scene:
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError:
        raise ParseError("file is not UTF-8 text", None, "header", path) from None
    return loads_scene(text, path)


def scenes_equal(a: Scene, b: Scene, tol: float = 1e-12) -> bool:
    def close(x, y):
        x, y = np.asarray(x), np.asarray(y)
        return x.shape == y.shape and bool(np.all(np.abs(x - y) <= tol))

    if a.seed != b.seed or len(a.rig) != len(b.rig) or a.rig.names != b.rig.names:
        return False
    if (a.rig.image_height, a.rig.image_width) != (b.rig.image_height, b.rig.image_width):
        return False
    for ca, cb in zip(a.rig.cameras, b.rig.cameras):
        ka, kb = ca.intrinsics, cb.intrinsics
        if not close([ka.fx, ka.fy, ka.cx, ka.cy], [kb.fx, kb.fy, kb.cx, kb.cy]):
            return False
        if not close(ca.cam_to_lidar.matrix, cb.cam_to_lidar.matrix):
            return False
    return (
        close(a.cloud.points, b.cloud.points)
        and np.array_equal(a.cloud.labels, b.cloud.labels)
        and close(a.boxes.rows, b.boxes.rows)
        and np.array_equal(a.boxes.classes, b.boxes.classes)
        and close(a.ego_curr.matrix, b.ego_curr.matrix)
        and close(a.ego_adj.matrix, b.ego_adj.matrix)
    )


# --------------------------------------------------------------------------- grid files


def save_grid(path, array, kind: str = "array", spec: VoxelGridSpec | None = None, meta: dict | None = None) -> None:
    """Write an array as magic line + one-line JSON header + raw little-endian row-major payload."""
    a = np.asarray(array)
    dtype = np.dtype(a.dtype).newbyteorder("<") if a.dtype.byteorder not in ("|",) else a.dtype
    if dtype.str not in GRID_DTYPES:
        raise ValueError(f"unsupported grid dtype {a.dtype}")
    header = {
        "kind": kind,
        "dtype": dtype.str,
        "shape": list(a.shape),
        "spec": spec.to_dict() if spec is not None else None,
        "meta": meta or {},
    }
    payload = np.ascontiguousarray(a, dtype=dtype).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_grid(path) -> tuple[np.ndarray, dict]:
    """Read a grid file; returns ``(array, header)`` where the header's ``spec`` is a VoxelGridSpec or None."""
    data = Path(path).read_bytes()
    if not data.startswith(GRID_MAGIC):
        raise ParseError("bad magic (expected 'BEVGRID 1')", 1, "magic", path)
    nl = data.find(b"\n", len(GRID_MAGIC))
    if nl < 0:
        raise ParseError("missing header line", 2, "header", path)
    try:
        header = json.loads(data[len(GRID_MAGIC) : nl].decode())
        dtype = np.dtype(header["dtype"])
        shape = tuple(int(s) for s in header["shape"])
        kind = header["kind"]
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"unreadable header ({e})", 2, "header", path) from None
    if header["dtype"] not in GRID_DTYPES:
        raise ParseError(f"unsupported dtype {header['dtype']}", 2, "dtype", path)
    if any(s < 0 for s in shape):
        raise ParseError("negative dimension", 2, "shape", path)
    payload = data[nl + 1 :]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise ParseError(f"payload has {len(payload)} bytes, header implies {expected}", 3, "payload", path)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    spec = None
    if header.get("spec") is not None:
        try:
            spec = VoxelGridSpec.from_dict(header["spec"])
        except (ValueError, KeyError, TypeError) as e:
            raise ParseError(f"bad grid spec ({e})", 2, "spec", path) from None
    header = dict(header, spec=spec, kind=kind)
    return arr, header


def save_binary_grid(path, grid: BinaryVoxelGrid, spec: VoxelGridSpec | None = None) -> None:
    save_grid(path, grid.values.astype(np.uint8), "binary", spec)


def save_semantic_grid(path, grid: SemanticVoxelGrid, spec: VoxelGridSpec | None = None) -> None:
    stacked = np.stack([grid.class_ids, grid.labeled_mask.astype(np.int64)]).astype("<i4")
    save_grid(path, stacked, "semantic", spec, {"num_classes": grid.num_classes})


def load_occupancy(path) -> tuple[SemanticVoxelGrid, VoxelGridSpec | None]:
    """Load a binary or semantic grid file as a SemanticVoxelGrid (binary grids become 2-class)."""
    arr, header = load_grid(path)
    try:
        if header["kind"] == "semantic":
            if arr.ndim != 4 or arr.shape[0] != 2:
                raise ParseError("semantic grid must have shape (2, X, Y, Z)", 2, "shape", path)
            n = int(header["meta"].get("num_classes", 17))
            return SemanticVoxelGrid(arr[0], arr[1], n), header["spec"]
        if header["kind"] == "binary":
            return SemanticVoxelGrid.from_binary(BinaryVoxelGrid(arr)), header["spec"]
    except ValueError as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(str(e), None, "payload", path) from None
    raise ParseError(f"expected an occupancy grid, found kind '{header['kind']}'", 2, "kind", path)


def load_spec(path) -> VoxelGridSpec:
    """Grid spec from a JSON file (either the nine fields or ``{"grid": {...}}``)."""
    try:
        doc = json.loads(Path(path).read_text())
    except ValueError as e:
        raise ParseError(f"invalid JSON ({e})", None, "spec", path) from None
    if isinstance(doc, dict) and "grid" in doc:
        doc = doc["grid"]
    try:
        return VoxelGridSpec.from_dict(doc)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad grid spec ({e})", None, "spec", path) from None


# --------------------------------------------------------------------------- point files


def load_points(path) -> LabeledPointCloud:
    """Points from a text file of ``x y z [label]`` rows, or the cloud of a scene file."""
    text = Path(path).read_text()
    if text.lstrip().startswith(SCENE_MAGIC):
        return loads_scene(text, path).cloud
    lines = _Lines(text, path)
    pts, labels = [], []
    for ln, raw in enumerate(lines.lines, start=1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if len(tok) not in (3, 4):
            raise ParseError(f"expected 'x y z [label]', got {len(tok)} values", ln, "points", path)
        pts.append(lines.floats(tok[:3], ln, "points"))
        labels.append(lines.ints(tok[3:], ln, "points")[0] if len(tok) == 4 else 1)
    return LabeledPointCloud(np.array(pts).reshape(-1, 3), np.array(labels, dtype=np.int64))


# --------------------------------------------------------------------------- box files


def dumps_boxes(scenes) -> str:
    """Per-scene box sets; the score column is '-' for boxes without scores (ground truth)."""
    out = [f"{BOXES_MAGIC} {BOXES_VERSION}", f"scenes {len(scenes)}"]
    for s, b in enumerate(scenes):
        out.append(f"scene {s} {len(b)}")
        for i in range(len(b)):
            score = "-" if b.scores is None else _fmt(b.scores[i])
            out.append(f"{int(b.classes[i])} {score} " + " ".join(_fmt(v) for v in b.rows[i]))
    out.append("end")
    return "\n".join(out) + "\n"


def save_boxes(path, scenes) -> None:
    Path(path).write_text(dumps_boxes(scenes))


def load_boxes(path) -> list[BoxSet]:
    text = Path(path).read_text()
    lines = _Lines(text, path)
    ln, tok = lines.next("header")
    if len(tok) != 2 or tok[0] != BOXES_MAGIC:
        raise ParseError(f"not a box file (expected '{BOXES_MAGIC} <version>')", ln, "header", path)
    if lines.ints(tok[1:], ln, "version")[0] != BOXES_VERSION:
        raise ParseError("unsupported box file version", ln, "version", path)
    _, n_scenes = lines.count("scenes")
    result = []
    for s in range(n_scenes):
        ln, args = lines.header("scene", 2)
        idx, m = lines.ints(args, ln, "scene")
        if idx != s:
            raise ParseError(f"scene index {idx} out of order (expected {s})", ln, "scene", path)
        rows = np.zeros((m, BOX_DIM))
        classes = np.zeros(m, dtype=np.int64)
        scores = []
        for i in range(m):
            ln, tok = lines.next("boxes")
            if len(tok) != BOX_DIM + 2:
                raise ParseError(f"box line needs class, score and {BOX_DIM} values", ln, "boxes", path)
            classes[i] = lines.ints(tok[:1], ln, "boxes")[0]
            scores.append(None if tok[1] == "-" else lines.floats(tok[1:2], ln, "score")[0])
            rows[i] = lines.floats(tok[2:], ln, "boxes")
        if any(v is None for v in scores) and not all(v is None for v in scores):
            raise ParseError("a scene mixes scored and unscored boxes", ln, "score", path)
        sc = None if (not scores or scores[0] is None) else np.array(scores)
        if m == 0:
            sc = None
        try:
            result.append(BoxSet(rows, classes, sc))
        except ValueError as e:
            raise ParseError(str(e), ln, "boxes", path) from None
    lines.header("end", 0)
    return result
