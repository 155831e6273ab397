"""Reading and writing the on-disk formats.

Geometry travels as PLY (ASCII or binary little endian for input;
binary doubles on export so reloading is bit-exact). Descriptors use a
small tagged binary format: magic ``IMRD``, u32 count, u32 dim, then
float32 rows. Per-frame global features use the same layout under the
magic ``IMRG`` with count fixed to 1. Poses are plain text, one line
per frame: the frame id followed by the 16 row-major entries of the
homogeneous matrix. A scene manifest is a JSON file tying those pieces
together.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ParseError
from .geometry import Frame, MetaShape, Pose

logger = logging.getLogger("metareg")

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass(frozen=True)
class FrameFileSet:
    """Paths making up one frame on disk."""

    keypoints: Path
    descriptors: Path
    global_feature: Path | None = None


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the float exactly."""
    return repr(float(x))


# ---------------------------------------------------------------- PLY

def _parse_ply_header(raw: bytes, path) -> tuple[str, int, list, int]:
    """Return (format, vertex count, vertex property list, data offset)."""
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(path, 0, "not a PLY file (missing ply/end_header)")
    data_start = end + len(b"end_header\n")
    header = raw[:end].decode("ascii", errors="replace")

    fmt = None
    vertex_count = None
    properties: list[tuple[str, str]] = []
    in_vertex = False
    offset = 0
    for line in header.splitlines():
        stripped = line.strip()
        tokens = stripped.split()
        if not tokens or tokens[0] in ("ply", "comment"):
            offset += len(line) + 1
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in (
                "ascii", "binary_little_endian"
            ):
                raise ParseError(path, offset, f"unsupported format {stripped!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError(path, offset, f"bad element line {stripped!r}")
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    vertex_count = int(tokens[2])
                except ValueError:
                    raise ParseError(
                        path, offset, f"bad vertex count {tokens[2]!r}"
                    ) from None
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise ParseError(
                    path, offset, "list properties are not supported"
                )
            if len(tokens) != 3 or tokens[1] not in _PLY_SCALARS:
                raise ParseError(path, offset, f"bad property line {stripped!r}")
            properties.append((tokens[2], _PLY_SCALARS[tokens[1]]))
        offset += len(line) + 1

    if fmt is None:
        raise ParseError(path, 0, "missing format line")
    if vertex_count is None:
        raise ParseError(path, 0, "missing vertex element")
    for axis in ("x", "y", "z"):
        if axis not in [name for name, _ in properties]:
            raise ParseError(path, 0, f"vertex element lacks property {axis!r}")
    return fmt, vertex_count, properties, data_start


def load_ply(path) -> np.ndarray:
    """Read the x/y/z columns of a PLY vertex element as float64."""
    path = Path(path)
    raw = path.read_bytes()
    fmt, count, properties, start = _parse_ply_header(raw, path)
    names = [name for name, _ in properties]

    if fmt == "ascii":
        pts = np.empty((count, 3))
        pos = start
        body = raw[start:].decode("ascii", errors="replace").splitlines()
        if len(body) < count:
            raise ParseError(
                path, len(raw),
                f"expected {count} vertex rows, file has {len(body)}",
            )
        cols = [names.index(a) for a in ("x", "y", "z")]
        for i in range(count):
            tokens = body[i].split()
            if len(tokens) != len(names):
                raise ParseError(
                    path, pos,
                    f"row {i}: expected {len(names)} values, got {len(tokens)}",
                )
            try:
                pts[i] = [float(tokens[c]) for c in cols]
            except ValueError:
                raise ParseError(path, pos, f"row {i}: non-numeric value") from None
            pos += len(body[i]) + 1
    else:
        dtype = np.dtype([(name, "<" + code) for name, code in properties])
        need = start + count * dtype.itemsize
        if len(raw) < need:
            raise ParseError(
                path, len(raw),
                f"truncated vertex data: need {need} bytes, have {len(raw)}",
            )
        rows = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        pts = np.stack(
            [rows["x"], rows["y"], rows["z"]], axis=1
        ).astype(np.float64)

    if np.isnan(pts).any():
        row = int(np.flatnonzero(np.isnan(pts).any(axis=1))[0])
        raise ParseError(path, start, f"NaN coordinate in vertex row {row}")
    return pts


def save_ply(path, points: np.ndarray) -> None:
    """Write points as binary little-endian PLY with double precision.

    Doubles keep the round trip bit-exact, which the determinism
    guarantees lean on.
    """
    pts = np.ascontiguousarray(points, dtype="<f8")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def save_meta_ply(path, meta: MetaShape) -> None:
    """Write the meta-shape as ASCII PLY with provenance columns."""
    n = meta.positions.shape[0]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property int origin_frame",
        "property int coverage",
        "end_header",
    ]
    for i in range(n):
        x, y, z = meta.positions[i]
        lines.append(
            f"{_fmt(x)} {_fmt(y)} {_fmt(z)} "
            f"{int(meta.origin_frames[i])} {int(meta.coverage[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_meta_ply(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read back positions, origin frames, and coverage counts."""
    path = Path(path)
    raw = path.read_bytes()
    fmt, count, properties, start = _parse_ply_header(raw, path)
    if fmt != "ascii":
        raise ParseError(path, 0, "meta-shape PLY must be ascii")
    names = [name for name, _ in properties]
    for needed in ("origin_frame", "coverage"):
        if needed not in names:
            raise ParseError(path, 0, f"missing property {needed!r}")
    body = raw[start:].decode("ascii").splitlines()
    table = np.array(
        [line.split() for line in body[:count]], dtype=np.float64
    )
    pos = table[:, [names.index(a) for a in ("x", "y", "z")]]
    origin = table[:, names.index("origin_frame")].astype(np.int64)
    coverage = table[:, names.index("coverage")].astype(np.int64)
    return pos, origin, coverage


# -------------------------------------------------- tagged binaries

def _load_tagged(path, magic: bytes) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise ParseError(path, 0, "file too short for header")
    if raw[:4] != magic:
        raise ParseError(
            path, 0, f"bad magic {raw[:4]!r}, expected {magic!r}"
        )
    count, dim = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * count * dim
    if len(raw) < need:
        raise ParseError(
            path, len(raw),
            f"truncated: need {need} bytes for {count}x{dim}, have {len(raw)}",
        )
    data = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=12)
    return data.reshape(count, dim).astype(np.float64)


def _save_tagged(path, magic: bytes, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def load_descriptors(path) -> np.ndarray:
    return _load_tagged(path, b"IMRD")


def save_descriptors(path, descriptors: np.ndarray) -> None:
    _save_tagged(path, b"IMRD", descriptors)


def load_global_feature(path) -> np.ndarray:
    rows = _load_tagged(path, b"IMRG")
    if rows.shape[0] != 1:
        raise ParseError(path, 4, f"expected 1 feature row, found {rows.shape[0]}")
    return rows[0]


def save_global_feature(path, feature: np.ndarray) -> None:
    _save_tagged(path, b"IMRG", np.asarray(feature, dtype=np.float64)[None, :])


# ------------------------------------------------------------ frames

def load_frame(paths: FrameFileSet, frame_id: int = 0) -> Frame:
    """Assemble a Frame from its keypoint and descriptor files.

    Descriptors are L2-normalized on load; rows whose norm already
    deviates from 1 by more than 1e-3 trigger a warning, since that
    usually means the file was produced by something else.
    """
    pts = load_ply(paths.keypoints)
    desc = load_descriptors(paths.descriptors)
    if desc.shape[0] != pts.shape[0]:
        raise ParseError(
            paths.descriptors, 4,
            f"descriptor count {desc.shape[0]} does not match "
            f"keypoint count {pts.shape[0]}",
        )
    norms = np.linalg.norm(desc, axis=1)
    if np.any(norms <= 0.0):
        raise ParseError(paths.descriptors, 12, "zero-norm descriptor row")
    if np.any(np.abs(norms - 1.0) > 1e-3):
        worst = float(np.max(np.abs(norms - 1.0)))
        logger.warning(
            "%s: descriptor norms deviate from 1 by up to %.3g; renormalizing",
            paths.descriptors, worst,
        )
    return Frame(id=frame_id, keypoints=pts, descriptors=desc / norms[:, None])


# ------------------------------------------------------------- poses

def save_poses(path, poses: dict[int, Pose]) -> None:
    """One line per frame: id then 16 row-major matrix entries."""
    lines = []
    for fid in sorted(poses):
        vals = " ".join(_fmt(v) for v in poses[fid].matrix().ravel())
        lines.append(f"{fid} {vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_poses(path) -> dict[int, Pose]:
    path = Path(path)
    poses: dict[int, Pose] = {}
    offset = 0
    for raw_line in path.read_text(encoding="ascii").splitlines():
        line = raw_line.strip()
        if line and not line.startswith("#"):
            tokens = line.split()
            if len(tokens) != 17:
                raise ParseError(
                    path, offset,
                    f"expected frame id + 16 values, got {len(tokens)} tokens",
                )
            try:
                fid = int(tokens[0])
                m = np.array([float(t) for t in tokens[1:]]).reshape(4, 4)
            except ValueError:
                raise ParseError(path, offset, "non-numeric pose entry") from None
            poses[fid] = Pose.from_matrix(m)
        offset += len(raw_line) + 1
    if not poses:
        raise ParseError(path, 0, "no poses found")
    return poses


# ---------------------------------------------------------- manifest

@dataclass(frozen=True)
class SceneManifest:
    """Everything needed to load a scene from disk."""

    frames: list[FrameFileSet]
    frame_ids: list[int]
    units: str = "meters"
    gt_poses: Path | None = None
    overlap_graph: Path | None = None


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, f"invalid JSON: {exc.msg}") from None
    if "frames" not in doc or not isinstance(doc["frames"], list):
        raise ParseError(path, 0, "manifest needs a 'frames' list")
    base = path.parent
    frames, ids = [], []
    for i, entry in enumerate(doc["frames"]):
        for key in ("keypoints", "descriptors"):
            if key not in entry:
                raise ParseError(path, 0, f"frame {i} missing {key!r}")
        gf = entry.get("global_feature")
        frames.append(
            FrameFileSet(
                keypoints=base / entry["keypoints"],
                descriptors=base / entry["descriptors"],
                global_feature=base / gf if gf else None,
            )
        )
        ids.append(int(entry.get("id", i)))
    if len(set(ids)) != len(ids):
        raise ParseError(path, 0, "duplicate frame ids in manifest")
    gt = doc.get("gt_poses")
    og = doc.get("overlap_graph")
    return SceneManifest(
        frames=frames,
        frame_ids=ids,
        units=str(doc.get("units", "meters")),
        gt_poses=base / gt if gt else None,
        overlap_graph=base / og if og else None,
    )


def save_manifest(path, manifest: SceneManifest) -> None:
    base = Path(path).parent

    def rel(p):
        p = Path(p)
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    doc = {
        "units": manifest.units,
        "frames": [
            {
                "id": fid,
                "keypoints": rel(fs.keypoints),
                "descriptors": rel(fs.descriptors),
                **(
                    {"global_feature": rel(fs.global_feature)}
                    if fs.global_feature
                    else {}
                ),
            }
            for fid, fs in zip(manifest.frame_ids, manifest.frames)
        ],
    }
    if manifest.gt_poses:
        doc["gt_poses"] = rel(manifest.gt_poses)
    if manifest.overlap_graph:
        doc["overlap_graph"] = rel(manifest.overlap_graph)
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_scene(manifest_path) -> tuple[list[Frame], SceneManifest]:
    """Load every frame listed in a manifest, checking consistency."""
    manifest = load_manifest(manifest_path)
    frames = []
    dim = None
    for fid, fs in zip(manifest.frame_ids, manifest.frames):
        frame = load_frame(fs, frame_id=fid)
        if dim is None:
            dim = frame.descriptors.shape[1]
        elif frame.descriptors.shape[1] != dim:
            raise ParseError(
                fs.descriptors, 8,
                f"descriptor dim {frame.descriptors.shape[1]} differs from "
                f"the scene's dim {dim}",
            )
        frames.append(frame)
    return frames, manifest


# ------------------------------------------------------ overlap graph

def save_overlap_graph(path, ids: list[int], overlap: np.ndarray) -> None:
    doc = {
        "ids": list(map(int, ids)),
        "overlap": [[float(v) for v in row] for row in np.asarray(overlap)],
    }
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_overlap_graph(path) -> tuple[list[int], np.ndarray]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, f"invalid JSON: {exc.msg}") from None
    if "ids" not in doc or "overlap" not in doc:
        raise ParseError(path, 0, "overlap graph needs 'ids' and 'overlap'")
    ids = [int(i) for i in doc["ids"]]
    overlap = np.asarray(doc["overlap"], dtype=np.float64)
    if overlap.shape != (len(ids), len(ids)):
        raise ParseError(
            path, 0,
            f"overlap matrix shape {overlap.shape} does not match "
            f"{len(ids)} ids",
        )
    return ids, overlap
