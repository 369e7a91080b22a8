"""File formats and dataset layout: PGM/PPM rasters, PLY meshes and clouds,
trajectory text, intrinsics JSON, and atomic output writing."""

from __future__ import annotations

import contextlib
import json
import os
import re
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, PointCloud, Pose, RigExtrinsics
from .imaging import ColorImage

FRAME_NAME = re.compile(r"^(\d{6})\.(pgm|ppm)$")


class DatasetError(ValueError):
    """Malformed input data; the message names the first offending file."""


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@contextlib.contextmanager
def staged_output(final_dir):
    """Yield a scratch directory whose entries move into ``final_dir`` on success.

    On error the scratch directory is removed and ``final_dir`` is left as it was.
    """
    final_dir = Path(final_dir)
    final_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=final_dir.parent, prefix=f".{final_dir.name}.", suffix=".partial"))
    try:
        yield stage
        final_dir.mkdir(parents=True, exist_ok=True)
        for entry in sorted(stage.iterdir()):
            dest = final_dir / entry.name
            if dest.is_dir() and not dest.is_symlink():
                shutil.rmtree(dest)
            os.replace(entry, dest)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _read_netpbm(path, magic: bytes):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace with optional comments
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise DatasetError(f"{path}: expected {magic.decode()} file, found {tokens[0][:2]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed header") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise DatasetError(f"{path}: invalid dimensions or maxval")
    pos += 1  # single whitespace byte ends the header
    return path, raw[pos:], w, h, maxval


def read_pgm(path) -> np.ndarray:
    """8- or 16-bit grayscale; 16-bit samples are big-endian per the format."""
    path, body, w, h, maxval = _read_netpbm(path, b"P5")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(body) < need:
        raise DatasetError(f"{path}: truncated pixel data")
    img = np.frombuffer(body[:need], dtype=dtype).reshape(h, w)
    return img.astype(np.uint16 if maxval > 255 else np.uint8)


def pgm_bytes(img: np.ndarray, maxval: int | None = None) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM data must be 2-D")
    if maxval is None:
        maxval = 65535 if img.dtype == np.uint16 else 255
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(img.astype(dtype)).tobytes()


def write_pgm(path, img: np.ndarray, maxval: int | None = None) -> None:
    atomic_write_bytes(path, pgm_bytes(img, maxval))


def read_depth(path) -> DepthImage:
    img = read_pgm(path)
    return DepthImage(img.astype(np.uint16))


def read_ppm(path) -> ColorImage:
    path, body, w, h, maxval = _read_netpbm(path, b"P6")
    if maxval > 255:
        raise DatasetError(f"{path}: only 8-bit PPM is supported")
    need = w * h * 3
    if len(body) < need:
        raise DatasetError(f"{path}: truncated pixel data")
    return ColorImage(np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, 3).copy())


def ppm_bytes(img: ColorImage | np.ndarray) -> bytes:
    data = img.data if isinstance(img, ColorImage) else np.asarray(img, dtype=np.uint8)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def write_ppm(path, img) -> None:
    atomic_write_bytes(path, ppm_bytes(img))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def ply_bytes(vertices: np.ndarray, normals: np.ndarray | None = None, triangles: np.ndarray | None = None) -> bytes:
    """Binary little-endian PLY with float32 vertices (and normals) and int32 faces."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
             "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if triangles is not None:
        lines += [f"element face {len(triangles)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    rec = np.empty(len(v), dtype=fields)
    rec["x"], rec["y"], rec["z"] = v.T
    if normals is not None:
        n = np.asarray(normals, dtype=float).reshape(-1, 3)
        rec["nx"], rec["ny"], rec["nz"] = n.T
    out = ("\n".join(lines) + "\n").encode("ascii") + rec.tobytes()
    if triangles is not None:
        f = np.empty(len(triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        f["n"] = 3
        f["i"] = np.asarray(triangles, dtype=np.int64)
        out += f.tobytes()
    return out


def write_ply(path, vertices, normals=None, triangles=None) -> None:
    atomic_write_bytes(path, ply_bytes(vertices, normals, triangles))


def read_ply(path) -> dict:
    """Read a binary little-endian PLY.

    Returns a dict with ``vertices`` and, when present, ``normals`` and
    ``triangles`` (triangulated faces only).
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii", "replace").splitlines()
    elements: list[list] = []
    fmt = None
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property" and elements:
            elements[-1][2].append(parts[1:])
    if fmt != "binary_little_endian":
        raise DatasetError(f"{path}: only binary_little_endian PLY is supported")
    pos = body_start
    out: dict = {}
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if len(props) != 1:
                raise DatasetError(f"{path}: unsupported list element {name}")
            _, ctype, itype, _ = props[0]
            cdt, idt = np.dtype("<" + _PLY_TYPES[ctype]), np.dtype("<" + _PLY_TYPES[itype])
            tris = np.empty((count, 3), dtype=np.int64)
            for i in range(count):
                n = int(np.frombuffer(raw, cdt, 1, pos)[0])
                pos += cdt.itemsize
                if n != 3:
                    raise DatasetError(f"{path}: face {i} is not a triangle")
                tris[i] = np.frombuffer(raw, idt, 3, pos)
                pos += 3 * idt.itemsize
            if name == "face":
                out["triangles"] = tris
            continue
        try:
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
        except KeyError as exc:
            raise DatasetError(f"{path}: unknown property type {exc.args[0]}") from None
        if pos + dt.itemsize * count > len(raw):
            raise DatasetError(f"{path}: truncated {name} data")
        rec = np.frombuffer(raw, dt, count, pos)
        pos += dt.itemsize * count
        if name == "vertex":
            out["vertices"] = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
            if {"nx", "ny", "nz"} <= set(dt.names):
                out["normals"] = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(float)
    if "vertices" not in out:
        raise DatasetError(f"{path}: no vertex element")
    return out


def read_cloud(path) -> PointCloud:
    d = read_ply(path)
    return PointCloud(d["vertices"], d.get("normals"))


# ---------------------------------------------------------------------------
# trajectories, timestamps, intrinsics
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    return repr(float(x))


def trajectory_text(traj) -> str:
    """``timestamp tx ty tz qx qy qz qw`` per line."""
    lines = []
    for t, p in traj:
        w, x, y, z = p.q
        lines.append(" ".join(_num(v) for v in (t, *p.t, x, y, z, w)))
    return "\n".join(lines) + ("\n" if lines else "")


def write_trajectory(path, traj) -> None:
    atomic_write_text(path, trajectory_text(traj))


def read_trajectory(path) -> list[tuple[float, Pose]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(f"{path}:{n}: expected 8 fields, found {len(parts)}")
        try:
            t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts)
        except ValueError:
            raise DatasetError(f"{path}:{n}: non-numeric field") from None
        q = np.array([qw, qx, qy, qz])
        nq = np.linalg.norm(q)
        if not np.all(np.isfinite(q)) or abs(nq - 1.0) > 1e-3:
            raise DatasetError(f"{path}:{n}: quaternion is not unit length")
        out.append((t, Pose(q / nq, np.array([tx, ty, tz]))))
    return out


def read_timestamps(path) -> list[float]:
    path = Path(path)
    try:
        lines = path.read_text().split()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        return [float(v) for v in lines]
    except ValueError:
        raise DatasetError(f"{path}: non-numeric timestamp") from None


def write_timestamps(path, stamps) -> None:
    atomic_write_text(path, "".join(_num(t) + "\n" for t in stamps))


def intrinsics_dict(k_depth: CameraIntrinsics, k_color: CameraIntrinsics, rig: RigExtrinsics) -> dict:
    w, x, y, z = rig.color_to_depth.q
    return {
        "depth": k_depth.to_dict(),
        "color": k_color.to_dict(),
        "color_to_depth": {"quaternion_xyzw": [x, y, z, w], "translation": list(rig.color_to_depth.t)},
    }


def write_intrinsics(path, k_depth, k_color, rig) -> None:
    atomic_write_text(path, json.dumps(intrinsics_dict(k_depth, k_color, rig), indent=2, sort_keys=True) + "\n")


def _intrinsics(d, where) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
        )
    except KeyError as exc:
        raise DatasetError(f"{where}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: {exc}") from None


def read_intrinsics(path) -> tuple[CameraIntrinsics, CameraIntrinsics, RigExtrinsics]:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc.msg})") from None
    for key in ("depth", "color", "color_to_depth"):
        if key not in d:
            raise DatasetError(f"{path}: missing key {key!r}")
    kd = _intrinsics(d["depth"], f"{path}: depth")
    kc = _intrinsics(d["color"], f"{path}: color")
    try:
        x, y, z, w = (float(v) for v in d["color_to_depth"]["quaternion_xyzw"])
        t = np.array([float(v) for v in d["color_to_depth"]["translation"]])
    except (KeyError, TypeError, ValueError):
        raise DatasetError(f"{path}: color_to_depth needs quaternion_xyzw[4] and translation[3]") from None
    q = np.array([w, x, y, z])
    if t.shape != (3,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise DatasetError(f"{path}: color_to_depth quaternion must be unit length, translation 3-D")
    return kd, kc, RigExtrinsics(Pose(q / np.linalg.norm(q), t))


def validate_imu(path) -> int:
    """Check ``timestamp,ax,ay,az,gx,gy,gz`` rows; returns the row count."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    rows = 0
    last = -np.inf
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or (n == 1 and line.lower().startswith("timestamp")):
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise DatasetError(f"{path}:{n}: expected 7 comma-separated fields")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise DatasetError(f"{path}:{n}: non-numeric field") from None
        if not all(np.isfinite(vals)):
            raise DatasetError(f"{path}:{n}: non-finite value")
        if vals[0] < last:
            raise DatasetError(f"{path}:{n}: timestamps decrease")
        last = vals[0]
        rows += 1
    return rows


# ---------------------------------------------------------------------------
# dataset layout
# ---------------------------------------------------------------------------


def frame_name(i: int, ext: str) -> str:
    return f"{i:06d}.{ext}"


def _frame_indices(directory: Path, ext: str) -> list[int]:
    if not directory.is_dir():
        return []
    idx = []
    for p in sorted(directory.iterdir()):
        m = FRAME_NAME.match(p.name)
        if m and m.group(2) == ext:
            idx.append(int(m.group(1)))
    return idx


def _check_contiguous(root: Path, sub: str, ext: str, n: int) -> None:
    have = set(_frame_indices(root / sub, ext))
    for i in range(n):
        if i not in have:
            raise DatasetError(f"missing {sub} frame: {sub}/{frame_name(i, ext)}")
    extra = sorted(have - set(range(n)))
    if extra:
        raise DatasetError(f"unexpected {sub} frame: {sub}/{frame_name(extra[0], ext)}")


@dataclass(frozen=True)
class Dataset:
    root: Path
    timestamps: tuple[float, ...]
    k_depth: CameraIntrinsics
    k_color: CameraIntrinsics
    rig: RigExtrinsics
    has_ir: bool = False
    imu_rows: int = 0

    def __len__(self) -> int:
        return len(self.timestamps)

    def depth_path(self, i: int) -> Path:
        return self.root / "depth" / frame_name(i, "pgm")

    def color_path(self, i: int) -> Path:
        return self.root / "color" / frame_name(i, "ppm")

    def depth(self, i: int) -> DepthImage:
        img = read_pgm(self.depth_path(i))
        if img.shape != (self.k_depth.height, self.k_depth.width):
            raise DatasetError(f"{self.depth_path(i)}: size {img.shape[::-1]} does not match depth intrinsics")
        if img.dtype != np.uint16:
            raise DatasetError(f"{self.depth_path(i)}: depth must be 16-bit")
        return DepthImage(img)

    def color(self, i: int) -> ColorImage:
        img = read_ppm(self.color_path(i))
        if img.data.shape[:2] != (self.k_color.height, self.k_color.width):
            raise DatasetError(f"{self.color_path(i)}: size does not match colour intrinsics")
        return img


def load_dataset(root) -> Dataset:
    """Validate the directory layout and load metadata (frames load lazily)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    if not (root / "intrinsics.json").is_file():
        raise DatasetError(f"missing file: {root / 'intrinsics.json'}")
    if not (root / "timestamps.txt").is_file():
        raise DatasetError(f"missing file: {root / 'timestamps.txt'}")
    kd, kc, rig = read_intrinsics(root / "intrinsics.json")
    stamps = read_timestamps(root / "timestamps.txt")
    n = len(stamps)
    if n == 0:
        raise DatasetError(f"{root}: dataset has no frames")
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise DatasetError(f"{root / 'timestamps.txt'}: timestamps decrease")
    _check_contiguous(root, "depth", "pgm", n)
    _check_contiguous(root, "color", "ppm", n)
    has_ir = (root / "ir").is_dir()
    if has_ir:
        _check_contiguous(root, "ir", "pgm", n)
    imu_rows = validate_imu(root / "imu.csv") if (root / "imu.csv").exists() else 0
    return Dataset(root, tuple(stamps), kd, kc, rig, has_ir, imu_rows)
