"""File formats: PPM images, PFM depth maps, ASCII PLY point clouds,
JSON intrinsics/poses/manifests, network checkpoints, loss-history CSV.

All writers are deterministic: equal inputs produce identical bytes.
"""

import csv
import io
import json
import struct

import numpy as np

from .camera import CameraIntrinsics, PhysicalCameraMeta
from .errors import DomainError, FileFormatError

PFM_INVALID = 0.0
PPM_MAXVAL = 65535
CHECKPOINT_MAGIC = b"MCCKPT1\n"


# ---------------------------------------------------------------- PPM

def write_ppm(path, channels: np.ndarray) -> None:
    """Write (1,H,W) as P5 or (3,H,W) as P6, 16-bit big-endian samples.

    Intensities are expected in [0, 1] and are quantized to 65535 steps;
    16 bits keep the gentle shading gradients of rendered scenes above
    the quantization floor.
    """
    arr = np.asarray(channels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DomainError(f"expected (C,H,W) with C in {{1,3}}, got {arr.shape}")
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise DomainError("intensities must lie in [0, 1]")
    c, h, w = arr.shape
    q = np.floor(np.clip(arr, 0.0, 1.0) * PPM_MAXVAL + 0.5).astype(">u2")
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, PPM_MAXVAL))
        # interleave channels for P6; P5 is the single plane
        fh.write(np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes())


def _read_pnm_tokens(fh, n):
    toks = []
    while len(toks) < n:
        line = fh.readline()
        if not line:
            raise FileFormatError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        toks.extend(line.split())
    return toks


def read_ppm(path) -> np.ndarray:
    """Read P5/P6 (8- or 16-bit) into (C,H,W) float64 in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"P5", b"P6"):
            raise FileFormatError(f"unsupported PNM magic {magic!r}")
        w, h, maxval = (int(t) for t in _read_pnm_tokens(fh, 3))
        if maxval <= 0 or maxval > 65535:
            raise FileFormatError(f"bad maxval {maxval}")
        c = 1 if magic == b"P5" else 3
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        count = w * h * c
        raw = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
        if raw.size != count:
            raise FileFormatError("truncated PNM payload")
    arr = raw.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64)
    return arr / maxval


# ---------------------------------------------------------------- PFM

def write_pfm(path, values: np.ndarray, mask: np.ndarray | None = None) -> None:
    """Write a single-channel PFM ("Pf", little-endian, scale -1.0).

    Rows are stored bottom-up per the format. Invalid pixels are encoded
    as 0.0.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DomainError(f"expected (H,W), got {arr.shape}")
    if mask is not None:
        arr = np.where(np.asarray(mask, dtype=bool), arr, PFM_INVALID)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a PFM; returns (values float64 (H,W), mask bool).

    Pixels equal to 0.0 (and non-finite ones) are invalid.
    """
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise FileFormatError(f"unsupported PFM magic {magic!r}")
        if magic == b"PF":
            raise FileFormatError("color PFM is not supported")
        w, h = (int(t) for t in _read_pnm_tokens(fh, 2))
        scale = float(_read_pnm_tokens(fh, 1)[0])
        endian = "<" if scale < 0 else ">"
        payload = fh.read(w * h * 4)
        if len(payload) != w * h * 4:
            raise FileFormatError("truncated PFM payload")
        raw = np.frombuffer(payload, dtype=endian + "f4")
    values = np.flipud(raw.reshape(h, w)).astype(np.float64)
    mask = np.isfinite(values) & (values != PFM_INVALID)
    values = np.where(mask, values, 0.0)
    return values, mask


# ---------------------------------------------------------------- PLY

def write_ply(path, points: np.ndarray) -> None:
    """Write (N,3) points as ASCII PLY with float x/y/z properties."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError(f"expected (N,3), got {pts.shape}")
    buf = io.StringIO()
    buf.write("ply\nformat ascii 1.0\nelement vertex %d\n" % pts.shape[0])
    buf.write("property float x\nproperty float y\nproperty float z\nend_header\n")
    for x, y, z in pts:
        buf.write("%.17g %.17g %.17g\n" % (x, y, z))
    with open(path, "w", newline="\n") as fh:
        fh.write(buf.getvalue())


def read_ply(path) -> np.ndarray:
    """Read an ASCII PLY vertex list into (N,3) float64."""
    with open(path, "r") as fh:
        if fh.readline().strip() != "ply":
            raise FileFormatError("not a PLY file")
        n_vertex = None
        fmt = None
        line = fh.readline()
        while line:
            t = line.strip()
            if t.startswith("format"):
                fmt = t.split()[1]
            elif t.startswith("element vertex"):
                n_vertex = int(t.split()[2])
            elif t.startswith("element") and n_vertex is not None:
                raise FileFormatError("only vertex elements are supported")
            elif t == "end_header":
                break
            line = fh.readline()
        else:
            raise FileFormatError("missing end_header")
        if fmt != "ascii":
            raise FileFormatError(f"unsupported PLY format {fmt!r}")
        if n_vertex is None:
            raise FileFormatError("missing vertex element")
        pts = np.empty((n_vertex, 3))
        for i in range(n_vertex):
            parts = fh.readline().split()
            if len(parts) < 3:
                raise FileFormatError(f"truncated vertex list at row {i}")
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
    return pts


# ---------------------------------------------------------------- JSON

def dump_json(obj) -> bytes:
    """Canonical JSON bytes: sorted keys, two-space indent, newline."""
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def write_json(path, obj) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_json(obj))


def read_json(path):
    try:
        with open(path, "r") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"malformed JSON in {path}: {e}") from e


def intrinsics_to_dict(k: CameraIntrinsics,
                       meta: PhysicalCameraMeta | None = None) -> dict:
    d = {"fx": k.fx, "fy": k.fy, "u0": k.u0, "v0": k.v0,
         "width": k.width, "height": k.height}
    if meta is not None:
        d["focal_um"] = meta.focal_um
        d["pixel_size_um"] = meta.pixel_size_um
    return d


def intrinsics_from_dict(d: dict) -> tuple[CameraIntrinsics, PhysicalCameraMeta | None]:
    meta = None
    if "focal_um" in d or "pixel_size_um" in d:
        if not ("focal_um" in d and "pixel_size_um" in d):
            raise FileFormatError("focal_um and pixel_size_um must appear together")
        meta = PhysicalCameraMeta(float(d["focal_um"]), float(d["pixel_size_um"]))
    try:
        if "fx" in d or "fy" in d:
            fx = float(d["fx"])
            fy = float(d["fy"])
        elif meta is not None:
            fx = fy = meta.focal_um / meta.pixel_size_um
        else:
            raise FileFormatError("intrinsics need fx/fy or physical metadata")
        k = CameraIntrinsics(fx, fy, float(d["u0"]), float(d["v0"]),
                             int(d["width"]), int(d["height"]))
    except KeyError as e:
        raise FileFormatError(f"missing intrinsics field {e}") from e
    return k, meta


def pose_to_dict(rotation: np.ndarray, translation: np.ndarray) -> dict:
    r = np.asarray(rotation, dtype=np.float64).reshape(9)
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    return {"R": [float(v) for v in r], "t": [float(v) for v in t]}


def pose_from_dict(d: dict) -> tuple[np.ndarray, np.ndarray]:
    try:
        r = np.asarray(d["R"], dtype=np.float64)
        t = np.asarray(d["t"], dtype=np.float64)
    except KeyError as e:
        raise FileFormatError(f"missing pose field {e}") from e
    if r.size != 9 or t.size != 3:
        raise FileFormatError("pose must hold 9 rotation and 3 translation floats")
    return r.reshape(3, 3), t.reshape(3)


# ---------------------------------------------------------- checkpoint

def write_checkpoint(path, header: dict, params: list[np.ndarray]) -> None:
    """Checkpoint = magic, LE uint64 header length, canonical JSON
    header, then all parameter arrays as raw little-endian float64 in
    order."""
    hdr = dump_json(header)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    """Returns (header, flat float64 parameter vector)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FileFormatError("not a metriccam checkpoint")
        lenfield = fh.read(8)
        if len(lenfield) != 8:
            raise FileFormatError("truncated checkpoint header length")
        (hlen,) = struct.unpack("<Q", lenfield)
        raw_header = fh.read(hlen)
        if len(raw_header) != hlen:
            raise FileFormatError("truncated checkpoint header")
        try:
            header = json.loads(raw_header)
        except json.JSONDecodeError as e:
            raise FileFormatError(f"malformed checkpoint header: {e}") from e
        payload = fh.read()
        if len(payload) % 8 != 0:
            raise FileFormatError("checkpoint parameter block is truncated")
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return header, flat


# ------------------------------------------------------------- history

def write_history_csv(path, rows: list[dict]) -> None:
    """Per-iteration loss history. Columns: iter, the components, total."""
    fields = ["iter", "silog", "patchnorm", "vnl", "pwn", "total"]
    with open(path, "w", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({f: repr(row[f]) if f != "iter" else row[f]
                             for f in fields})


def read_history_csv(path) -> list[dict]:
    with open(path, "r", newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            rec = {"iter": int(row["iter"])}
            for key in ("silog", "patchnorm", "vnl", "pwn", "total"):
                rec[key] = float(row[key])
            out.append(rec)
    return out
