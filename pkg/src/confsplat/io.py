"""File formats: Gaussian PLY, scene JSON, PPM/PNG/PFM images, appearance
sidecars, meshes (OBJ / PLY) and the CSV loss log."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .scene import SH_COEFFS, Camera, GaussianCloud

# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> dict[str, dict[str, np.ndarray]]:
    """Parse an ASCII or binary little-endian PLY into {element: {property: array}}.

    List properties (faces) come back as an (n, k) array when every row has
    the same length.
    """
    data = Path(path).read_bytes()
    end = data.index(b"end_header")
    end = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    if not header or header[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                elements[-1][2].append((parts[2], "scalar", _PLY_TYPES[parts[1]], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    out: dict[str, dict[str, np.ndarray]] = {}
    body = data[end:]
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            cols: dict[str, list] = {p[0]: [] for p in props}
            for _ in range(count):
                for pname, kind, t, it in props:
                    if kind == "list":
                        k = int(tokens[pos])
                        pos += 1
                        cols[pname].append([float(x) for x in tokens[pos:pos + k]])
                        pos += k
                    else:
                        cols[pname].append(float(tokens[pos]))
                        pos += 1
            out[name] = {k: np.asarray(v, dtype=np.dtype(dict((p[0], p[2] if p[1] == "scalar" else p[3]) for p in props)[k])) if v else np.zeros(0) for k, v in cols.items()}
        return out
    pos = 0
    for name, count, props in elements:
        if all(p[1] == "scalar" for p in props):
            dt = np.dtype([(p[0], "<" + p[2]) for p in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
            pos += dt.itemsize * count
            out[name] = {p[0]: arr[p[0]].copy() for p in props}
            continue
        cols = {p[0]: [] for p in props}
        for _ in range(count):
            for pname, kind, t, it in props:
                if kind == "list":
                    cdt = np.dtype("<" + t)
                    k = int(np.frombuffer(body, cdt, 1, pos)[0])
                    pos += cdt.itemsize
                    idt = np.dtype("<" + it)
                    cols[pname].append(np.frombuffer(body, idt, k, pos))
                    pos += idt.itemsize * k
                else:
                    sdt = np.dtype("<" + t)
                    cols[pname].append(np.frombuffer(body, sdt, 1, pos)[0])
                    pos += sdt.itemsize
        out[name] = {k: (np.stack(v) if v else np.zeros((0, 3), dtype=np.int64)) for k, v in cols.items()}
    return out


def _write_ply(path, vertex: dict[str, np.ndarray], faces: np.ndarray | None = None) -> None:
    names = list(vertex)
    n = len(vertex[names[0]]) if names else 0
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {k}" for k in names]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    dt = np.dtype([(k, "<f4") for k in names])
    arr = np.empty(n, dtype=dt)
    for k in names:
        arr[k] = vertex[k]
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(arr.tobytes())
        if faces is not None and len(faces):
            fd = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
            fa = np.empty(len(faces), dtype=fd)
            fa["n"] = 3
            fa["i"] = faces
            f.write(fa.tobytes())


def cloud_property_names() -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (SH_COEFFS - 1))]
    names += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    names.append("gamma")
    return names


def save_cloud(cloud: GaussianCloud, path) -> None:
    """Binary little-endian 3DGS-layout PLY plus a trailing ``gamma`` property."""
    n = len(cloud)
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (SH_COEFFS - 1))
    v = {"x": cloud.means[:, 0], "y": cloud.means[:, 1], "z": cloud.means[:, 2],
         "nx": np.zeros(n), "ny": np.zeros(n), "nz": np.zeros(n)}
    for i in range(3):
        v[f"f_dc_{i}"] = cloud.sh[:, 0, i]
    for i in range(rest.shape[1]):
        v[f"f_rest_{i}"] = rest[:, i]
    v["opacity"] = cloud.opacity_logits
    for i in range(3):
        v[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        v[f"rot_{i}"] = cloud.quats[:, i]
    v["gamma"] = cloud.gamma
    _write_ply(path, v)


def load_cloud(path, active_sh_degree: int = 3) -> GaussianCloud:
    v = read_ply(path)["vertex"]
    n = len(v["x"])
    sh = np.zeros((n, SH_COEFFS, 3))
    for i in range(3):
        sh[:, 0, i] = v[f"f_dc_{i}"]
    n_rest = sum(1 for k in v if k.startswith("f_rest_"))
    if n_rest:
        rest = np.stack([v[f"f_rest_{i}"] for i in range(n_rest)], axis=1)
        k = n_rest // 3
        sh[:, 1:1 + k, :] = rest.reshape(n, 3, k).transpose(0, 2, 1)
    gamma = v["gamma"] if "gamma" in v else np.zeros(n)
    return GaussianCloud(
        np.stack([v["x"], v["y"], v["z"]], axis=1),
        np.stack([v[f"rot_{i}"] for i in range(4)], axis=1),
        np.stack([v[f"scale_{i}"] for i in range(3)], axis=1),
        v["opacity"], sh, gamma, active_sh_degree=active_sh_degree,
    )


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    H, W = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(to_uint8(img[:, :, :3]).tobytes())


def _ppm_tokens(data: bytes, n: int):
    tokens, pos = [], 0
    while len(tokens) < n:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(data, 4)
    if magic not in (b"P6", b"P5"):
        raise ValueError(f"{path}: unsupported PNM type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    ch = 3 if magic == b"P6" else 1
    dt = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(data, dtype=dt, count=w * h * ch, offset=pos).reshape(h, w, ch)
    return arr.astype(np.float64) / maxval


def write_pgm(path, mask: np.ndarray) -> None:
    """8-bit single-channel PGM (masks: nonzero = foreground)."""
    m = np.asarray(mask)
    H, W = m.shape[:2]
    data = np.where(m.astype(np.float64) > 0, 255, 0).astype(np.uint8) if m.dtype == bool else to_uint8(m)
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM; rows stored bottom-to-top."""
    img = np.asarray(img, dtype=np.float32)
    color = img.ndim == 3 and img.shape[2] == 3
    if img.ndim == 3 and not color:
        img = img[:, :, 0]
    H, W = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{'PF' if color else 'Pf'}\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, scale), pos = _ppm_tokens(data, 4)
    w, h, scale = int(w), int(h), float(scale)
    ch = 3 if magic == b"PF" else 1
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dt, count=w * h * ch, offset=pos)
    arr = arr.reshape((h, w, 3) if ch == 3 else (h, w))[::-1]
    return arr.astype(np.float64)


def read_image(path) -> np.ndarray:
    """Load a PPM/PGM or PNG as float (H, W, 3) in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        img = read_ppm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# scene JSON
# ---------------------------------------------------------------------------

def camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width,
            "height": cam.height, "R": cam.R.reshape(-1).tolist(), "t": cam.t.tolist(),
            "image_id": cam.image_id, "image_path": cam.image_path}


def camera_from_dict(d: dict) -> Camera:
    return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                  int(d["width"]), int(d["height"]), np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
                  np.asarray(d["t"], dtype=np.float64), int(d.get("image_id", 0)), d.get("image_path"))


def save_scene(path, cameras: list[Camera], images: list[np.ndarray] | None = None,
               extra: dict | None = None, masks: list[np.ndarray] | None = None) -> None:
    """Write scene JSON; images and optional foreground masks go next to it
    as 8-bit PPM / PGM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, cam in enumerate(cameras):
        d = camera_to_dict(cam)
        if images is not None:
            name = f"image_{cam.image_id:03d}.ppm"
            write_ppm(path.parent / name, images[k])
            d["image_path"] = name
        if masks is not None:
            mname = f"mask_{cam.image_id:03d}.pgm"
            write_pgm(path.parent / mname, masks[k])
            d["mask_path"] = mname
        entries.append(d)
    doc = {"cameras": entries}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1))


def load_scene(path):
    """Return (cameras, images, masks or None, raw JSON document)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    cams = [camera_from_dict(d) for d in doc["cameras"]]
    images = []
    masks = None
    if all("mask_path" in d for d in doc["cameras"]) and doc["cameras"]:
        masks = [read_ppm(path.parent / d["mask_path"])[:, :, 0] > 0.5 for d in doc["cameras"]]
    for cam in cams:
        if cam.image_path is None:
            raise ValueError(f"camera {cam.image_id} has no image_path")
        img = read_image(path.parent / cam.image_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"image {cam.image_path} does not match camera size")
        images.append(img)
    return cams, images, masks, doc


# ---------------------------------------------------------------------------
# appearance sidecar
# ---------------------------------------------------------------------------

_APP_MAGIC = b"CSAPPEAR"
_APP_VERSION = 1


def save_appearance(path, model) -> None:
    """Versioned little-endian float32 dump of an appearance model's parameters."""
    params = model.parameters()
    kind = model.kind.encode("ascii")
    with open(path, "wb") as f:
        f.write(_APP_MAGIC)
        f.write(struct.pack("<IH", _APP_VERSION, len(kind)))
        f.write(kind)
        f.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            nb = name.encode("ascii")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_appearance(path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != _APP_MAGIC:
        raise ValueError(f"{path}: not an appearance sidecar")
    pos = 8
    version, klen = struct.unpack_from("<IH", data, pos)
    if version != _APP_VERSION:
        raise ValueError(f"{path}: unsupported sidecar version {version}")
    pos += 6
    kind = data[pos:pos + klen].decode("ascii")
    pos += klen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nl].decode("ascii")
        pos += nl
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    return kind, params


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def export_mesh(mesh, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    V = np.asarray(mesh.vertices, dtype=np.float32)
    F = np.asarray(mesh.faces, dtype=np.int64).reshape(-1, 3)
    if fmt == "obj":
        with open(path, "w") as f:
            # float64 repr of a float32 value parses back to the same float32
            for x, y, z in V.astype(np.float64).tolist():
                f.write(f"v {x!r} {y!r} {z!r}\n")
            for tri in F:
                f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
    elif fmt == "ply":
        _write_ply(path, {"x": V[:, 0], "y": V[:, 1], "z": V[:, 2]}, F)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}")


def load_mesh(path):
    from .meshing import TriMesh

    path = Path(path)
    if path.suffix.lower() == ".obj":
        V, F = [], []
        for line in path.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                V.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    F.append([idx[0], idx[k], idx[k + 1]])
        return TriMesh(np.asarray(V, dtype=np.float32).reshape(-1, 3).astype(np.float64),
                       np.asarray(F, dtype=np.int64).reshape(-1, 3))
    ply = read_ply(path)
    v = ply["vertex"]
    V = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    F = np.zeros((0, 3), dtype=np.int64)
    if "face" in ply:
        key = next(iter(ply["face"]))
        F = np.asarray(ply["face"][key], dtype=np.int64).reshape(-1, 3)
    return TriMesh(V, F)


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------

class LossLog:
    """CSV log with one row per iteration: iteration, each loss term, total."""

    def __init__(self, path, terms):
        self.path = Path(path)
        self._f = open(self.path, "w", newline="")
        self._w = csv.writer(self._f)
        self._w.writerow(["iteration", *terms, "total"])

    def write(self, row) -> None:
        self._w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])

    def close(self) -> None:
        self._f.close()
