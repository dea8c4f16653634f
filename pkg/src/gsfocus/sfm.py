"""SfM text-format datasets (``cameras.txt``, ``images.txt``, ``points3D.txt``).

Only the PINHOLE and SIMPLE_PINHOLE camera models are accepted. A dataset
directory may also hold an ``images/`` folder with the ground-truth frames
and an optional ``split.json`` of the form ``{"train": [...], "test": [...]}``
listing image names.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .core import Camera, quat_to_rotmat
from .errors import FormatError, UnsupportedModelError, ValidationError

SUPPORTED_MODELS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


@dataclass
class CameraModel:
    camera_id: int
    model: str
    width: int
    height: int
    params: tuple

    def intrinsics(self):
        if self.model == "SIMPLE_PINHOLE":
            f, cx, cy = self.params
            return f, f, cx, cy
        return tuple(self.params)


@dataclass
class SfmImage:
    image_id: int
    qvec: np.ndarray  # w, x, y, z (world -> camera)
    tvec: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class SfmPoint:
    point_id: int
    xyz: np.ndarray
    rgb: np.ndarray  # uint8
    error: float = 0.0
    track: list = field(default_factory=list)  # [(image_id, point2d_idx)]


@dataclass
class SfmDataset:
    cameras: dict
    images: dict
    points: dict
    root: Optional[str] = None

    def validate(self) -> None:
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise ValidationError(f"image {img.image_id} references unknown camera {img.camera_id}")
            for pid in img.point_ids:
                if pid != -1 and pid not in self.points:
                    raise ValidationError(f"image {img.image_id} references unknown point {pid}")
        for pt in self.points.values():
            for image_id, _ in pt.track:
                if image_id not in self.images:
                    raise ValidationError(f"point {pt.point_id} track references unknown image {image_id}")

    def point_array(self):
        ids = sorted(self.points)
        xyz = np.array([self.points[i].xyz for i in ids]).reshape(-1, 3)
        rgb = np.array([self.points[i].rgb for i in ids], dtype=np.float64).reshape(-1, 3) / 255.0
        return np.array(ids, dtype=np.int64), xyz, rgb

    def visibility(self) -> dict:
        """image id -> array of observed point ids."""
        vis = {i: set() for i in self.images}
        for pt in self.points.values():
            for image_id, _ in pt.track:
                vis[image_id].add(pt.point_id)
        for img in self.images.values():
            vis[img.image_id].update(int(p) for p in img.point_ids if p != -1)
        return {k: np.array(sorted(v), dtype=np.int64) for k, v in vis.items()}

    def camera(self, image_id: int, image_dir: Optional[str] = None) -> Camera:
        img = self.images[image_id]
        model = self.cameras[img.camera_id]
        fx, fy, cx, cy = model.intrinsics()
        q = img.qvec / np.linalg.norm(img.qvec)
        path = os.path.join(image_dir, img.name) if image_dir else None
        return Camera(image_id, model.width, model.height, fx, fy, cx, cy,
                      quat_to_rotmat(q), img.tvec, image_path=path, name=img.name)

    def subset(self, image_ids, point_ids) -> "SfmDataset":
        image_ids = set(int(i) for i in image_ids)
        point_ids = set(int(p) for p in point_ids)
        images = {}
        for i in sorted(image_ids):
            img = self.images[i]
            keep = np.array([p in point_ids for p in img.point_ids], dtype=bool)
            pids = np.where(keep, img.point_ids, -1) if len(img.point_ids) else img.point_ids
            images[i] = SfmImage(img.image_id, img.qvec, img.tvec, img.camera_id, img.name,
                                 img.xys, pids)
        points = {}
        for p in sorted(point_ids):
            pt = self.points[p]
            points[p] = SfmPoint(pt.point_id, pt.xyz, pt.rgb, pt.error,
                                 [t for t in pt.track if t[0] in image_ids])
        cam_ids = {img.camera_id for img in images.values()}
        cameras = {c: self.cameras[c] for c in sorted(cam_ids)}
        return SfmDataset(cameras, images, points, self.root)


def _data_lines(path):
    if not os.path.exists(path):
        raise FormatError("file not found", path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                continue
            yield lineno, line


def _read_cameras(path) -> dict:
    cams = {}
    for lineno, line in _data_lines(path):
        if not line.strip():
            continue
        parts = line.split()
        try:
            cam_id, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
            params = tuple(float(v) for v in parts[4:])
        except (ValueError, IndexError):
            raise FormatError(f"malformed camera line: {line!r}", path, lineno) from None
        if model not in SUPPORTED_MODELS:
            raise UnsupportedModelError(f"unsupported camera model {model}", path, lineno)
        if len(params) != SUPPORTED_MODELS[model]:
            raise FormatError(f"{model} expects {SUPPORTED_MODELS[model]} parameters", path, lineno)
        cams[cam_id] = CameraModel(cam_id, model, w, h, params)
    return cams


def _read_images(path) -> dict:
    images = {}
    lines = list(_data_lines(path))
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        if not line.strip():
            i += 1
            continue
        parts = line.split()
        try:
            image_id = int(parts[0])
            qvec = np.array([float(v) for v in parts[1:5]])
            tvec = np.array([float(v) for v in parts[5:8]])
            camera_id = int(parts[8])
            name = " ".join(parts[9:])
            if len(qvec) != 4 or len(tvec) != 3 or not name:
                raise ValueError
        except (ValueError, IndexError):
            raise FormatError(f"malformed image line: {line!r}", path, lineno) from None
        xys, pids = np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
        if i + 1 < len(lines):
            lineno2, pts = lines[i + 1]
            vals = pts.split()
            if len(vals) % 3:
                raise FormatError("points2D line must hold X Y POINT3D_ID triples", path, lineno2)
            try:
                arr = np.array([float(v) for v in vals]).reshape(-1, 3)
            except ValueError:
                raise FormatError(f"malformed points2D line: {pts!r}", path, lineno2) from None
            xys, pids = arr[:, :2], arr[:, 2].astype(np.int64)
        images[image_id] = SfmImage(image_id, qvec, tvec, camera_id, name, xys, pids)
        i += 2
    return images


def _read_points(path) -> dict:
    points = {}
    for lineno, line in _data_lines(path):
        if not line.strip():
            continue
        parts = line.split()
        try:
            pid = int(parts[0])
            xyz = np.array([float(v) for v in parts[1:4]])
            rgb = np.array([int(v) for v in parts[4:7]], dtype=np.uint8)
            err = float(parts[7])
            rest = [int(v) for v in parts[8:]]
            if len(xyz) != 3 or len(rgb) != 3 or len(rest) % 2:
                raise ValueError
        except (ValueError, IndexError):
            raise FormatError(f"malformed point line: {line!r}", path, lineno) from None
        track = [(rest[k], rest[k + 1]) for k in range(0, len(rest), 2)]
        points[pid] = SfmPoint(pid, xyz, rgb, err, track)
    return points


def find_sparse_dir(directory) -> str:
    for cand in (directory, os.path.join(directory, "sparse", "0"), os.path.join(directory, "sparse")):
        if os.path.exists(os.path.join(cand, "cameras.txt")):
            return cand
    return directory


def load_sfm(directory) -> SfmDataset:
    sparse = find_sparse_dir(directory)
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        if not os.path.exists(os.path.join(sparse, name)):
            raise FormatError(f"missing {name}", directory)
    ds = SfmDataset(_read_cameras(os.path.join(sparse, "cameras.txt")),
                    _read_images(os.path.join(sparse, "images.txt")),
                    _read_points(os.path.join(sparse, "points3D.txt")),
                    root=os.path.abspath(directory))
    ds.validate()
    return ds


def _fmt(v: float) -> str:
    return repr(float(v))


def write_sfm(ds: SfmDataset, directory) -> None:
    """Write the three text files into ``directory`` with deterministic order."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "cameras.txt"), "w") as fh:
        fh.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cid in sorted(ds.cameras):
            c = ds.cameras[cid]
            fh.write(" ".join([str(cid), c.model, str(c.width), str(c.height)]
                              + [_fmt(p) for p in c.params]) + "\n")
    with open(os.path.join(directory, "images.txt"), "w") as fh:
        fh.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for iid in sorted(ds.images):
            img = ds.images[iid]
            fh.write(" ".join([str(iid)] + [_fmt(v) for v in img.qvec] + [_fmt(v) for v in img.tvec]
                              + [str(img.camera_id), img.name]) + "\n")
            fh.write(" ".join(f"{_fmt(x)} {_fmt(y)} {int(p)}"
                              for (x, y), p in zip(img.xys, img.point_ids)) + "\n")
    with open(os.path.join(directory, "points3D.txt"), "w") as fh:
        fh.write("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid in sorted(ds.points):
            p = ds.points[pid]
            fields = [str(pid)] + [_fmt(v) for v in p.xyz] + [str(int(v)) for v in p.rgb] + [_fmt(p.error)]
            fields += [f"{a} {b}" for a, b in p.track]
            fh.write(" ".join(fields) + "\n")


def load_split(directory) -> Optional[dict]:
    path = os.path.join(directory, "split.json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with non-negative w for rotation ``R``."""
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q
