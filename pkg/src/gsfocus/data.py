"""Turn an SfM directory (or an exported block bundle) into training inputs."""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from .errors import FormatError, InsufficientDataError
from .imageio import load_image
from .optimizer import TrainingData
from .sfm import SfmDataset, load_sfm, load_split


def read_manifest(directory) -> Optional[dict]:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        return None
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest: {exc}", path) from None


def resolve_image_dir(directory, image_dir: Optional[str] = None) -> str:
    if image_dir:
        return image_dir
    manifest = read_manifest(directory)
    if manifest and manifest.get("image_dir"):
        return os.path.normpath(os.path.join(directory, manifest["image_dir"]))
    return os.path.join(directory, "images")


def load_views(ds: SfmDataset, image_ids, image_dir) -> list:
    views = []
    for iid in image_ids:
        cam = ds.camera(iid, image_dir)
        img = load_image(cam.image_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise FormatError(f"image is {img.shape[1]}x{img.shape[0]}, camera expects "
                              f"{cam.width}x{cam.height}", cam.image_path)
        views.append((cam, img))
    return views


def load_training_data(directory, image_dir: Optional[str] = None,
                       use_split: bool = True) -> TrainingData:
    """Load cameras, images and points.

    With ``split.json`` present, its ``test`` names become held-out views;
    otherwise every image trains.
    """
    ds = load_sfm(directory)
    image_dir = resolve_image_dir(directory, image_dir)
    split = load_split(directory) if use_split else None
    by_name = {img.name: iid for iid, img in ds.images.items()}
    test_names = set(split.get("test", [])) if split else set()
    unknown = test_names - set(by_name)
    if unknown:
        raise FormatError(f"split names unknown images {sorted(unknown)}",
                          os.path.join(directory, "split.json"))
    train_ids = sorted(i for i, img in ds.images.items() if img.name not in test_names)
    test_ids = sorted(by_name[n] for n in test_names)
    if not train_ids:
        raise InsufficientDataError("dataset has no training images")
    _, xyz, rgb = ds.point_array()
    if len(xyz) == 0:
        raise InsufficientDataError("dataset has no 3D points")
    return TrainingData(load_views(ds, train_ids, image_dir), xyz, rgb,
                        load_views(ds, test_ids, image_dir))


def point_ids_in_order(ds: SfmDataset) -> np.ndarray:
    return np.array(sorted(ds.points), dtype=np.int64)
