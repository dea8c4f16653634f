"""Deterministic synthetic scenes for tests and demos.

Ground-truth images are rendered from a known Gaussian cloud; the "SfM"
points handed to the trainer are noisy samples around it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianCloud, RenderSettings, logit
from .imageio import save_image
from .rasterizer import render
from .sfm import CameraModel, SfmDataset, SfmImage, SfmPoint, rotmat_to_quat, write_sfm


@dataclass
class SynthScene:
    truth: GaussianCloud
    cameras: list
    images: list
    test_cameras: list
    test_images: list
    points: np.ndarray
    point_colors: np.ndarray
    settings: RenderSettings = field(default_factory=RenderSettings)

    def training_data(self):
        from .optimizer import TrainingData
        return TrainingData(list(zip(self.cameras, self.images)), self.points, self.point_colors,
                            list(zip(self.test_cameras, self.test_images)))


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def _cluster(rng, n, center, half_extent, scale_range, opacity_range=(0.6, 0.95)):
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half_extent, dtype=np.float64)
    pos = center + rng.uniform(-1, 1, (n, 3)) * half
    scales = rng.uniform(*scale_range, (n, 3))
    colors = rng.uniform(0.15, 0.95, (n, 3))
    return GaussianCloud(pos, np.log(scales), _random_quats(rng, n),
                         logit(rng.uniform(*opacity_range, n)), colors)


def _noisy_points(rng, truth: GaussianCloud, per_gaussian=2, noise=0.03, color_noise=0.05):
    idx = np.repeat(np.arange(len(truth)), per_gaussian)
    pos = truth.positions[idx] + rng.normal(0, 1, (len(idx), 3)) * (0.5 * truth.scales[idx] + noise)
    col = np.clip(truth.colors[idx] + rng.normal(0, color_noise, (len(idx), 3)), 0, 1)
    return pos, np.round(col * 255) / 255


def _render_all(truth, cams, settings):
    return [np.clip(render(truth, cam, settings)[0], 0.0, 1.0) for cam in cams]


def toy_scene(seed: int = 0, n_gaussians: int = 36, wall: int = 4, n_train: int = 12,
              n_test: int = 4, size: int = 64, radius: float = 6.0, fov: float = 20.0) -> SynthScene:
    """~50 coloured Gaussians in a unit-ish box viewed from a ring of cameras.

    Besides the scattered blobs, a ``wall`` x ``wall`` grid of overlapping
    small Gaussians forms a smooth backdrop: large featureless areas are
    where an unconstrained fit tends to grow oversized primitives.
    """
    rng = np.random.default_rng(seed)
    truth = _cluster(rng, n_gaussians, (0, 0, 0.1), (0.5, 0.5, 0.3), (0.04, 0.14))
    if wall:
        g = np.linspace(-0.45, 0.45, wall)
        xs, ys = np.meshgrid(g, g)
        n = xs.size
        pos = np.stack([xs.ravel(), ys.ravel(), np.full(n, -0.45)], axis=1)
        base = rng.uniform(0.3, 0.6, 3)
        colors = np.clip(base + 0.15 * pos[:, :1] * [1.0, -0.5, 0.3], 0, 1)
        truth = GaussianCloud.concatenate([truth, GaussianCloud(
            pos, np.log(np.tile([0.16, 0.16, 0.02], (n, 1))), np.tile([1.0, 0, 0, 0], (n, 1)),
            np.full(n, logit(0.8)), colors)])
    settings = RenderSettings()

    def ring(n, offset, start_id):
        cams = []
        for i in range(n):
            az = 2 * np.pi * (i + offset) / n
            el = np.radians(25.0 if i % 2 == 0 else -10.0)
            eye = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
            cams.append(Camera.look_at(start_id + i, eye, (0, 0, 0), size, size, fov,
                                       name=f"view_{start_id + i:03d}.png"))
        return cams

    cams = ring(n_train, 0.0, 1)
    test = ring(n_test, 0.37, n_train + 1)
    points, colors = _noisy_points(rng, truth)
    return SynthScene(truth, cams, _render_all(truth, cams, settings), test,
                      _render_all(truth, test, settings), points, colors, settings)


def edge_scene(seed: int = 0, n_train: int = 12, n_test: int = 4, size: int = 64) -> SynthScene:
    """Two flat slabs of contrasting colour meeting along a sharp edge."""
    rng = np.random.default_rng(seed)
    parts = []
    for sign, color in ((-1, (0.95, 0.95, 0.9)), (1, (0.05, 0.1, 0.15))):
        ys, zs = np.meshgrid(np.linspace(-0.5, 0.5, 6), np.linspace(-0.5, 0.5, 6))
        n = ys.size
        pos = np.stack([np.full(n, 0.0), ys.ravel() * 0.9 + sign * 0.45, zs.ravel()], axis=1)
        scales = np.tile([0.02, 0.06, 0.07], (n, 1))
        rot = np.tile([1.0, 0, 0, 0], (n, 1))
        parts.append(GaussianCloud(pos, np.log(scales), rot, np.full(n, logit(0.95)),
                                   np.tile(color, (n, 1))))
    truth = GaussianCloud.concatenate(parts)
    settings = RenderSettings()
    cams, test = [], []
    for i in range(n_train + n_test):
        az = np.radians(-40 + 80 * ((i * 0.618) % 1.0))
        el = np.radians(-20 + 40 * ((i * 0.382) % 1.0))
        eye = 2.5 * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cam = Camera.look_at(i + 1, eye, (0, 0, 0), size, size, 45.0, name=f"view_{i + 1:03d}.png")
        (cams if i < n_train else test).append(cam)
    points, colors = _noisy_points(rng, truth, per_gaussian=1, noise=0.03)
    return SynthScene(truth, cams, _render_all(truth, cams, settings), test,
                      _render_all(truth, test, settings), points, colors, settings)


def town_scene(seed: int = 0, per_cluster: int = 60, cams_per_cluster: int = 12,
               size: int = 64, spacing: float = 6.0) -> SynthScene:
    """Four building-like clusters on a grid, each ringed by inward-facing cameras.

    Cameras sit between a cluster and the town centre and look outwards, so
    every frame shows only its own cluster.
    """
    rng = np.random.default_rng(seed)
    centers = [(sx * spacing, sy * spacing, 0.8) for sx in (-1, 1) for sy in (-1, 1)]
    truth = GaussianCloud.concatenate(
        [_cluster(rng, per_cluster, c, (0.8, 0.8, 0.75), (0.05, 0.16)) for c in centers])
    settings = RenderSettings()
    cams = []
    for ci, c in enumerate(centers):
        c = np.asarray(c)
        out = c[:2] / np.linalg.norm(c[:2])
        base = np.arctan2(out[1], out[0])
        for k in range(cams_per_cluster):
            phi = base + np.radians(np.linspace(-70, 70, cams_per_cluster)[k])
            view = np.array([np.cos(phi), np.sin(phi)])
            eye = np.array([*(c[:2] - 3.2 * view), c[2] + (0.9 if k % 2 else 0.2)])
            image_id = ci * cams_per_cluster + k + 1
            cams.append(Camera.look_at(image_id, eye, c, size, size, 45.0,
                                       name=f"view_{image_id:03d}.png"))
    points, colors = _noisy_points(rng, truth)
    return SynthScene(truth, cams, _render_all(truth, cams, settings), [], [],
                      points, colors, settings)


SCENES = {"toy": toy_scene, "edge": edge_scene, "town": town_scene}


def to_dataset(scene: SynthScene) -> SfmDataset:
    """Package a synthetic scene as an SfM dataset with projected tracks."""
    all_cams = scene.cameras + scene.test_cameras
    cameras, images, tracks = {}, {}, {i: [] for i in range(len(scene.points))}
    for cam in all_cams:
        cameras[cam.image_id] = CameraModel(cam.image_id, "PINHOLE", cam.width, cam.height,
                                            (cam.fx, cam.fy, cam.cx, cam.cy))
        pc = scene.points @ cam.R.T + cam.t
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * pc[:, 0] / z + cam.cx
            v = cam.fy * pc[:, 1] / z + cam.cy
        seen = np.flatnonzero((z > 0.01) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height))
        xys = np.stack([u[seen], v[seen]], axis=1) if len(seen) else np.zeros((0, 2))
        for k, p in enumerate(seen):
            tracks[int(p)].append((cam.image_id, k))
        images[cam.image_id] = SfmImage(cam.image_id, rotmat_to_quat(cam.R), cam.t.copy(),
                                        cam.image_id, cam.name, xys, (seen + 1).astype(np.int64))
    points = {}
    for i, (xyz, rgb) in enumerate(zip(scene.points, scene.point_colors)):
        points[i + 1] = SfmPoint(i + 1, xyz.copy(), np.round(rgb * 255).astype(np.uint8), 0.5, tracks[i])
    return SfmDataset(cameras, images, points)


def write_scene(scene: SynthScene, out_dir, truth_ply: bool = True) -> None:
    """Write ``cameras.txt``/``images.txt``/``points3D.txt``, ``images/`` and ``split.json``."""
    from .ply import write_ply
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    write_sfm(to_dataset(scene), out_dir)
    for cam, img in zip(scene.cameras + scene.test_cameras, scene.images + scene.test_images):
        save_image(img, os.path.join(out_dir, "images", cam.name))
    split = {"train": [c.name for c in scene.cameras], "test": [c.name for c in scene.test_cameras]}
    with open(os.path.join(out_dir, "split.json"), "w") as fh:
        json.dump(split, fh, indent=2)
        fh.write("\n")
    if truth_ply:
        write_ply(scene.truth, os.path.join(out_dir, "truth.ply"))
