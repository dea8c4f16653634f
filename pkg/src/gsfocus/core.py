"""Scene representation, cameras and the covariance/projection math.

Images are plain ``(height, width, 3)`` float64 arrays with linear RGB
values; :func:`check_image` validates them where an operation requires it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, InvalidParameterError

SH_C1 = 0.4886025119029199


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def check_image(img, name="image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidParameterError(f"{name} contains non-finite values")
    return img


# --------------------------------------------------------------------------
# Gaussian cloud
# --------------------------------------------------------------------------


@dataclass
class GaussianCloud:
    """Optimizable set of 3D Gaussians.

    Scales are stored as logs, opacities as logits and rotations as
    ``(w, x, y, z)`` quaternions. ``sh1`` holds optional degree-1 spherical
    harmonic coefficients with shape ``(N, 3, 3)`` indexed
    ``[gaussian, channel, coefficient]``.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    sh1: Optional[np.ndarray] = None
    ages: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.sh1 is not None:
            self.sh1 = np.asarray(self.sh1, dtype=np.float64).reshape(n, 3, 3)
        if self.ages is None:
            self.ages = np.zeros(n, dtype=np.int64)
        else:
            self.ages = np.asarray(self.ages, dtype=np.int64).reshape(n)

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianCloud":
        return cls(
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros((0, 4)),
            np.zeros(0),
            np.zeros((0, 3)),
            sh1=np.zeros((0, 3, 3)) if sh_degree >= 1 else None,
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return 0 if self.sh1 is None else 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def alphas(self) -> np.ndarray:
        return sigmoid(self.opacities)

    def param_groups(self) -> dict:
        groups = {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacities": self.opacities,
            "colors": self.colors,
        }
        if self.sh1 is not None:
            groups["sh1"] = self.sh1
        return groups

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacities.copy(),
            self.colors.copy(),
            sh1=None if self.sh1 is None else self.sh1.copy(),
            ages=self.ages.copy(),
        )

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[idx],
            self.log_scales[idx],
            self.rotations[idx],
            self.opacities[idx],
            self.colors[idx],
            sh1=None if self.sh1 is None else self.sh1[idx],
            ages=self.ages[idx],
        )

    @staticmethod
    def concatenate(clouds) -> "GaussianCloud":
        clouds = list(clouds)
        if not clouds:
            return GaussianCloud.empty()
        degrees = {c.sh_degree for c in clouds}
        if len(degrees) != 1:
            raise ContractError("cannot concatenate clouds with different SH degrees")
        cat = np.concatenate
        return GaussianCloud(
            cat([c.positions for c in clouds]),
            cat([c.log_scales for c in clouds]),
            cat([c.rotations for c in clouds]),
            cat([c.opacities for c in clouds]),
            cat([c.colors for c in clouds]),
            sh1=None if clouds[0].sh1 is None else cat([c.sh1 for c in clouds]),
            ages=cat([c.ages for c in clouds]),
        )

    def normalize_rotations(self) -> None:
        norm = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        self.rotations /= norm

    def validate(self) -> None:
        n = len(self)
        for name, arr in self.param_groups().items():
            if len(arr) != n:
                raise ContractError(f"{name} has {len(arr)} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} contains non-finite values")
        if len(self.ages) != n:
            raise ContractError("ages length mismatch")
        if n and not np.all(np.isfinite(self.scales)):
            raise InvalidParameterError("scales overflow")
        qn = np.linalg.norm(self.rotations, axis=1)
        if n and np.any(np.abs(qn - 1.0) > 1e-6):
            raise InvalidParameterError("rotations are not unit quaternions")


# --------------------------------------------------------------------------
# Camera
# --------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera; ``R``/``t`` map world points into camera space.

    Camera space follows the usual SfM convention: +z forward, +y down.
    """

    image_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    image_path: Optional[str] = None
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("camera dimensions must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6, rtol=0):
            raise InvalidParameterError("camera rotation is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, image_id, eye, target, width, height, fov_deg=60.0,
                up=(0.0, 0.0, 1.0), **kw) -> "Camera":
        """Camera at ``eye`` looking at ``target`` with world ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(image_id, width, height, f, f, width / 2, height / 2,
                   R, -R @ eye, **kw)


# --------------------------------------------------------------------------
# Covariance math
# --------------------------------------------------------------------------


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for ``(..., 4)`` unit quaternions in w, x, y, z order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back onto ``q``."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = np.empty(q.shape)
    d = dR
    g[..., 0] = 2 * (-z * d[..., 0, 1] + y * d[..., 0, 2] + z * d[..., 1, 0]
                     - x * d[..., 1, 2] - y * d[..., 2, 0] + x * d[..., 2, 1])
    g[..., 1] = 2 * (y * d[..., 0, 1] + z * d[..., 0, 2] + y * d[..., 1, 0]
                     - 2 * x * d[..., 1, 1] - w * d[..., 1, 2] + z * d[..., 2, 0]
                     + w * d[..., 2, 1] - 2 * x * d[..., 2, 2])
    g[..., 2] = 2 * (-2 * y * d[..., 0, 0] + x * d[..., 0, 1] + w * d[..., 0, 2]
                     + x * d[..., 1, 0] + z * d[..., 1, 2] - w * d[..., 2, 0]
                     + z * d[..., 2, 1] - 2 * y * d[..., 2, 2])
    g[..., 3] = 2 * (-2 * z * d[..., 0, 0] - w * d[..., 0, 1] + x * d[..., 0, 2]
                     + w * d[..., 1, 0] - 2 * z * d[..., 1, 1] + y * d[..., 1, 2]
                     + x * d[..., 2, 0] + y * d[..., 2, 1])
    return g


def _normalize_quats(q):
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm, norm


def covariance_3d(log_scale, rotation) -> np.ndarray:
    """World-space covariance ``R S S^T R^T`` for one or many Gaussians.

    ``log_scale`` has shape ``(3,)`` or ``(N, 3)``; ``rotation`` the matching
    ``(4,)`` or ``(N, 4)`` quaternion. Quaternions are normalized before use.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("covariance_3d received non-finite input")
    qn, norm = _normalize_quats(rotation)
    if np.any(norm == 0):
        raise InvalidParameterError("zero-length quaternion")
    s = np.exp(log_scale)
    if not np.all(np.isfinite(s)):
        raise InvalidParameterError("scale overflow")
    M = quat_to_rotmat(qn) * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_3d_vjp(log_scale, rotation, dcov):
    """Gradients of ``covariance_3d`` w.r.t. log-scales and raw quaternions.

    ``dcov`` is the upstream gradient, assumed symmetric.
    """
    qn, norm = _normalize_quats(rotation)
    s = np.exp(log_scale)
    R = quat_to_rotmat(qn)
    M = R * s[..., None, :]
    dM = 2.0 * dcov @ M
    ds = np.einsum("...ij,...ij->...j", dM, R)
    dR = dM * s[..., None, :]
    dqn = rotmat_vjp(qn, dR)
    dq = (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm
    return ds * s, dq


# --------------------------------------------------------------------------
# Projection
# --------------------------------------------------------------------------


@dataclass
class RenderSettings:
    """Constants shared by projection and compositing."""

    dilation: float = 0.3        # px^2 added to the projected covariance diagonal
    filter_3d: float = 0.05      # world-space std floor, in multiples of depth/focal
    near: float = 0.01
    tile_size: int = 16
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    background: tuple = (0.0, 0.0, 0.0)


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one camera."""

    visible: np.ndarray     # bool (N,)
    means2d: np.ndarray     # (N, 2) pixel coordinates
    cov2d: np.ndarray       # (N, 2, 2)
    conics: np.ndarray      # (N, 3) inverse covariance entries a, b, c
    depths: np.ndarray      # (N,)
    radii: np.ndarray       # (N,) 3-sigma radius along the major axis
    extents: np.ndarray     # (N, 2) 3-sigma half extents along x and y
    colors: np.ndarray      # (N, 3) view-dependent colors
    alphas: np.ndarray      # (N,) activated opacities
    p_cam: np.ndarray       # (N, 3)
    cov_cam: np.ndarray     # (N, 3, 3)


def eval_colors(cloud: GaussianCloud, cam_pos: np.ndarray) -> np.ndarray:
    if cloud.sh1 is None:
        return cloud.colors.copy()
    d = cloud.positions - cam_pos
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    basis = SH_C1 * np.stack([-d[:, 1], d[:, 2], -d[:, 0]], axis=1)
    return cloud.colors + np.einsum("nck,nk->nc", cloud.sh1, basis)


def _clamped_ratios(camera: Camera, x, y, z):
    """x/z and y/z clamped to a margin around the frustum.

    Keeps the projection Jacobian bounded for points far off to the side of
    the image at small depth. Returns the ratios and the unclamped masks.
    """
    mx, my = 0.15 * camera.width, 0.15 * camera.height
    ux, uy = x / z, y / z
    cx = np.clip(ux, -(camera.cx + mx) / camera.fx, (camera.width - camera.cx + mx) / camera.fx)
    cy = np.clip(uy, -(camera.cy + my) / camera.fy, (camera.height - camera.cy + my) / camera.fy)
    return cx, cy, cx == ux, cy == uy


def project_cloud(cloud: GaussianCloud, camera: Camera,
                  settings: Optional[RenderSettings] = None) -> Projection:
    """Vectorized EWA projection of every Gaussian into ``camera``."""
    st = settings or RenderSettings()
    n = len(cloud)
    p_cam = cloud.positions @ camera.R.T + camera.t
    z = p_cam[:, 2]
    visible = z > st.near
    zs = np.where(visible, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]

    cov3 = covariance_3d(cloud.log_scales, cloud.rotations) if n else np.zeros((0, 3, 3))
    cov_cam = camera.R @ cov3 @ camera.R.T
    if st.filter_3d > 0:
        f = 0.5 * (camera.fx + camera.fy)
        floor = (st.filter_3d * zs / f) ** 2
        cov_cam = cov_cam + floor[:, None, None] * np.eye(3)

    ux, uy, _, _ = _clamped_ratios(camera, x, y, zs)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * ux / zs
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * uy / zs
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += st.dilation
    cov2d[:, 1, 1] += st.dilation

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ok = det > 0
    visible &= ok
    det = np.where(ok, det, 1.0)
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
    radii = 3.0 * np.sqrt(np.maximum(lam, 0.0))
    extents = 3.0 * np.sqrt(np.maximum(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], 1), 0.0))

    means2d = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    radii = np.where(visible, radii, 0.0)
    return Projection(visible, means2d, cov2d, conics, z, radii, extents,
                      eval_colors(cloud, camera.position), cloud.alphas, p_cam, cov_cam)


def project_gaussian(index: int, cloud: GaussianCloud, camera: Camera,
                     settings: Optional[RenderSettings] = None):
    """Project a single Gaussian; returns ``None`` when it is culled."""
    proj = project_cloud(cloud.subset([index]), camera, settings)
    if not proj.visible[0]:
        return None
    return {"mean2d": proj.means2d[0], "cov2d": proj.cov2d[0], "depth": float(proj.depths[0])}


def project_backward(cloud: GaussianCloud, camera: Camera, proj: Projection,
                     d_means2d, d_conics, d_colors, d_alphas,
                     settings: Optional[RenderSettings] = None) -> dict:
    """Chain screen-space gradients back to the cloud's parameter groups."""
    st = settings or RenderSettings()
    vis = proj.visible
    z = np.where(vis, proj.p_cam[:, 2], 1.0)
    x, y = proj.p_cam[:, 0], proj.p_cam[:, 1]
    fx, fy = camera.fx, camera.fy
    d_means2d = np.where(vis[:, None], d_means2d, 0.0)
    d_conics = np.where(vis[:, None], d_conics, 0.0)

    # conic -> cov2d:  dL/dS = -M G M with G symmetric
    a, b, c = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    M = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    G = np.stack([np.stack([d_conics[:, 0], 0.5 * d_conics[:, 1]], -1),
                  np.stack([0.5 * d_conics[:, 1], d_conics[:, 2]], -1)], -2)
    d_cov2d = -M @ G @ M

    ux, uy, inx, iny = _clamped_ratios(camera, x, y, z)
    J = np.zeros((len(cloud), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * ux / z
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * uy / z
    Jt = np.swapaxes(J, 1, 2)
    d_cov_cam = Jt @ d_cov2d @ J
    dJ = 2.0 * d_cov2d @ J @ proj.cov_cam

    dp = np.zeros((len(cloud), 3))
    # J[0, 2] = -fx * ux / z; a clamped ratio no longer follows x but scales with z
    dp[:, 0] = d_means2d[:, 0] * fx / z - np.where(inx, dJ[:, 0, 2] * fx / z**2, 0.0)
    dp[:, 1] = d_means2d[:, 1] * fy / z - np.where(iny, dJ[:, 1, 2] * fy / z**2, 0.0)
    dp[:, 2] = (-d_means2d[:, 0] * fx * x / z**2 - d_means2d[:, 1] * fy * y / z**2
                - dJ[:, 0, 0] * fx / z**2 - dJ[:, 1, 1] * fy / z**2
                + dJ[:, 0, 2] * fx * ux / z**2 * np.where(inx, 2.0, 1.0)
                + dJ[:, 1, 2] * fy * uy / z**2 * np.where(iny, 2.0, 1.0))
    if st.filter_3d > 0:
        f = 0.5 * (fx + fy)
        trace = np.trace(d_cov_cam, axis1=1, axis2=2)
        dp[:, 2] += trace * 2.0 * st.filter_3d**2 * z / f**2

    d_cov3 = camera.R.T @ d_cov_cam @ camera.R
    d_cov3 = np.where(vis[:, None, None], d_cov3, 0.0)
    if len(cloud):
        d_log_scales, d_rot = covariance_3d_vjp(cloud.log_scales, cloud.rotations, d_cov3)
    else:
        d_log_scales, d_rot = np.zeros((0, 3)), np.zeros((0, 4))
    dp = np.where(vis[:, None], dp, 0.0)
    d_pos = dp @ camera.R

    d_colors = np.where(vis[:, None], d_colors, 0.0)
    d_alphas = np.where(vis, d_alphas, 0.0)
    o = proj.alphas
    grads = {
        "positions": d_pos,
        "log_scales": d_log_scales,
        "rotations": d_rot,
        "opacities": d_alphas * o * (1.0 - o),
        "colors": d_colors.copy(),
    }
    if cloud.sh1 is not None:
        rel = cloud.positions - camera.position
        norm = np.linalg.norm(rel, axis=1, keepdims=True)
        dvec = rel / norm
        basis = SH_C1 * np.stack([-dvec[:, 1], dvec[:, 2], -dvec[:, 0]], axis=1)
        grads["sh1"] = d_colors[:, :, None] * basis[:, None, :]
        # color depends on the view direction too
        d_basis = np.einsum("nc,nck->nk", d_colors, cloud.sh1) * SH_C1
        d_dir = np.stack([-d_basis[:, 2], -d_basis[:, 0], d_basis[:, 1]], axis=1)
        d_rel = (d_dir - dvec * np.sum(dvec * d_dir, axis=1, keepdims=True)) / norm
        grads["positions"] = grads["positions"] + np.where(vis[:, None], d_rel, 0.0)
    return grads
