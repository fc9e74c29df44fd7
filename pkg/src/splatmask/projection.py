"""Pinhole camera model and 3D-Gaussian -> 2D-splat projection.

Standard splatting math: the world covariance is pushed through the camera
rotation and the first-order perspective Jacobian, floored for anti-aliasing,
and inverted into a conic for per-pixel alpha evaluation.  The backward half
chains screen-space gradients (mean2d, conic, view color) back to world
parameters (position, log scale, rotation quaternion, color coefficients).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InternalError, ParameterError
from .model import Scene, quat_to_rotmat

# Anti-aliasing floor added to both diagonal entries of the projected
# covariance before inversion, in px^2.
COV2D_FLOOR = 0.3
# Per-pixel alpha is clamped here so transmittance never reaches exactly 0.
ALPHA_CLAMP = 0.999
# Fragments below this alpha are treated as zero contribution.
ALPHA_SKIP = 1.0 / 255.0
# chi^2(2dof) 99% quantile: -2*ln(0.01). Extent used for frustum culling.
CULL_Q99 = 9.21034037197618

SH_C1 = 0.4886025119029199


@dataclass
class Camera:
    """Pinhole camera; world_to_cam maps world points into camera coordinates
    (x right, y down, z forward, pixels at integer centers)."""

    world_to_cam: np.ndarray  # (4,4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        if self.world_to_cam.shape != (4, 4):
            raise ParameterError("world_to_cam must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ParameterError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ParameterError("image dimensions must be >= 1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @staticmethod
    def look_at(eye, target, up=(0.0, 0.0, 1.0), *, fx, fy, cx, cy,
                width, height, near=0.1, far=100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        return Camera(w2c, fx=fx, fy=fy, cx=cx, cy=cy, width=width,
                      height=height, near=near, far=far)


@dataclass
class Splat2D:
    """Screen-space footprint of one Gaussian."""

    mean2d: np.ndarray       # (2,) pixel coordinates
    conic: np.ndarray        # (3,) = (a,b,c), inverse 2x2 covariance, upper packing
    depth: float             # camera-space z
    gaussian_id: int
    base_opacity: float
    view_color: np.ndarray   # (3,)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, shape (...,3) -> (...,B).

    Band 0 is the identity so degree-0 coefficients are plain RGB.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    ones = np.ones(dirs.shape[:-1] + (1,))
    if degree == 0:
        return ones
    if degree == 1:
        x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
        return np.concatenate([ones, -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=-1)
    raise ParameterError(f"unsupported sh degree {degree}")


def eval_alpha(s: Splat2D, x) -> float:
    """alpha(x) = base_opacity * exp(-0.5 d^T Conic d), clamped to [0, 0.999]."""
    d = np.asarray(x, dtype=np.float64) - s.mean2d
    a, b, c = s.conic
    q = a * d[0] ** 2 + 2.0 * b * d[0] * d[1] + c * d[1] ** 2
    return float(min(s.base_opacity * np.exp(-0.5 * q), ALPHA_CLAMP))


@dataclass
class ProjectedSplats:
    """Vectorized Splat2D set for one camera, plus everything backward needs."""

    rows: np.ndarray        # (S,) scene row of each splat
    mean2d: np.ndarray      # (S,2)
    depth: np.ndarray       # (S,)
    conic: np.ndarray       # (S,3)
    opacity: np.ndarray     # (S,)
    view_color: np.ndarray  # (S,3)
    radius: np.ndarray      # (S,2) axis-aligned extents of the alpha>=skip ellipse, px
    # backward cache
    p_cam: np.ndarray       # (S,3)
    cov3d: np.ndarray       # (S,3,3)
    M: np.ndarray           # (S,2,3) = J @ R
    basis: np.ndarray       # (S,B) SH basis at each splat's viewing direction
    color_raw: np.ndarray   # (S,3) view color before the >=0 clamp
    cam: Camera = None

    def __len__(self) -> int:
        return self.rows.shape[0]


def _alpha_extent_q(opacity: np.ndarray, alpha_floor: float) -> np.ndarray:
    """Mahalanobis bound q such that alpha < alpha_floor outside q(d) <= bound."""
    floor = max(alpha_floor, 1e-12)
    return 2.0 * np.log(np.maximum(opacity / floor, 1e-300))


def project_scene(scene: Scene, cam: Camera, dtype=np.float64,
                  alpha_skip: float = ALPHA_SKIP) -> ProjectedSplats:
    """Project every Gaussian, frustum-culling the ones that cannot contribute.

    A splat is kept when its center depth lies in [near, far] and the larger of
    the 99%-extent ellipse and the alpha>=skip ellipse intersects the image
    rectangle, so no fragment above the skip threshold is ever lost.
    """
    R = cam.rotation
    p_cam = scene.positions @ R.T + cam.translation
    z = p_cam[:, 2]
    in_depth = (z >= cam.near) & (z <= cam.far)

    opac = scene.opacities()
    keep = in_depth & (opac > max(alpha_skip, 1e-12))
    idx = np.flatnonzero(keep)
    pc = p_cam[idx]
    x, y, zz = pc[:, 0], pc[:, 1], pc[:, 2]

    mean2d = np.stack([cam.fx * x / zz + cam.cx, cam.fy * y / zz + cam.cy], axis=1)

    cov3d = scene.covariances()[idx]
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx / zz
    J[:, 0, 2] = -cam.fx * x / zz ** 2
    J[:, 1, 1] = cam.fy / zz
    J[:, 1, 2] = -cam.fy * y / zz ** 2
    M = J @ R
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        raise InternalError("projected covariance singular after flooring")
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    # tight axis-aligned extents of the ellipse q(d) <= q0: |dx| <= sqrt(q0*a)
    q_alpha = np.maximum(_alpha_extent_q(opac[idx], alpha_skip), 0.0)
    radius = np.stack([np.sqrt(q_alpha * a), np.sqrt(q_alpha * c)], axis=1)
    q_cull = np.maximum(q_alpha, CULL_Q99)
    cull_x = np.sqrt(q_cull * a)
    cull_y = np.sqrt(q_cull * c)

    on_image = (
        (mean2d[:, 0] + cull_x >= 0.0)
        & (mean2d[:, 0] - cull_x <= cam.width - 1.0)
        & (mean2d[:, 1] + cull_y >= 0.0)
        & (mean2d[:, 1] - cull_y <= cam.height - 1.0)
    )
    sel = np.flatnonzero(on_image)
    idx = idx[sel]

    dirs = scene.positions[idx] - cam.center
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = dirs / np.maximum(norms, 1e-12)
    basis = sh_basis(dirs, scene.sh_degree)
    color_raw = np.einsum("sb,sbc->sc", basis, scene.color_coeffs[idx])
    view_color = np.maximum(color_raw, 0.0)

    return ProjectedSplats(
        rows=idx.astype(np.int32),
        mean2d=mean2d[sel].astype(dtype),
        depth=zz[sel].astype(dtype),
        conic=conic[sel].astype(dtype),
        opacity=opac[idx].astype(dtype),
        view_color=view_color.astype(dtype),
        radius=radius[sel].astype(np.float64),
        p_cam=pc[sel],
        cov3d=cov3d[sel],
        M=M[sel],
        basis=basis,
        color_raw=color_raw,
        cam=cam,
    )


def project_gaussian(g, cam: Camera, sh_degree: int = 0,
                     alpha_skip: float = ALPHA_SKIP):
    """Project one activated Gaussian; returns a Splat2D or None when culled."""
    R = cam.rotation
    pc = R @ g.position + cam.translation
    x, y, z = pc
    if not (cam.near <= z <= cam.far):
        return None
    if g.opacity <= max(alpha_skip, 1e-12):
        return None
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    J = np.array([
        [cam.fx / z, 0.0, -cam.fx * x / z ** 2],
        [0.0, cam.fy / z, -cam.fy * y / z ** 2],
    ])
    M = J @ R
    cov2d = M @ g.covariance @ M.T + COV2D_FLOOR * np.eye(2)
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    det = a * c - b * b
    if det <= 0:
        raise InternalError("projected covariance singular after flooring")
    conic = np.array([c / det, -b / det, a / det])
    q_cull = max(float(_alpha_extent_q(np.asarray(g.opacity), alpha_skip)), CULL_Q99)
    cull_x = np.sqrt(q_cull * a)
    cull_y = np.sqrt(q_cull * c)
    if (mean2d[0] + cull_x < 0.0 or mean2d[0] - cull_x > cam.width - 1.0
            or mean2d[1] + cull_y < 0.0 or mean2d[1] - cull_y > cam.height - 1.0):
        return None
    direction = g.position - cam.center
    norm = np.linalg.norm(direction)
    basis = sh_basis(direction / max(norm, 1e-12), sh_degree)
    view_color = np.maximum(basis @ g.color_coeffs[: basis.shape[0]], 0.0)
    return Splat2D(mean2d=mean2d, conic=conic, depth=float(z), gaussian_id=g.uid,
                   base_opacity=float(g.opacity), view_color=view_color)


def _conic_grad_to_cov2d(conic: np.ndarray, d_conic: np.ndarray) -> np.ndarray:
    """Gradient wrt the packed conic -> gradient wrt the floored 2x2 covariance.

    Uses d(S^-1) = -S^-1 dS S^-1 with the packed (a,b,c) convention where b is
    the single off-diagonal parameter.
    """
    C = np.empty(conic.shape[:-1] + (2, 2))
    C[..., 0, 0] = conic[..., 0]
    C[..., 0, 1] = conic[..., 1]
    C[..., 1, 0] = conic[..., 1]
    C[..., 1, 1] = conic[..., 2]
    G = np.empty_like(C)
    G[..., 0, 0] = d_conic[..., 0]
    G[..., 0, 1] = 0.5 * d_conic[..., 1]
    G[..., 1, 0] = 0.5 * d_conic[..., 1]
    G[..., 1, 1] = d_conic[..., 2]
    return -C @ G @ C


def _rotmat_quat_jacobian(q_unit: np.ndarray):
    """dR/dq for unit quaternions, shape (S,4) -> (S,4,3,3)."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    zero = np.zeros_like(w)
    out = np.empty((q_unit.shape[0], 4, 3, 3))
    out[:, 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1)], axis=1)
    out[:, 1] = 2.0 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=1)
    out[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=1)
    out[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1)], axis=1)
    return out


def project_backward(splats: ProjectedSplats, scene: Scene,
                     d_mean2d: np.ndarray, d_conic: np.ndarray,
                     d_view_color: np.ndarray):
    """Chain screen-space gradients back to world parameters.

    Returns per-splat gradients (aligned with splats.rows) for position,
    log_scale, rotation quaternion and color coefficients, including the
    viewing direction's dependence on position for direction-dependent bands.
    """
    cam = splats.cam
    R = cam.rotation
    S = len(splats)
    d_mean2d = np.asarray(d_mean2d, dtype=np.float64)
    d_conic = np.asarray(d_conic, dtype=np.float64)
    d_view_color = np.asarray(d_view_color, dtype=np.float64)

    x, y, z = splats.p_cam[:, 0], splats.p_cam[:, 1], splats.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy

    # mean2d -> camera-space point
    d_pcam = np.zeros((S, 3))
    d_pcam[:, 0] = d_mean2d[:, 0] * fx / z
    d_pcam[:, 1] = d_mean2d[:, 1] * fy / z
    d_pcam[:, 2] = -(d_mean2d[:, 0] * fx * x + d_mean2d[:, 1] * fy * y) / z ** 2

    # conic -> floored cov2d -> (M, Sigma3)
    G2 = _conic_grad_to_cov2d(np.asarray(splats.conic, dtype=np.float64), d_conic)
    dSigma3 = np.swapaxes(splats.M, 1, 2) @ G2 @ splats.M
    dM = 2.0 * G2 @ splats.M @ splats.cov3d

    # M = J R: gradient into J, then into the camera-space point through J's entries
    dJ = dM @ R.T
    d_pcam[:, 0] += dJ[:, 0, 2] * (-fx / z ** 2)
    d_pcam[:, 1] += dJ[:, 1, 2] * (-fy / z ** 2)
    d_pcam[:, 2] += (
        dJ[:, 0, 0] * (-fx / z ** 2)
        + dJ[:, 0, 2] * (2 * fx * x / z ** 3)
        + dJ[:, 1, 1] * (-fy / z ** 2)
        + dJ[:, 1, 2] * (2 * fy * y / z ** 3)
    )

    d_position = d_pcam @ R

    # Sigma3 = A A^T with A = R(q) diag(exp(log_scale))
    rows = splats.rows
    q = scene.rotations[rows]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    q_unit = q / qn
    Rq = quat_to_rotmat(q)
    s = np.exp(scene.log_scales[rows])
    A = Rq * s[:, None, :]
    dA = 2.0 * dSigma3 @ A
    d_log_scale = np.einsum("sij,sij->sj", dA, Rq) * s
    dRq = dA * s[:, None, :]
    dRdq = _rotmat_quat_jacobian(q_unit)
    d_qunit = np.einsum("skij,sij->sk", dRdq, dRq)
    # through the normalization q_unit = q / |q|
    d_rotation = (d_qunit - np.sum(d_qunit * q_unit, axis=1, keepdims=True) * q_unit) / qn

    # view color: clamp at zero, then distribute over SH basis
    active = (splats.color_raw > 0.0).astype(np.float64)
    dc = d_view_color * active
    d_color_coeffs = splats.basis[:, :, None] * dc[:, None, :]

    if scene.sh_degree >= 1:
        # direction-dependent bands feed back into position through
        # dir = (p - cam_center) / |p - cam_center|
        coeffs = scene.color_coeffs[rows]
        dL_dbasis = np.einsum("sbc,sc->sb", coeffs, dc)
        dL_ddir = np.stack([
            -SH_C1 * dL_dbasis[:, 3],
            -SH_C1 * dL_dbasis[:, 1],
            SH_C1 * dL_dbasis[:, 2],
        ], axis=1)
        v = scene.positions[rows] - cam.center
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        u = v / np.maximum(norm, 1e-12)
        d_position = d_position + (dL_ddir - np.sum(dL_ddir * u, axis=1,
                                                    keepdims=True) * u) / norm

    return {
        "position": d_position,
        "log_scale": d_log_scale,
        "rotation": d_rotation,
        "color_coeffs": d_color_coeffs,
    }


def write_cameras(cameras, path):
    """One camera per line: 12 extrinsics, fx fy cx cy, width height, near far."""
    with open(path, "w") as f:
        f.write("# rows of world_to_cam[0:3,0:4], fx fy cx cy, width height, near far\n")
        for cam in cameras:
            ext = cam.world_to_cam[:3, :4].ravel()
            vals = list(ext) + [cam.fx, cam.fy, cam.cx, cam.cy,
                                cam.width, cam.height, cam.near, cam.far]
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_cameras(path):
    table = np.loadtxt(path, comments="#", ndmin=2)
    cameras = []
    for row in table:
        w2c = np.eye(4)
        w2c[:3, :4] = row[:12].reshape(3, 4)
        cameras.append(Camera(
            w2c, fx=row[12], fy=row[13], cx=row[14], cy=row[15],
            width=int(row[16]), height=int(row[17]), near=row[18], far=row[19],
        ))
    return cameras
