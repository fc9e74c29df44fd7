"""Scene representation: Gaussian primitives, parameter activations, stochastic masks.

Parameters are stored pre-activation (log scales, logits) so the optimizer can
work on unconstrained values; `activate` applies the standard splatting
parameterization.  Each Gaussian additionally carries a mask logit: the
sigmoid of that logit is its probability of existence, and a per-step binary
sample of it gates the Gaussian in and out of compositing without touching any
other parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ParameterError

# Logits are clamped to this magnitude before any sigmoid so probabilities and
# their derivatives stay finite.
LOGIT_CLAMP = 20.0

SCENE_FORMAT_VERSION = 1
SCENE_MAGIC = "splatmask-scene"


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w,x,y,z) to rotation matrix(es), shape (...,4) -> (...,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
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


def covariance_from(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(exp(log_scale))^2 R^T, vectorized over leading axes."""
    R = quat_to_rotmat(rotation)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    A = R * s[..., None, :]
    return A @ np.swapaxes(A, -1, -2)


@dataclass
class Gaussian3D:
    """One splat primitive; all fields pre-activation."""

    position: np.ndarray        # (3,) world units
    log_scale: np.ndarray       # (3,) log of per-axis stddev
    rotation: np.ndarray        # (4,) unit quaternion (w,x,y,z)
    opacity_logit: float
    color_coeffs: np.ndarray    # (B,3) SH coefficients; B=1 means a plain RGB triple
    mask_logit: float
    uid: int = -1

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.color_coeffs = np.atleast_2d(np.asarray(self.color_coeffs, dtype=np.float64))


@dataclass
class ActivatedGaussian:
    """Gaussian with activations applied: opacity in (0,1), explicit 3x3 covariance."""

    position: np.ndarray
    covariance: np.ndarray      # (3,3) symmetric positive definite
    opacity: float
    color_coeffs: np.ndarray
    mask_prob: float
    uid: int = -1


def activate(g: Gaussian3D) -> ActivatedGaussian:
    """Apply activations to one Gaussian. Raises ParameterError on non-finite fields."""
    fields = np.concatenate([
        g.position.ravel(), g.log_scale.ravel(), g.rotation.ravel(),
        [g.opacity_logit], g.color_coeffs.ravel(), [g.mask_logit],
    ])
    if not np.all(np.isfinite(fields)):
        raise ParameterError(f"gaussian {g.uid}: non-finite parameter")
    cov = covariance_from(g.log_scale, g.rotation)
    return ActivatedGaussian(
        position=g.position.copy(),
        covariance=cov,
        opacity=float(expit(np.clip(g.opacity_logit, -LOGIT_CLAMP, LOGIT_CLAMP))),
        color_coeffs=g.color_coeffs.copy(),
        mask_prob=float(expit(np.clip(g.mask_logit, -LOGIT_CLAMP, LOGIT_CLAMP))),
        uid=g.uid,
    )


@dataclass
class MaskSample:
    """One straight-through mask draw.

    `hard` (0 or 1) is what the forward pass composites with; gradients are
    routed through `soft`, the Gumbel-sigmoid relaxation, via
    d(hard)/d(logit) := d(soft)/d(logit) = soft*(1-soft)/temperature.
    """

    hard: float
    soft: float
    dsoft_dlogit: float


@dataclass
class MaskSamples:
    """Vectorized MaskSample over a whole scene."""

    hard: np.ndarray
    soft: np.ndarray
    dsoft_dlogit: np.ndarray


def sample_masks(mask_logits: np.ndarray, temperature: float,
                 rng: np.random.Generator) -> MaskSamples:
    """Gumbel-sigmoid straight-through sampling for an array of logits."""
    if temperature <= 0:
        raise ParameterError("temperature must be > 0")
    logits = np.clip(np.asarray(mask_logits, dtype=np.float64), -LOGIT_CLAMP, LOGIT_CLAMP)
    g0 = rng.gumbel(size=logits.shape)
    g1 = rng.gumbel(size=logits.shape)
    soft = expit((logits + g1 - g0) / temperature)
    hard = (soft >= 0.5).astype(np.float64)
    return MaskSamples(hard=hard, soft=soft, dsoft_dlogit=soft * (1.0 - soft) / temperature)


def sample_mask(mask_logit: float, temperature: float, rng: np.random.Generator) -> MaskSample:
    s = sample_masks(np.asarray([mask_logit]), temperature, rng)
    return MaskSample(hard=float(s.hard[0]), soft=float(s.soft[0]),
                      dsoft_dlogit=float(s.dsoft_dlogit[0]))


@dataclass
class Scene:
    """Ordered Gaussian collection, stored struct-of-arrays for vectorized work.

    `uids` give every Gaussian a stable integer identity across densify/prune
    events; row order is only stable between those events.
    """

    positions: np.ndarray       # (N,3)
    log_scales: np.ndarray      # (N,3)
    rotations: np.ndarray       # (N,4)
    opacity_logits: np.ndarray  # (N,)
    color_coeffs: np.ndarray    # (N,B,3)
    mask_logits: np.ndarray     # (N,)
    uids: np.ndarray            # (N,) int64
    sh_degree: int = 0
    next_uid: int = 0

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_color_basis(self) -> int:
        return self.color_coeffs.shape[1]

    @staticmethod
    def empty(sh_degree: int = 0) -> "Scene":
        b = (sh_degree + 1) ** 2
        return Scene(
            positions=np.zeros((0, 3)), log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)), opacity_logits=np.zeros(0),
            color_coeffs=np.zeros((0, b, 3)), mask_logits=np.zeros(0),
            uids=np.zeros(0, dtype=np.int64), sh_degree=sh_degree, next_uid=0,
        )

    @staticmethod
    def from_gaussians(gaussians, sh_degree: int = 0) -> "Scene":
        scene = Scene.empty(sh_degree)
        for g in gaussians:
            scene.add(g)
        return scene

    def add(self, g: Gaussian3D) -> int:
        """Append one Gaussian; returns the uid assigned to it."""
        uid = self.next_uid
        b = self.num_color_basis
        coeffs = np.zeros((b, 3))
        coeffs[: g.color_coeffs.shape[0]] = g.color_coeffs[:b]
        self.positions = np.vstack([self.positions, g.position[None]])
        self.log_scales = np.vstack([self.log_scales, g.log_scale[None]])
        self.rotations = np.vstack([self.rotations, g.rotation[None]])
        self.opacity_logits = np.append(self.opacity_logits, g.opacity_logit)
        self.color_coeffs = np.concatenate([self.color_coeffs, coeffs[None]], axis=0)
        self.mask_logits = np.append(self.mask_logits, g.mask_logit)
        self.uids = np.append(self.uids, uid)
        self.next_uid = uid + 1
        return uid

    def gaussian(self, row: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[row].copy(),
            log_scale=self.log_scales[row].copy(),
            rotation=self.rotations[row].copy(),
            opacity_logit=float(self.opacity_logits[row]),
            color_coeffs=self.color_coeffs[row].copy(),
            mask_logit=float(self.mask_logits[row]),
            uid=int(self.uids[row]),
        )

    def copy(self) -> "Scene":
        return Scene(
            positions=self.positions.copy(), log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(), opacity_logits=self.opacity_logits.copy(),
            color_coeffs=self.color_coeffs.copy(), mask_logits=self.mask_logits.copy(),
            uids=self.uids.copy(), sh_degree=self.sh_degree, next_uid=self.next_uid,
        )

    def select(self, rows) -> "Scene":
        """Scene restricted to the given rows (uids preserved)."""
        return Scene(
            positions=self.positions[rows], log_scales=self.log_scales[rows],
            rotations=self.rotations[rows], opacity_logits=self.opacity_logits[rows],
            color_coeffs=self.color_coeffs[rows], mask_logits=self.mask_logits[rows],
            uids=self.uids[rows], sh_degree=self.sh_degree, next_uid=self.next_uid,
        )

    def append_arrays(self, positions, log_scales, rotations, opacity_logits,
                      color_coeffs, mask_logits) -> np.ndarray:
        """Append a block of Gaussians; returns the uids assigned to the block."""
        n = positions.shape[0]
        uids = np.arange(self.next_uid, self.next_uid + n, dtype=np.int64)
        self.positions = np.concatenate([self.positions, positions], axis=0)
        self.log_scales = np.concatenate([self.log_scales, log_scales], axis=0)
        self.rotations = np.concatenate([self.rotations, rotations], axis=0)
        self.opacity_logits = np.concatenate([self.opacity_logits, opacity_logits])
        self.color_coeffs = np.concatenate([self.color_coeffs, color_coeffs], axis=0)
        self.mask_logits = np.concatenate([self.mask_logits, mask_logits])
        self.uids = np.concatenate([self.uids, uids])
        self.next_uid += n
        return uids

    def opacities(self) -> np.ndarray:
        return expit(np.clip(self.opacity_logits, -LOGIT_CLAMP, LOGIT_CLAMP))

    def mask_probs(self) -> np.ndarray:
        return expit(np.clip(self.mask_logits, -LOGIT_CLAMP, LOGIT_CLAMP))

    def covariances(self) -> np.ndarray:
        return covariance_from(self.log_scales, self.rotations)

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations = self.rotations / norms


def _record_width(num_basis: int) -> int:
    # position 3, log_scale 3, rotation 4, opacity_logit 1, coeffs 3B, mask_logit 1
    return 12 + 3 * num_basis


def _scene_matrix(scene: Scene) -> np.ndarray:
    n = len(scene)
    rec = np.empty((n, _record_width(scene.num_color_basis)), dtype=np.float32)
    rec[:, 0:3] = scene.positions
    rec[:, 3:6] = scene.log_scales
    rec[:, 6:10] = scene.rotations
    rec[:, 10] = scene.opacity_logits
    rec[:, 11:-1] = scene.color_coeffs.reshape(n, -1)
    rec[:, -1] = scene.mask_logits
    return rec


def _scene_from_matrix(rec: np.ndarray, sh_degree: int) -> Scene:
    n = rec.shape[0]
    b = (sh_degree + 1) ** 2
    return Scene(
        positions=rec[:, 0:3].astype(np.float64),
        log_scales=rec[:, 3:6].astype(np.float64),
        rotations=rec[:, 6:10].astype(np.float64),
        opacity_logits=rec[:, 10].astype(np.float64),
        color_coeffs=rec[:, 11:-1].astype(np.float64).reshape(n, b, 3),
        mask_logits=rec[:, -1].astype(np.float64),
        uids=np.arange(n, dtype=np.int64),
        sh_degree=sh_degree, next_uid=n,
    )


def write_scene(scene: Scene, path, binary: bool = True):
    """Serialize a scene: text header plus per-Gaussian float32 records.

    Binary records are little-endian float32 in field order (position,
    log_scale, rotation, opacity_logit, color_coeffs, mask_logit); the text
    form writes the same numbers one Gaussian per line, for fixtures.
    """
    rec = _scene_matrix(scene)
    header = (
        f"{SCENE_MAGIC} {SCENE_FORMAT_VERSION}\n"
        f"count {len(scene)}\n"
        f"sh_degree {scene.sh_degree}\n"
        f"format {'binary' if binary else 'text'}\n"
        f"end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(rec.astype("<f4").tobytes())
        else:
            for row in rec:
                f.write((" ".join(f"{v:.9g}" for v in row) + "\n").encode("ascii"))


def read_scene(path) -> Scene:
    with open(path, "rb") as f:
        data = f.read()
    head, _, body = data.partition(b"end_header\n")
    meta = {}
    lines = head.decode("ascii").splitlines()
    magic, version = lines[0].rsplit(" ", 1)
    if magic != SCENE_MAGIC:
        raise ParameterError(f"not a scene file: bad magic {magic!r}")
    if int(version) != SCENE_FORMAT_VERSION:
        raise ParameterError(f"unsupported scene format version {version}")
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        meta[key] = value
    count = int(meta["count"])
    sh_degree = int(meta["sh_degree"])
    width = _record_width((sh_degree + 1) ** 2)
    if meta["format"] == "binary":
        rec = np.frombuffer(body, dtype="<f4", count=count * width).reshape(count, width)
    else:
        rec = np.loadtxt(body.decode("ascii").splitlines(), dtype=np.float32, ndmin=2)
        rec = rec.reshape(count, width)
    return _scene_from_matrix(rec, sh_degree)
