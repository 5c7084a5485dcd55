"""SE(3) poses, pinhole reprojection, and the synthetic planar-scene generator.

Scenes are textured planes under small rigid motions, so the frame-to-frame
pixel map is an exact homography. That gives bit-solid ground truth: the flow
field comes from the reprojection map, and the second frame is rendered by
inverse-warping a continuous texture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .tensor import bilinear_sample as _bilinear_np

EPS_Z = 1e-6
OUT_OF_BOUNDS = -1.0e4


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q)


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


class PoseSE3:
    """Rigid transform: p -> R p + t, rotation stored as a unit quaternion (w,x,y,z)."""

    def __init__(self, quat=None, trans=None):
        self.quat = _quat_normalize(np.asarray(quat, dtype=np.float64)) if quat is not None \
            else np.array([1.0, 0.0, 0.0, 0.0])
        self.trans = np.asarray(trans, dtype=np.float64).copy() if trans is not None \
            else np.zeros(3)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_axis_angle(cls, axis, angle: float, trans=None) -> "PoseSE3":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        quat = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        return cls(quat, trans)

    @classmethod
    def random(cls, rng: np.random.Generator, rot_scale: float, trans_scale: float) -> "PoseSE3":
        axis = rng.standard_normal(3)
        angle = rng.uniform(-rot_scale, rot_scale)
        trans = rng.uniform(-trans_scale, trans_scale, 3)
        return cls.from_axis_angle(axis, angle, trans)

    @property
    def rotation(self) -> np.ndarray:
        return _quat_rotmat(self.quat)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: (self . other)(p) = self(other(p))."""
        quat = _quat_normalize(_quat_mul(self.quat, other.quat))
        trans = self.rotation @ other.trans + self.trans
        return PoseSE3(quat, trans)

    def inverse(self) -> "PoseSE3":
        conj = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        R_inv = _quat_rotmat(conj)
        return PoseSE3(conj, -(R_inv @ self.trans))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.trans

    def scaled(self, factor: float) -> "PoseSE3":
        """Damped motion: scale the rotation angle and translation by factor."""
        w = np.clip(self.quat[0], -1.0, 1.0)
        angle = 2.0 * np.arccos(w)
        vec = self.quat[1:]
        norm = np.linalg.norm(vec)
        axis = vec / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        return PoseSE3.from_axis_angle(axis, angle * factor, self.trans * factor)

    def __repr__(self):
        return f"PoseSE3(quat={np.round(self.quat, 6)}, trans={np.round(self.trans, 6)})"


@dataclass
class Camera:
    """Pinhole intrinsics at feature-grid resolution."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def default(cls, H: int, W: int) -> "Camera":
        f = 0.8 * max(H, W)
        return cls(fx=f, fy=f, cx=(W - 1) / 2.0, cy=(H - 1) / 2.0)

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def grid_coords(H: int, W: int, dtype=np.float64) -> np.ndarray:
    """(H*W, 2) pixel coordinates (x, y), row-major over the grid."""
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(dtype)


def reproject(coords: np.ndarray, inv_depth: np.ndarray, pose: PoseSE3,
              cam: Camera, eps_z: float = EPS_Z):
    """Map pixel coords through unproject -> rigid motion -> project.

    coords: (N, 2) or (H, W, 2); inv_depth matching leading shape, strictly
    positive. Returns (mapped coords, valid mask); pixels whose transformed
    depth falls below eps_z are flagged invalid and parked far out of bounds.
    """
    pts = np.asarray(coords, dtype=np.float64)
    shape = pts.shape
    pts = pts.reshape(-1, 2)
    d = np.asarray(inv_depth, dtype=np.float64).reshape(-1)
    if np.any(d <= 0):
        raise ValueError("inverse depth must be strictly positive")
    if pose.quat[0] == 1.0 and not pose.trans.any():
        # zero motion maps every pixel to itself exactly (the float
        # unproject/project round trip would lose the last ulp)
        return pts.reshape(shape).copy(), np.ones(shape[:-1], dtype=bool)
    xn = (pts[:, 0] - cam.cx) / cam.fx
    yn = (pts[:, 1] - cam.cy) / cam.fy
    dirs = np.stack([xn, yn, np.ones_like(xn)], axis=1)
    points = dirs / d[:, None]
    moved = pose.apply(points)
    z = moved[:, 2]
    valid = z > eps_z
    z_safe = np.where(valid, z, 1.0)
    out = np.empty_like(pts)
    out[:, 0] = cam.fx * moved[:, 0] / z_safe + cam.cx
    out[:, 1] = cam.fy * moved[:, 1] / z_safe + cam.cy
    out[~valid] = OUT_OF_BOUNDS
    return out.reshape(shape), valid.reshape(shape[:-1])


def reproject_node(coords: np.ndarray, inv_depth: ad.Node, pose: PoseSE3, cam: Camera) -> ad.Node:
    """Tape version of reproject, differentiable w.r.t. inverse depth.

    Assumes all transformed depths stay positive (callers feed valid scenes;
    pose gradients are out of scope).
    """
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    xn = (pts[:, 0] - cam.cx) / cam.fx
    yn = (pts[:, 1] - cam.cy) / cam.fy
    dirs = np.stack([xn, yn, np.ones_like(xn)], axis=1)
    d = ad.reshape(inv_depth, (-1, 1))
    points = ad.div(ad.constant(dirs, dtype=d.value.dtype), d)
    R = pose.rotation
    t = pose.trans
    moved = ad.add(ad.matmul(points, ad.constant(R.T, dtype=d.value.dtype)),
                   ad.constant(t[None, :], dtype=d.value.dtype))
    x = ad.slice_axis(moved, 1, 0, 1)
    y = ad.slice_axis(moved, 1, 1, 2)
    z = ad.slice_axis(moved, 1, 2, 3)
    px = ad.add(ad.mul(ad.div(x, z), cam.fx), ad.constant(cam.cx, dtype=d.value.dtype))
    py = ad.add(ad.mul(ad.div(y, z), cam.fy), ad.constant(cam.cy, dtype=d.value.dtype))
    return ad.concat([px, py], axis=1)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    h: int = 48
    w: int = 64
    c: int = 32
    motion_min: float = 0.5
    motion_max: float = 2.5
    ambiguous_fraction: float = 0.25
    noise_sigma: float = 0.01
    texture_cells: float = 2.0
    max_retries: int = 12
    dtype: str = "f32"

    def numpy_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class SceneSample:
    f_i: np.ndarray          # (C, H, W) frame-i features
    f_j: np.ndarray          # (C, H, W) frame-j features
    inv_depth: np.ndarray    # (H, W) strictly positive
    pose: PoseSE3            # frame i -> frame j relative motion
    camera: Camera
    flow: np.ndarray         # (H, W, 2) ground-truth correspondence - grid
    valid: np.ndarray        # (H, W) bool
    ambiguous: np.ndarray    # (H, W) bool, deliberately smooth regions
    seed: int = 0


def _plane_inverse_depth(rng, H, W, cam):
    """Inverse depth linear in pixel coords, i.e. a 3D plane; returns (d, n_vec)."""
    base = rng.uniform(0.8, 1.2)
    gx = rng.uniform(-0.25, 0.25) / max(W, 1)
    gy = rng.uniform(-0.25, 0.25) / max(H, 1)
    xs = np.arange(W) - cam.cx
    ys = np.arange(H) - cam.cy
    d = base + gx * xs[None, :] + gy * ys[:, None]
    # tilt bounds keep d >= 0.55, so the plane never needs clipping (clipping
    # would break the exact flow/homography agreement)
    n = np.array([gx * cam.fx, gy * cam.fy, base])
    return d, n


def _homography(pose: PoseSE3, n: np.ndarray, cam: Camera) -> np.ndarray:
    K = cam.intrinsics()
    K_inv = np.linalg.inv(K)
    return K @ (pose.rotation + np.outer(pose.trans, n)) @ K_inv


def _apply_homography(Hm: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ones = np.ones((pts.shape[0], 1))
    proj = np.concatenate([pts, ones], axis=1) @ Hm.T
    return proj[:, :2] / proj[:, 2:3]


class _GridTexture:
    """Continuous per-channel texture: bilinear interpolation of a noise grid."""

    def __init__(self, rng, channels, H, W, cell):
        self.cell = cell
        gh = int(np.ceil(H / cell)) + 3
        gw = int(np.ceil(W / cell)) + 3
        self.grids = rng.standard_normal((channels, gh, gw))

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """pts: (N, 2) pixel coords -> (C, N) feature values."""
        u = (pts + 1.0) / self.cell  # +1 margin keeps small negative coords on-grid
        return np.stack([_bilinear_np(g, u) for g in self.grids])


def _ambiguity_rects(rng, H, W, fraction):
    """Random axis-aligned rectangles until the requested coverage is reached."""
    rects = []
    mask = np.zeros((H, W), dtype=bool)
    target = fraction * H * W
    for _ in range(64):
        if mask.sum() >= target or fraction <= 0:
            break
        rh = rng.integers(H // 6 + 1, max(H // 2, H // 6 + 2))
        rw = rng.integers(W // 6 + 1, max(W // 2, W // 6 + 2))
        y0 = int(rng.integers(0, H - rh + 1))
        x0 = int(rng.integers(0, W - rw + 1))
        rects.append((x0, y0, rw, rh))
        mask[y0:y0 + rh, x0:x0 + rw] = True
    return rects, mask


def _in_rects(pts: np.ndarray, rects) -> np.ndarray:
    inside = np.zeros(pts.shape[0], dtype=bool)
    for x0, y0, rw, rh in rects:
        inside |= ((pts[:, 0] >= x0 - 0.5) & (pts[:, 0] < x0 + rw - 0.5)
                   & (pts[:, 1] >= y0 - 0.5) & (pts[:, 1] < y0 + rh - 0.5))
    return inside


def generate_scene(cfg: SceneConfig, seed: int) -> SceneSample:
    """Deterministic synthetic scene with exact ground-truth flow.

    The two frames render the same continuous texture on a planar surface;
    ambiguous rectangles carry a per-channel constant plus per-frame iid noise
    so their correspondences are genuinely uninformative.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5CE17E)))
    H, W, C = cfg.h, cfg.w, cfg.c
    cam = Camera.default(H, W)
    coords = grid_coords(H, W)
    inv_depth, n_vec = _plane_inverse_depth(rng, H, W, cam)

    target = rng.uniform(cfg.motion_min, cfg.motion_max)
    if target <= 0.0:
        pose = PoseSE3.identity()
        mapped, valid = reproject(coords, inv_depth.ravel(), pose, cam)
    else:
        pose = PoseSE3.random(rng, rot_scale=0.02, trans_scale=0.05)
        mapped, valid = reproject(coords, inv_depth.ravel(), pose, cam)
        mag = float(np.max(np.linalg.norm((mapped - coords)[valid], axis=-1)))
        if mag > 1e-12:
            pose = pose.scaled(target / mag)
        retries = 0
        while True:
            mapped, valid = reproject(coords, inv_depth.ravel(), pose, cam)
            mag = float(np.max(np.linalg.norm(np.where(valid.reshape(-1, 1), mapped - coords, 0.0), axis=1)))
            if mag <= cfg.motion_max + 1e-9:
                break
            retries += 1
            if retries > cfg.max_retries:
                raise RuntimeError(f"motion damping failed after {cfg.max_retries} retries (|flow|={mag:.3f})")
            pose = pose.scaled(0.7)

    flow = (mapped - coords).reshape(H, W, 2)
    Hm = _homography(pose, n_vec, cam)
    Hm_inv = np.linalg.inv(Hm)

    texture = _GridTexture(rng, C, H, W, cfg.texture_cells)
    rects, amb_mask = _ambiguity_rects(rng, H, W, cfg.ambiguous_fraction)
    const = rng.uniform(-0.5, 0.5, size=(C, 1))

    f_i = texture.sample(coords)
    in_i = _in_rects(coords, rects)
    if in_i.any():
        noise_i = cfg.noise_sigma * rng.standard_normal((C, int(in_i.sum())))
        f_i[:, in_i] = const + noise_i

    back = _apply_homography(Hm_inv, coords)
    f_j = texture.sample(back)
    in_j = _in_rects(back, rects)
    if in_j.any():
        noise_j = cfg.noise_sigma * rng.standard_normal((C, int(in_j.sum())))
        f_j[:, in_j] = const + noise_j

    dt = cfg.numpy_dtype()
    return SceneSample(
        f_i=f_i.reshape(C, H, W).astype(dt),
        f_j=f_j.reshape(C, H, W).astype(dt),
        inv_depth=inv_depth.astype(np.float64),
        pose=pose,
        camera=cam,
        flow=flow,
        valid=valid.reshape(H, W),
        ambiguous=amb_mask,
        seed=int(seed),
    )


def make_corpus(cfg: SceneConfig, seed: int, count: int) -> list[SceneSample]:
    """Scene list with per-sample seeds split deterministically from `seed`."""
    return [generate_scene(cfg, seed * 1_000_003 + i) for i in range(count)]
