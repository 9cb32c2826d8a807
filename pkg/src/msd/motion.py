"""Skeleton-aware motion representation.

A pose vector is ``v = [o, p, r]`` where

* ``o = (o_r, o_x, o_z, o_h)``: root yaw velocity (rad/frame), root linear
  velocity in the facing frame (m/frame) and absolute root height (m);
* ``p``: joint positions relative to the root, rotated into the facing frame,
  shape ``(J-1, 3)``;
* ``r``: joint rotations relative to the parent in 6D form (first two columns
  of the rotation matrix), shape ``(J, 6)``. ``r_0`` is the root rotation
  expressed in the facing frame.

Conventions: y is up, lengths in meters, angles in radians. A character whose
left side points along +x faces +z. Velocities are backward differences; frame
0 copies frame 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegeneratePose, DegenerateRotation, InvalidFactor, InvalidMotion

UP = np.array([0.0, 1.0, 0.0])
DEFAULT_FRAMERATE = 20.0

# root vector layout
O_R, O_X, O_Z, O_H = 0, 1, 2, 3


@dataclass(frozen=True)
class Skeleton:
    name: str
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    offsets: np.ndarray
    special_joints: dict[str, int] = field(default_factory=dict)

    REQUIRED = ("root", "left_hip", "right_hip", "left_shoulder", "right_shoulder", "left_foot", "right_foot")

    def __post_init__(self):
        n = len(self.joint_names)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.shape != (n, 3) or len(self.parents) != n:
            raise InvalidMotion("skeleton arrays disagree on the joint count")
        if not np.all(np.isfinite(offsets)):
            raise InvalidMotion("non-finite skeleton offsets")
        if self.parents[0] not in (-1, 0):
            raise InvalidMotion("joint 0 must be the root")
        for j in range(1, n):
            if not 0 <= self.parents[j] < j:
                raise InvalidMotion(f"joint {j} has parent {self.parents[j]}; parents must precede children")
        for key in self.REQUIRED:
            if key not in self.special_joints or not 0 <= self.special_joints[key] < n:
                raise InvalidMotion(f"special joint {key!r} missing")
        object.__setattr__(self, "offsets", offsets)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def pose_dim(self) -> int:
        return pose_dim(self.num_joints)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)


def pose_dim(num_joints: int) -> int:
    return 4 + 3 * (num_joints - 1) + 6 * num_joints


def default_skeleton() -> Skeleton:
    """15-joint desk skeleton, rest pose facing +z with the left side on +x."""
    joints = [
        ("root", -1, (0.0, 0.0, 0.0)),
        ("spine", 0, (0.0, 0.25, 0.0)),
        ("head", 1, (0.0, 0.25, 0.0)),
        ("left_hip", 0, (0.1, -0.05, 0.0)),
        ("left_knee", 3, (0.0, -0.42, 0.0)),
        ("left_foot", 4, (0.0, -0.42, 0.0)),
        ("right_hip", 0, (-0.1, -0.05, 0.0)),
        ("right_knee", 6, (0.0, -0.42, 0.0)),
        ("right_foot", 7, (0.0, -0.42, 0.0)),
        ("left_shoulder", 1, (0.18, 0.1, 0.0)),
        ("left_elbow", 9, (0.0, -0.28, 0.0)),
        ("left_hand", 10, (0.0, -0.25, 0.0)),
        ("right_shoulder", 1, (-0.18, 0.1, 0.0)),
        ("right_elbow", 12, (0.0, -0.28, 0.0)),
        ("right_hand", 13, (0.0, -0.25, 0.0)),
    ]
    names = tuple(j[0] for j in joints)
    special = {k: names.index(k) for k in Skeleton.REQUIRED}
    return Skeleton(
        name="desk15",
        joint_names=names,
        parents=tuple(j[1] for j in joints),
        offsets=np.array([j[2] for j in joints]),
        special_joints=special,
    )


_SKELETONS: dict[str, Skeleton] = {}


def register_skeleton(skeleton: Skeleton) -> None:
    _SKELETONS[skeleton.name] = skeleton


def get_skeleton(name: str) -> Skeleton:
    try:
        return _SKELETONS[name]
    except KeyError:
        raise InvalidMotion(f"unknown skeleton {name!r}") from None


register_skeleton(default_skeleton())


# ---------------------------------------------------------------------------
# rotations


def rot_y(angle) -> np.ndarray:
    """Rotation matrices about +y; broadcasts over ``angle``."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 2] = s
    out[..., 1, 1] = 1.0
    out[..., 2, 0] = -s
    out[..., 2, 2] = c
    return out


def axis_angle_matrix(axis, angle) -> np.ndarray:
    """Rodrigues' formula. ``axis`` (..., 3) need not be normalised."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    k = np.zeros(np.broadcast_shapes(x.shape, angle.shape) + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -z, y
    k[..., 1, 0], k[..., 1, 2] = z, -x
    k[..., 2, 0], k[..., 2, 1] = -y, x
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def rot6d_encode(mat) -> np.ndarray:
    """(..., 3, 3) -> (..., 6): the first two columns, column-major."""
    mat = np.asarray(mat, dtype=np.float64)
    return np.concatenate([mat[..., :, 0], mat[..., :, 1]], axis=-1)


def rot6d_decode(r6) -> np.ndarray:
    """(..., 6) -> (..., 3, 3) by Gram-Schmidt on the two stored columns."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., :3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < 1e-8):
        raise DegenerateRotation("first 6D column has (near) zero norm")
    b1 = a1 / n1
    b2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(b2, axis=-1, keepdims=True)
    if np.any(n2 < 1e-8):
        raise DegenerateRotation("6D columns are parallel")
    b2 = b2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# motion containers


@dataclass(frozen=True)
class RootTransform:
    """World placement of the root on the ground plane at frame 0."""

    x: float = 0.0
    z: float = 0.0
    heading: float = 0.0


@dataclass
class WorldMotion:
    """World-frame motion.

    ``positions``: (f, J, 3) world joint positions.
    ``rotations``: (f, J, 3, 3); entry 0 is the root's world rotation, the
    others are relative to their parent.
    """

    positions: np.ndarray
    rotations: np.ndarray
    skeleton_id: str = "desk15"
    framerate: float = DEFAULT_FRAMERATE

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def skeleton(self) -> Skeleton:
        return get_skeleton(self.skeleton_id)


@dataclass
class Motion:
    """Facing-localised motion: an ``(f, pose_dim)`` array of pose vectors."""

    features: np.ndarray
    skeleton_id: str = "desk15"
    framerate: float = DEFAULT_FRAMERATE

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidMotion(f"features must be (f>=1, d), got {self.features.shape}")
        if self.features.shape[1] != self.skeleton.pose_dim:
            raise InvalidMotion(
                f"pose dim {self.features.shape[1]} does not match skeleton {self.skeleton_id!r} "
                f"({self.skeleton.pose_dim})"
            )
        if self.framerate <= 0:
            raise InvalidMotion("framerate must be positive")

    @property
    def skeleton(self) -> Skeleton:
        return get_skeleton(self.skeleton_id)

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def root(self) -> np.ndarray:
        return self.features[:, :4]

    @property
    def positions(self) -> np.ndarray:
        j = self.skeleton.num_joints
        return self.features[:, 4 : 4 + 3 * (j - 1)].reshape(-1, j - 1, 3)

    @property
    def rotations(self) -> np.ndarray:
        j = self.skeleton.num_joints
        return self.features[:, 4 + 3 * (j - 1) :].reshape(-1, j, 6)

    def copy(self) -> Motion:
        return Motion(self.features.copy(), self.skeleton_id, self.framerate)

    def with_features(self, features) -> Motion:
        return Motion(features, self.skeleton_id, self.framerate)

    def validate(self) -> None:
        """Raise InvalidMotion unless every channel is finite and every rotation decodes."""
        if not np.all(np.isfinite(self.features)):
            raise InvalidMotion("non-finite pose channels")
        try:
            mats = rot6d_decode(self.rotations)
        except DegenerateRotation as exc:
            raise InvalidMotion(str(exc)) from exc
        if not np.allclose(np.linalg.det(mats), 1.0, atol=1e-9):
            raise InvalidMotion("decoded rotation is not proper")

    def __eq__(self, other):
        if not isinstance(other, Motion):
            return NotImplemented
        return (
            self.skeleton_id == other.skeleton_id
            and self.framerate == other.framerate
            and np.array_equal(self.features, other.features)
        )


def assemble(root, positions, rotations6d, skeleton_id="desk15", framerate=DEFAULT_FRAMERATE) -> Motion:
    f = root.shape[0]
    feats = np.concatenate([root, positions.reshape(f, -1), rotations6d.reshape(f, -1)], axis=1)
    return Motion(feats, skeleton_id, framerate)


# ---------------------------------------------------------------------------
# facing and (de)localisation


def facing_direction(positions, skeleton: Skeleton) -> np.ndarray:
    """Unit facing vector ``(x, z)`` from world joint positions ``(..., J, 3)``."""
    positions = np.asarray(positions, dtype=np.float64)
    sj = skeleton.special_joints
    across = 0.5 * (
        (positions[..., sj["left_hip"], :] - positions[..., sj["right_hip"], :])
        + (positions[..., sj["left_shoulder"], :] - positions[..., sj["right_shoulder"], :])
    )
    forward = np.cross(across, UP)
    xz = np.stack([forward[..., 0], forward[..., 2]], axis=-1)
    norm = np.linalg.norm(xz, axis=-1, keepdims=True)
    if np.any(norm < 1e-8):
        raise DegeneratePose("across-body vector is (nearly) parallel to the up axis")
    return xz / norm


def facing_angle(positions, skeleton: Skeleton) -> np.ndarray:
    d = facing_direction(positions, skeleton)
    return np.arctan2(d[..., 0], d[..., 1])


def localize(world: WorldMotion) -> Motion:
    """World-frame motion -> facing-localised :class:`Motion`."""
    skel = world.skeleton
    f = world.num_frames
    if f < 2:
        raise InvalidMotion("localize needs at least 2 frames")
    pos = np.asarray(world.positions, dtype=np.float64)
    phi = facing_angle(pos, skel)
    inv = rot_y(-phi)  # (f, 3, 3)
    root = pos[:, 0]

    o = np.zeros((f, 4))
    o[1:, O_R] = wrap_angle(np.diff(phi))
    disp = np.zeros((f, 3))
    disp[1:] = root[1:] - root[:-1]
    local_disp = np.einsum("fij,fj->fi", inv, disp)
    o[:, O_X] = local_disp[:, 0]
    o[:, O_Z] = local_disp[:, 2]
    o[0, :3] = o[1, :3]
    o[:, O_H] = root[:, 1]

    rel = pos[:, 1:] - root[:, None]
    p = np.einsum("fij,fkj->fki", inv, rel)
    rots = np.array(world.rotations, dtype=np.float64)
    rots[:, 0] = inv @ rots[:, 0]
    return assemble(o, p, rot6d_encode(rots), world.skeleton_id, world.framerate)


def root_trajectory(motion: Motion, initial: RootTransform | None = None):
    """Integrate the root channels. Returns ``(positions (f,3), headings (f,))``."""
    initial = initial or RootTransform()
    o = motion.root
    f = motion.num_frames
    heading = np.empty(f)
    heading[0] = initial.heading
    if f > 1:
        heading[1:] = initial.heading + np.cumsum(o[1:, O_R])
    step = np.zeros((f, 3))
    step[:, 0] = o[:, O_X]
    step[:, 2] = o[:, O_Z]
    world_step = np.einsum("fij,fj->fi", rot_y(heading), step)
    world_step[0] = 0.0
    pos = np.cumsum(world_step, axis=0)
    pos[:, 0] += initial.x
    pos[:, 2] += initial.z
    pos[:, 1] = o[:, O_H]
    return pos, heading


def globalize(motion: Motion, initial: RootTransform | None = None) -> WorldMotion:
    """Inverse of :func:`localize`. Joint positions come from the ``p`` channels."""
    root, heading = root_trajectory(motion, initial)
    fwd = rot_y(heading)
    positions = np.empty((motion.num_frames, motion.skeleton.num_joints, 3))
    positions[:, 0] = root
    positions[:, 1:] = root[:, None] + np.einsum("fij,fkj->fki", fwd, motion.positions)
    rots = rot6d_decode(motion.rotations)
    rots[:, 0] = fwd @ rots[:, 0]
    return WorldMotion(positions, rots, motion.skeleton_id, motion.framerate)


def initial_transform(world: WorldMotion) -> RootTransform:
    """Frame-0 root placement of a world motion (for exact round trips)."""
    heading = float(facing_angle(world.positions[0], world.skeleton))
    x, _, z = world.positions[0, 0]
    return RootTransform(float(x), float(z), heading)


def forward_kinematics(motion: Motion, initial: RootTransform | None = None) -> np.ndarray:
    """World joint positions ``(f, J, 3)`` from the rotation channels and skeleton offsets."""
    skel = motion.skeleton
    root, heading = root_trajectory(motion, initial)
    local = rot6d_decode(motion.rotations)
    return fk_from_rotations(skel, root, rot_y(heading) @ local[:, 0], local)


def fk_from_rotations(skel: Skeleton, root_pos, root_rot, local_rots) -> np.ndarray:
    f = root_pos.shape[0]
    n = skel.num_joints
    glob = np.empty((f, n, 3, 3))
    pos = np.empty((f, n, 3))
    glob[:, 0] = root_rot
    pos[:, 0] = root_pos
    for j in range(1, n):
        par = skel.parents[j]
        glob[:, j] = glob[:, par] @ local_rots[:, j]
        pos[:, j] = pos[:, par] + glob[:, par] @ skel.offsets[j]
    return pos


# ---------------------------------------------------------------------------
# velocities


def local_joint_velocities(motion: Motion) -> np.ndarray:
    """Per-frame, per-joint speed ``u^j(tau)``, shape ``(f, J)``.

    Joints 1..J-1 use differences of the facing-local positions; the root uses
    its planar velocity channels plus the change of root height.
    """
    f = motion.num_frames
    if f < 2:
        raise InvalidMotion("velocities need at least 2 frames")
    o = motion.root
    u = np.empty((f, motion.skeleton.num_joints))
    dh = np.diff(o[:, O_H])
    u[1:, 0] = np.sqrt(o[1:, O_X] ** 2 + o[1:, O_Z] ** 2 + dh**2)
    u[1:, 1:] = np.linalg.norm(np.diff(motion.positions, axis=0), axis=-1)
    u[0] = u[1]
    return u


def mean_max_speed(speeds) -> float:
    """Temporal mean of the per-frame maximum over joints."""
    speeds = np.asarray(speeds, dtype=np.float64)
    return float(np.mean(np.max(speeds, axis=1)))


def velocity_vector_U(motion: Motion) -> float:
    return mean_max_speed(local_joint_velocities(motion))


def warp_global_velocity(motion: Motion, factor: float) -> Motion:
    """Scale the root's planar and yaw velocities by ``factor``."""
    factor = float(factor)
    if not np.isfinite(factor) or factor <= 0.0:
        raise InvalidFactor(f"velocity factor must be finite and positive, got {factor}")
    feats = motion.features.copy()
    feats[:, O_R] *= factor
    feats[:, O_X] *= factor
    feats[:, O_Z] *= factor
    return motion.with_features(feats)


def extract_horizontal_root_track(motion: Motion) -> np.ndarray:
    """``[o_1^x, o_1^z, o_2^x, o_2^z, ...]`` as a flat array of length 2f."""
    return motion.root[:, [O_X, O_Z]].reshape(-1).copy()


def write_horizontal_root_track(motion: Motion, track) -> Motion:
    track = np.asarray(track, dtype=np.float64)
    if track.shape != (2 * motion.num_frames,):
        raise InvalidMotion(f"track must have length {2 * motion.num_frames}")
    feats = motion.features.copy()
    feats[:, [O_X, O_Z]] = track.reshape(-1, 2)
    return motion.with_features(feats)


# ---------------------------------------------------------------------------
# serialisation


def motion_to_dict(motion: Motion) -> dict:
    j = motion.skeleton.num_joints
    frames = []
    for v in motion.features:
        o = v[:4].tolist()
        p = v[4 : 4 + 3 * (j - 1)].reshape(j - 1, 3).tolist()
        r = v[4 + 3 * (j - 1) :].reshape(j, 6).tolist()
        frames.append([o, p, r])
    return {"skeleton_id": motion.skeleton_id, "framerate": motion.framerate, "frames": frames}


def motion_from_dict(data: dict) -> Motion:
    try:
        rows = [np.concatenate([np.ravel(o), np.ravel(p), np.ravel(r)]) for o, p, r in data["frames"]]
        return Motion(np.array(rows, dtype=np.float64), data["skeleton_id"], float(data["framerate"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidMotion(f"malformed motion document: {exc}") from exc


def save_motion(motion: Motion, path) -> None:
    Path(path).write_text(json.dumps(motion_to_dict(motion)))


def load_motion(path) -> Motion:
    return motion_from_dict(json.loads(Path(path).read_text()))
