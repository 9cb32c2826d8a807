"""BVH export (and a small reader used for round-trip checks).

Rotation channels are ``Zrotation Yrotation Xrotation`` (R = Rz @ Ry @ Rx) in
degrees; root and offsets are written in centimeters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IOFailure
from .motion import Motion, RootTransform, Skeleton, WorldMotion, fk_from_rotations, globalize, get_skeleton

CM = 100.0


def matrix_to_euler_zyx(mat) -> np.ndarray:
    """(..., 3, 3) -> (..., 3) angles (z, y, x) in radians with R = Rz Ry Rx."""
    mat = np.asarray(mat, dtype=np.float64)
    sy = np.clip(-mat[..., 2, 0], -1.0, 1.0)
    y = np.arcsin(sy)
    gimbal = np.abs(sy) > 1.0 - 1e-12
    z = np.where(gimbal, np.arctan2(-mat[..., 0, 1], mat[..., 1, 1]), np.arctan2(mat[..., 1, 0], mat[..., 0, 0]))
    x = np.where(gimbal, 0.0, np.arctan2(mat[..., 2, 1], mat[..., 2, 2]))
    return np.stack([z, y, x], axis=-1)


def euler_zyx_to_matrix(angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64)
    z, y, x = angles[..., 0], angles[..., 1], angles[..., 2]
    cz, sz, cy, sy, cx, sx = np.cos(z), np.sin(z), np.cos(y), np.sin(y), np.cos(x), np.sin(x)
    out = np.empty(angles.shape[:-1] + (3, 3))
    out[..., 0, 0] = cz * cy
    out[..., 0, 1] = cz * sy * sx - sz * cx
    out[..., 0, 2] = cz * sy * cx + sz * sx
    out[..., 1, 0] = sz * cy
    out[..., 1, 1] = sz * sy * sx + cz * cx
    out[..., 1, 2] = sz * sy * cx - cz * sx
    out[..., 2, 0] = -sy
    out[..., 2, 1] = cy * sx
    out[..., 2, 2] = cy * cx
    return out


def _children(skel: Skeleton) -> dict[int, list[int]]:
    kids: dict[int, list[int]] = {j: [] for j in range(skel.num_joints)}
    for j in range(1, skel.num_joints):
        kids[skel.parents[j]].append(j)
    return kids


def _hierarchy(skel: Skeleton) -> tuple[list[str], list[int]]:
    kids = _children(skel)
    lines: list[str] = ["HIERARCHY"]
    order: list[int] = []

    def emit(j: int, depth: int) -> None:
        pad = "  " * depth
        off = skel.offsets[j] * CM
        head = "ROOT" if j == 0 else "JOINT"
        lines.append(f"{pad}{head} {skel.joint_names[j]}")
        lines.append(f"{pad}{{")
        lines.append(f"{pad}  OFFSET {off[0]:.6f} {off[1]:.6f} {off[2]:.6f}")
        if j == 0:
            lines.append(f"{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation")
        else:
            lines.append(f"{pad}  CHANNELS 3 Zrotation Yrotation Xrotation")
        order.append(j)
        if kids[j]:
            for c in kids[j]:
                emit(c, depth + 1)
        else:
            lines.append(f"{pad}  End Site")
            lines.append(f"{pad}  {{")
            lines.append(f"{pad}    OFFSET 0.000000 0.000000 0.000000")
            lines.append(f"{pad}  }}")
        lines.append(f"{pad}}}")

    emit(0, 0)
    return lines, order


def world_to_bvh_text(world: WorldMotion) -> str:
    skel = world.skeleton
    lines, order = _hierarchy(skel)
    eul = np.degrees(matrix_to_euler_zyx(world.rotations))  # (f, J, 3)
    lines.append("MOTION")
    lines.append(f"Frames: {world.num_frames}")
    lines.append(f"Frame Time: {1.0 / world.framerate:.8f}")
    for t in range(world.num_frames):
        vals = list(world.positions[t, 0] * CM)
        for j in order:
            vals.extend(eul[t, j])
        lines.append(" ".join(f"{v:.6f}" for v in vals))
    return "\n".join(lines) + "\n"


def export_bvh(motion: Motion, path, initial: RootTransform | None = None) -> None:
    """Globalise ``motion`` and write it as BVH."""
    world = globalize(motion, initial)
    try:
        Path(path).write_text(world_to_bvh_text(world))
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_bvh(path, skeleton_id: str = "desk15") -> tuple[np.ndarray, np.ndarray, float]:
    """Read a BVH written by :func:`export_bvh`.

    Returns ``(root_positions_m (f,3), rotations (f,J,3,3), framerate)``; the
    rotations follow the skeleton's joint order.
    """
    skel = get_skeleton(skeleton_id)
    text = Path(path).read_text().split("\n")
    names: list[str] = []
    idx = 0
    while not text[idx].startswith("MOTION"):
        tok = text[idx].split()
        if tok and tok[0] in ("ROOT", "JOINT"):
            names.append(tok[1])
        idx += 1
    frames = int(text[idx + 1].split(":")[1])
    frame_time = float(text[idx + 2].split(":")[1])
    data = np.array([[float(v) for v in line.split()] for line in text[idx + 3 : idx + 3 + frames]])
    root = data[:, :3] / CM
    eul = np.radians(data[:, 3:].reshape(frames, len(names), 3))
    mats = euler_zyx_to_matrix(eul)
    rots = np.empty((frames, skel.num_joints, 3, 3))
    for col, name in enumerate(names):
        rots[:, skel.index(name)] = mats[:, col]
    return root, rots, 1.0 / frame_time


def bvh_joint_positions(path, skeleton_id: str = "desk15") -> np.ndarray:
    root, rots, _ = read_bvh(path, skeleton_id)
    return fk_from_rotations(get_skeleton(skeleton_id), root, rots[:, 0], rots)
