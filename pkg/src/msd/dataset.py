"""Procedural, text-annotated stylised motion data.

Each content is a parametric sinusoidal gait or gesture driven through forward
kinematics on the desk skeleton. Styles are analytic modulations of the same
base parameters, so every stylised sample has an exact neutral counterpart
(same content and seed), although training never uses that pairing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, IOFailure, InvalidMotion
from .motion import (
    DEFAULT_FRAMERATE,
    Motion,
    WorldMotion,
    axis_angle_matrix,
    fk_from_rotations,
    get_skeleton,
    localize,
    motion_from_dict,
    motion_to_dict,
    rot_y,
)
from .prompts import CONTENTS, STYLES, render_prompt

X_AXIS = np.array([1.0, 0.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])
GROUND_CLEARANCE = 0.01
LEG = 0.84


@dataclass
class MotionSample:
    motion: Motion
    content: str
    style: str
    text: str
    sample_id: str = ""

    def __post_init__(self):
        if self.content not in CONTENTS or self.style not in STYLES:
            raise InvalidMotion(f"labels out of range: {self.content!r}, {self.style!r}")


@dataclass(frozen=True)
class StyleParams:
    amp: float = 1.0
    speed: float = 1.0
    freq: float = 1.0
    arm_amp: float = 1.0
    spine: float = 0.0
    head: float = 0.0
    knee: float = 0.0
    hip: float = 0.0
    elbow: float = 0.0
    abduction: float = 0.0
    jitter: float = 0.0


STYLE_PARAMS = {
    "neutral": StyleParams(),
    "old": StyleParams(amp=0.6, speed=0.7, spine=0.45, head=0.2, knee=0.25, hip=0.12, elbow=0.3),
    "proud": StyleParams(arm_amp=1.2, spine=-0.25, head=-0.3, abduction=0.25),
    "angry": StyleParams(freq=1.4, elbow=1.1, abduction=0.15, jitter=0.1),
    "depressed": StyleParams(speed=0.6, arm_amp=0.5, spine=0.2, head=0.7, abduction=-0.08),
}

BASE_FREQ = {"walk": 0.8, "run": 1.4, "jump": 0.9, "wave": 1.5, "kick": 0.7}


def _rx(angle):
    return axis_angle_matrix(X_AXIS, np.asarray(angle, dtype=np.float64))


def _rz(angle):
    return axis_angle_matrix(Z_AXIS, np.asarray(angle, dtype=np.float64))


def _pos(x):
    return np.maximum(x, 0.0)


def _content_curves(content: str, psi, amp, arm):
    """Joint angle curves (radians) for one content; all arrays of shape (f,)."""
    f = psi.shape[0]
    z = np.zeros(f)
    c = {k: z.copy() for k in ("hip_l", "hip_r", "knee_l", "knee_r", "sh_l", "sh_r", "abd_l", "abd_r",
                               "el_l", "el_r", "wave", "spine", "head", "air")}
    s, co = np.sin(psi), np.cos(psi)
    gain = 0.0
    if content == "walk":
        c["hip_l"], c["hip_r"] = 0.35 * amp * s, -0.35 * amp * s
        c["knee_l"], c["knee_r"] = 0.6 * amp * _pos(co), 0.6 * amp * _pos(-co)
        c["sh_l"], c["sh_r"] = -0.3 * amp * arm * s, 0.3 * amp * arm * s
        c["el_l"] = c["el_r"] = z + 0.2
        gain = LEG * 0.35 * amp
    elif content == "run":
        c["hip_l"], c["hip_r"] = 0.55 * amp * s, -0.55 * amp * s
        c["knee_l"], c["knee_r"] = 0.3 + 1.0 * amp * _pos(co), 0.3 + 1.0 * amp * _pos(-co)
        c["sh_l"], c["sh_r"] = -0.6 * amp * arm * s, 0.6 * amp * arm * s
        c["el_l"] = c["el_r"] = z + 1.3
        c["air"] = 0.06 * amp * np.abs(s)
        gain = 0.75 * LEG * 0.55 * amp
    elif content == "jump":
        crouch, air = _pos(-s), _pos(s)
        c["hip_l"] = c["hip_r"] = 0.6 * amp * crouch
        c["knee_l"] = c["knee_r"] = 1.2 * amp * crouch
        c["spine"] = 0.3 * amp * crouch
        c["sh_l"] = c["sh_r"] = amp * arm * (1.4 * air - 0.5 * crouch)
        c["el_l"] = c["el_r"] = z + 0.3
        c["air"] = 0.3 * amp * air
    elif content == "wave":
        c["abd_r"] = z + 2.3 * (0.8 + 0.2 * amp)
        c["wave"] = 0.5 * amp * arm * s
        c["el_r"] = z + 0.3
        c["sh_l"] = 0.05 * amp * s
        c["spine"] = 0.03 * amp * s
    elif content == "kick":
        k = _pos(s) ** 2
        c["hip_r"] = 1.2 * amp * k - 0.15 * amp * _pos(-s)
        c["knee_r"] = 0.2 + 0.8 * amp * _pos(-s)
        c["hip_l"], c["knee_l"] = z + 0.05, z + 0.1
        c["sh_l"], c["sh_r"] = 0.5 * amp * arm * k, -0.4 * amp * arm * k
        c["abd_l"] = c["abd_r"] = 0.3 * amp * k
        c["spine"] = -0.15 * amp * k
    else:
        raise InvalidMotion(f"unknown content {content!r}")
    return c, gain


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generate_world(content: str, style: str, length: int, seed: int, framerate: float = DEFAULT_FRAMERATE,
                   skeleton_id: str = "desk15") -> WorldMotion:
    if content not in CONTENTS or style not in STYLES:
        raise InvalidMotion(f"unknown labels ({content!r}, {style!r})")
    if length < 2:
        raise InvalidMotion("length must be at least 2 frames")
    skel = get_skeleton(skeleton_id)
    sp = STYLE_PARAMS[style]
    # base parameters depend on (content, seed) only, so styles share them
    rng = np.random.default_rng(_stable_seed("base", seed, content))
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    heading0 = rng.uniform(-np.pi, np.pi)
    amp_jit, freq_jit = rng.uniform(0.9, 1.1, size=2)
    turn = rng.uniform(-0.25, 0.25) if content in ("walk", "run") else 0.0
    start = rng.uniform(-1.0, 1.0, size=2)
    srng = np.random.default_rng(_stable_seed("style", seed, content, style))
    jit_phase = srng.uniform(0.0, 2.0 * np.pi, size=4)

    t = np.arange(length) / framerate
    freq = BASE_FREQ[content] * freq_jit * sp.speed * sp.freq
    omega = 2.0 * np.pi * freq
    psi = omega * t + phase0
    amp = amp_jit * sp.amp
    cur, gain = _content_curves(content, psi, amp, sp.arm_amp)

    jit = [sp.jitter * np.sin(2.0 * np.pi * 6.0 * t + ph) for ph in jit_phase]
    spine = cur["spine"] + sp.spine + 0.5 * jit[0]
    sh_l, sh_r = cur["sh_l"] + jit[1], cur["sh_r"] + jit[2]

    n = skel.num_joints
    local = np.tile(np.eye(3), (length, n, 1, 1))
    j = skel.index
    local[:, j("spine")] = _rx(spine)
    local[:, j("head")] = _rx(cur["head"] + sp.head + 0.5 * jit[3])
    local[:, j("left_hip")] = _rx(-(cur["hip_l"] + sp.hip))
    local[:, j("right_hip")] = _rx(-(cur["hip_r"] + sp.hip))
    local[:, j("left_knee")] = _rx(cur["knee_l"] + sp.knee)
    local[:, j("right_knee")] = _rx(cur["knee_r"] + sp.knee)
    local[:, j("left_shoulder")] = _rz(cur["abd_l"] + sp.abduction) @ _rx(-sh_l)
    local[:, j("right_shoulder")] = _rz(-(cur["abd_r"] + sp.abduction)) @ _rx(-sh_r)
    local[:, j("left_elbow")] = _rx(-(cur["el_l"] + sp.elbow))
    local[:, j("right_elbow")] = _rz(-cur["wave"]) @ _rx(-(cur["el_r"] + sp.elbow))

    heading = heading0 + turn * t
    speed = gain * omega / framerate  # m/frame, tied to the stride so stance feet barely slide
    direction = np.stack([np.sin(heading), np.zeros(length), np.cos(heading)], axis=1)
    steps = speed * direction
    steps[0] = 0.0
    root = np.cumsum(steps, axis=0)
    root[:, 0] += start[0]
    root[:, 2] += start[1]

    root_rot = rot_y(heading)
    probe = fk_from_rotations(skel, np.zeros((length, 3)), root_rot, local)
    sj = skel.special_joints
    lowest = np.minimum(probe[:, sj["left_foot"], 1], probe[:, sj["right_foot"], 1])
    root[:, 1] = GROUND_CLEARANCE - lowest + cur["air"]
    positions = fk_from_rotations(skel, root, root_rot, local)
    rotations = local.copy()
    rotations[:, 0] = root_rot
    return WorldMotion(positions, rotations, skeleton_id, framerate)


def generate_sample(content: str, style: str, length: int, seed: int,
                    framerate: float = DEFAULT_FRAMERATE, sample_id: str = "") -> MotionSample:
    """Deterministic stylised sample for ``(content, style, length, seed)``."""
    world = generate_world(content, style, length, seed, framerate)
    return MotionSample(localize(world), content, style, render_prompt(content, style), sample_id)


@dataclass
class DatasetSpec:
    seed: int = 0
    per_cell: int = 16
    length_range: tuple[int, int] = (48, 64)
    style_weights: dict[str, float] = field(
        default_factory=lambda: {"neutral": 0.7, "old": 0.075, "proud": 0.075, "angry": 0.075, "depressed": 0.075}
    )
    train_fraction: float = 0.9
    framerate: float = DEFAULT_FRAMERATE

    def __post_init__(self):
        self.length_range = tuple(int(v) for v in self.length_range)
        if self.per_cell < 0:
            raise InvalidMotion("per_cell must be >= 0")
        lo, hi = self.length_range
        if lo < 16 or hi < lo:
            raise InvalidMotion("length range must satisfy 16 <= lo <= hi")
        if set(self.style_weights) - set(STYLES) or any(w < 0 for w in self.style_weights.values()):
            raise InvalidMotion("style weights must be non-negative and keyed by known styles")
        if sum(self.style_weights.values()) <= 0:
            raise InvalidMotion("style weights sum to zero")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise InvalidMotion("train_fraction must lie in [0, 1]")

    @classmethod
    def uniform(cls, **kw) -> DatasetSpec:
        return cls(style_weights={s: 1.0 for s in STYLES}, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["length_range"] = list(self.length_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        return cls(**d)


def style_counts(total: int, weights: dict[str, float]) -> dict[str, int]:
    """Split ``total`` across styles by weight with largest-remainder rounding."""
    w = np.array([weights.get(s, 0.0) for s in STYLES], dtype=np.float64)
    raw = total * w / w.sum()
    counts = np.floor(raw).astype(int)
    order = sorted(range(len(STYLES)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return dict(zip(STYLES, counts.tolist()))


def build_dataset(spec: DatasetSpec) -> dict[str, list[MotionSample]]:
    """All samples for ``spec`` split into ``{"train", "test"}`` deterministically."""
    samples: list[MotionSample] = []
    rng = np.random.default_rng(_stable_seed("lengths", spec.seed))
    lo, hi = spec.length_range
    per_content = spec.per_cell * len(STYLES)
    counts = style_counts(per_content, spec.style_weights)
    for content in CONTENTS:
        for style in STYLES:
            for k in range(counts[style]):
                length = int(rng.integers(lo, hi + 1))
                seed = _stable_seed("sample", spec.seed, content, style, k) % (2**31)
                sid = f"{content}-{style}-{k:04d}"
                samples.append(generate_sample(content, style, length, seed, spec.framerate, sid))
    order = np.random.default_rng(_stable_seed("split", spec.seed)).permutation(len(samples))
    n_train = int(round(spec.train_fraction * len(samples)))
    train = [samples[i] for i in sorted(order[:n_train])]
    test = [samples[i] for i in sorted(order[n_train:])]
    return {"train": train, "test": test}


def sample_to_dict(sample: MotionSample, split: str | None = None) -> dict:
    d = {"id": sample.sample_id, "content": sample.content, "style": sample.style, "text": sample.text}
    if split is not None:
        d["split"] = split
    d["motion"] = motion_to_dict(sample.motion)
    return d


def sample_from_dict(d: dict) -> MotionSample:
    return MotionSample(motion_from_dict(d["motion"]), d["content"], d["style"], d["text"], d.get("id", ""))


def write_jsonl(splits: dict[str, list[MotionSample]], path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for split in ("train", "test"):
                for s in splits.get(split, []):
                    fh.write(json.dumps(sample_to_dict(s, split)) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_jsonl(path) -> dict[str, list[MotionSample]]:
    out: dict[str, list[MotionSample]] = {"train": [], "test": []}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    for line in lines:
        if line.strip():
            d = json.loads(line)
            out.setdefault(d.get("split", "train"), []).append(sample_from_dict(d))
    return out


def filter_samples(samples, content: str | None = None, style: str | None = None) -> list[MotionSample]:
    out = [s for s in samples if (content is None or s.content == content) and (style is None or s.style == style)]
    return out


def require_samples(samples) -> list[MotionSample]:
    samples = list(samples)
    if not samples:
        raise EmptyDataset("dataset is empty")
    return samples
