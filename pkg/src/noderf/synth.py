"""Procedural scenes with exact ground truth: pendulum, oscillating ball, bifurcating hill.

World frame: y up, the backdrop is the plane z = 0 facing +z, and the ball
moves in front of it.  Cameras look along their local -z axis.
Frames are quantized to 8 bits at render time so PPM round-trips are exact.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .radiance import Camera, look_at

FORMAT_VERSION = 1
KINDS = ("pendulum", "oscillating-ball", "bifurcating-hill")


class DatasetError(RuntimeError):
    """Missing, malformed, or tampered dataset file."""


@dataclass
class SceneSpec:
    kind: str = "pendulum"
    n_frames: int | None = None
    image_size: int = 64
    rig: str = "single"  # single | grid3x3
    focal: float = 96.0
    near: float = 2.8
    far: float = 4.6
    ball_radius: float = 0.18
    ball_color: tuple = (0.9, 0.12, 0.1)
    ball_depth: float = 0.5
    frame_dt: float | None = None
    substeps: int = 10
    damping: float | None = None
    gravity: float = 9.81
    length: float = 1.0
    pivot_y: float = 0.75
    bowl_k: float = 4.0
    bowl_curvature: float = 0.5
    hill_a: float = 2.0
    hill_b: float = 1.44
    hill_scale: float = 0.9
    hill_base: float = -0.35

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"SceneSpec: unknown scene kind {self.kind!r}")
        defaults = {
            "pendulum": dict(n_frames=100, frame_dt=0.06, damping=0.3),
            "oscillating-ball": dict(n_frames=90, frame_dt=0.05, damping=0.15),
            "bifurcating-hill": dict(n_frames=90, frame_dt=0.08, damping=1.0),
        }[self.kind]
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.kind == "oscillating-ball" and self.rig == "single":
            self.rig = "grid3x3"
        if self.damping < 0:
            raise ValueError("SceneSpec: damping must be >= 0")
        if self.n_frames < 2:
            raise ValueError("SceneSpec: need at least 2 frames")
        self.ball_color = tuple(float(c) for c in self.ball_color)

    @property
    def pose_dim(self) -> int:
        return 2 if self.kind == "bifurcating-hill" else 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ball_color"] = list(self.ball_color)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class Motion:
    """Generalized-coordinate trajectory plus the emitted object poses."""

    q: np.ndarray
    qdot: np.ndarray
    poses: np.ndarray


@dataclass
class SequenceRecord:
    frames: np.ndarray  # (T, C, H, W, 3) uint8
    camera_ids: list
    poses: np.ndarray  # (T, pose_dim)
    velocities: np.ndarray  # (T - 1, pose_dim)
    static: np.ndarray  # (C, H, W, 3) uint8
    name: str = "seq"
    frame_offset: int = 0
    q0: tuple = ()

    def __post_init__(self):
        if len(self.velocities) != len(self.poses) - 1:
            raise ValueError("SequenceRecord: need len(velocities) == len(poses) - 1")

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def p0(self) -> np.ndarray:
        return self.poses[0]

    @property
    def v0(self) -> np.ndarray:
        return self.velocities[0]

    def frame(self, t: int, cam: int = 0) -> np.ndarray:
        return self.frames[t, cam].astype(np.float64) / 255.0

    def static_image(self, cam: int = 0) -> np.ndarray:
        return self.static[cam].astype(np.float64) / 255.0


@dataclass
class DatasetManifest:
    scene: SceneSpec
    cameras: list
    sequences: list
    splits: dict = field(default_factory=lambda: {"train": [], "eval": []})

    def split(self, name: str) -> list:
        names = set(self.splits.get(name, []))
        return [s for s in self.sequences if s.name in names]


# ---------------------------------------------------------------- physics


def hill_potential(spec: SceneSpec, x):
    return spec.hill_a * x ** 4 - spec.hill_b * x ** 2


def hill_well(spec: SceneSpec) -> float:
    return float(np.sqrt(spec.hill_b / (2.0 * spec.hill_a)))


def _accel(spec: SceneSpec, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    g = spec.damping
    if spec.kind == "pendulum":
        return -(spec.gravity / spec.length) * np.sin(q) - g * qd
    if spec.kind == "bifurcating-hill":
        return -(4.0 * spec.hill_a * q ** 3 - 2.0 * spec.hill_b * q) - g * qd
    return -2.0 * spec.bowl_k * q - g * qd


def energy(spec: SceneSpec, q, qdot) -> np.ndarray:
    """Mechanical energy per unit mass along a trajectory (rows are time)."""
    q = np.asarray(q, dtype=np.float64)
    qdot = np.asarray(qdot, dtype=np.float64)
    kin = 0.5 * np.sum(qdot ** 2, axis=-1)
    if spec.kind == "pendulum":
        pot = spec.gravity / spec.length * (1.0 - np.cos(q[..., 0]))
    elif spec.kind == "bifurcating-hill":
        pot = hill_potential(spec, q[..., 0])
    else:
        pot = spec.bowl_k * np.sum(q ** 2, axis=-1)
    return kin + pot


def _check_initial(spec: SceneSpec, q0: np.ndarray) -> None:
    if spec.kind == "pendulum":
        ok = abs(q0[0]) < np.pi * 0.95
    elif spec.kind == "bifurcating-hill":
        ok = abs(q0[0]) <= 1.0
    else:
        ok = float(np.linalg.norm(q0)) <= 1.0
    if not ok or not np.all(np.isfinite(q0)):
        raise ValueError(f"simulate_scene: initial condition {q0.tolist()} outside the {spec.kind} scene bounds")


def poses_from_q(spec: SceneSpec, q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(q)
    if spec.kind == "pendulum":
        th = q[:, 0]
        x = spec.length * np.sin(th)
        y = spec.pivot_y - spec.length * np.cos(th)
        return np.stack([x, y, np.full_like(x, spec.ball_depth)], axis=1)
    if spec.kind == "bifurcating-hill":
        x = q[:, 0]
        y = spec.hill_base + spec.hill_scale * hill_potential(spec, x) + spec.ball_radius
        return np.stack([x, y], axis=1)
    x, z = q[:, 0], q[:, 1]
    y = -0.35 + spec.bowl_curvature * (x ** 2 + z ** 2) + spec.ball_radius
    return np.stack([x, y, spec.ball_depth + z], axis=1)


def simulate_scene(spec: SceneSpec, q0, qdot0=None) -> Motion:
    """RK4-integrate the scene's equation of motion and sample it at frame times.

    ``q0``/``qdot0`` are generalized coordinates: pendulum angle, hill
    abscissa, or bowl (x, z) offset.  Internal step is ``frame_dt / substeps``.
    """
    dim = 2 if spec.kind == "oscillating-ball" else 1
    q = np.asarray(q0, dtype=np.float64).reshape(dim).copy()
    qd = np.zeros(dim) if qdot0 is None else np.asarray(qdot0, dtype=np.float64).reshape(dim).copy()
    _check_initial(spec, q)
    h = spec.frame_dt / spec.substeps
    qs, qds = [q.copy()], [qd.copy()]
    for _ in range(spec.n_frames - 1):
        for _ in range(spec.substeps):
            k1q, k1v = qd, _accel(spec, q, qd)
            k2q, k2v = qd + 0.5 * h * k1v, _accel(spec, q + 0.5 * h * k1q, qd + 0.5 * h * k1v)
            k3q, k3v = qd + 0.5 * h * k2v, _accel(spec, q + 0.5 * h * k2q, qd + 0.5 * h * k2v)
            k4q, k4v = qd + h * k3v, _accel(spec, q + h * k3q, qd + h * k3v)
            q = q + (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
            qd = qd + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        qs.append(q.copy())
        qds.append(qd.copy())
    qs, qds = np.array(qs), np.array(qds)
    return Motion(qs, qds, poses_from_q(spec, qs))


def velocities_from_poses(poses: np.ndarray) -> np.ndarray:
    return poses[1:] - poses[:-1]


# ---------------------------------------------------------------- cameras + rendering


def scene_cameras(spec: SceneSpec) -> list[Camera]:
    target = np.array([0.0, 0.0, 0.0])
    if spec.rig == "single":
        eyes = [np.array([0.0, 0.0, 4.0])]
    else:
        eyes = [np.array([x, y, 4.0]) for y in (0.8, 0.0, -0.8) for x in (-0.8, 0.0, 0.8)]
    return [
        Camera(look_at(eye, target), spec.focal, spec.image_size, spec.image_size, spec.near, spec.far)
        for eye in eyes
    ]


def _wall_color(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    s = np.clip((y + 1.4) / 2.8, 0.0, 1.0)[..., None]
    top = np.array([0.55, 0.72, 0.92])
    bottom = np.array([0.93, 0.9, 0.82])
    col = s * top + (1.0 - s) * bottom
    if spec.kind == "bifurcating-hill":
        ground = spec.hill_base + spec.hill_scale * hill_potential(spec, x)
        under = (y < ground)[..., None]
        shade = np.clip(0.5 + 0.3 * (y - ground), 0.2, 0.6)[..., None]
        green = np.concatenate([0.25 + 0.2 * shade, 0.45 + 0.3 * shade, 0.25 + 0.1 * shade], axis=-1)
        col = np.where(under, green, col)
    elif spec.kind == "oscillating-ball":
        rim = -0.35 + spec.bowl_curvature * x ** 2
        col = np.where((y < rim)[..., None], np.array([0.72, 0.6, 0.45]), col)
    else:
        col = np.where((y < -1.0)[..., None], np.array([0.6, 0.6, 0.62]), col)
    return col


def _pose_to_world(spec: SceneSpec, pose) -> np.ndarray | None:
    if pose is None:
        return None
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-1] == 2:
        return np.array([pose[0], pose[1], spec.ball_depth])
    return pose


def render_frame(spec: SceneSpec, camera: Camera, pose) -> np.ndarray:
    """Ray-cast the ball (flat shaded) over the static backdrop; 2x2 supersampled, uint8."""
    H, W = camera.height, camera.width
    offs = (0.25, 0.75)
    acc = np.zeros((H, W, 3))
    center = _pose_to_world(spec, pose)
    r = spec.ball_radius
    for oy in offs:
        for ox in offs:
            o, d = camera.rays_grid(ox, oy)
            # backdrop plane z = 0
            t_wall = -o[..., 2] / d[..., 2]
            hit = o + t_wall[..., None] * d
            col = _wall_color(spec, hit[..., 0], hit[..., 1])
            if center is not None:
                oc = o - center
                b = np.sum(oc * d, axis=-1)
                c = np.sum(oc * oc, axis=-1) - r * r
                disc = b * b - c
                t_ball = -b - np.sqrt(np.maximum(disc, 0.0))
                ball = (disc >= 0) & (t_ball > 0) & (t_ball < t_wall)
                col = np.where(ball[..., None], np.asarray(spec.ball_color), col)
            acc += col
    img = acc / 4.0
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def project_point(camera: Camera, point) -> np.ndarray:
    """Pixel coordinates (u, v) of a world point (continuous, pixel centers at +0.5)."""
    R = camera.pose[:, :3]
    t = camera.pose[:, 3]
    pc = R.T @ (np.asarray(point, dtype=np.float64) - t)
    u = camera.width / 2.0 + camera.focal * pc[0] / -pc[2]
    v = camera.height / 2.0 - camera.focal * pc[1] / -pc[2]
    return np.array([u, v])


def make_sequence(spec: SceneSpec, q0, qdot0=None, name: str = "seq") -> SequenceRecord:
    motion = simulate_scene(spec, q0, qdot0)
    cams = scene_cameras(spec)
    frames = np.stack([
        np.stack([render_frame(spec, cam, p) for cam in cams]) for p in motion.poses
    ])
    static = np.stack([render_frame(spec, cam, None) for cam in cams])
    q0 = tuple(float(v) for v in np.atleast_1d(q0))
    return SequenceRecord(frames, list(range(len(cams))), motion.poses,
                          velocities_from_poses(motion.poses), static, name=name, q0=q0)


def make_subsequences(seq: SequenceRecord, k: int = 25) -> list[SequenceRecord]:
    """Sub-sequence ``j`` starts at frame ``j``: ``(p0, v0) = (p_j, p_{j+1} - p_j)``."""
    if k < 1 or k > seq.n_frames - 1:
        raise ValueError(f"make_subsequences: k={k} must be in [1, {seq.n_frames - 1}]")
    return [
        SequenceRecord(seq.frames[j:], seq.camera_ids, seq.poses[j:], seq.velocities[j:], seq.static,
                       name=f"{seq.name}/{j}", frame_offset=seq.frame_offset + j, q0=seq.q0)
        for j in range(k)
    ]


# ---------------------------------------------------------------- default datasets


DEFAULT_INITIALS = {
    "pendulum": [(0.9, 0.0)],
    "bifurcating-hill": [
        (-0.30, 0.0), (-0.20, 0.0), (-0.12, 0.0), (-0.06, 0.2),
        (0.06, -0.2), (0.12, 0.0), (0.20, 0.0), (0.30, 0.0),
        (-0.16, 0.0),
    ],
    "oscillating-ball": [
        ((0.2 + 0.04 * i) * np.cos(0.7 * i), (0.2 + 0.04 * i) * np.sin(0.7 * i)) for i in range(17)
    ],
}


def generate_dataset(spec: SceneSpec, initials=None, n_eval: int | None = None) -> DatasetManifest:
    """Simulate and render every initial condition; the last ``n_eval`` form the eval split."""
    if initials is None:
        initials = DEFAULT_INITIALS[spec.kind]
    if n_eval is None:
        n_eval = 0 if spec.kind == "pendulum" else 1
    seqs = []
    for i, init in enumerate(initials):
        if spec.kind == "oscillating-ball":
            q0, qd0 = np.asarray(init, dtype=np.float64), None
        else:
            q0, qd0 = init[0], init[1]
        seqs.append(make_sequence(spec, q0, qd0, name=f"seq_{i:03d}"))
    names = [s.name for s in seqs]
    split = {"train": names[: len(names) - n_eval], "eval": names[len(names) - n_eval:]}
    return DatasetManifest(spec, scene_cameras(spec), seqs, split)


# ---------------------------------------------------------------- file formats


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[..., :3]).tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read image ({exc})") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos:pos + W * H * 3]
    if len(body) != W * H * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).copy()


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img).save(path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_pose_csv(path: Path, seq: SequenceRecord) -> None:
    lines = ["t,px,py,pz,vx,vy,vz"]
    for t in range(seq.n_frames):
        p = list(seq.poses[t]) + [0.0] * (3 - seq.poses.shape[1])
        if t < seq.n_frames - 1:
            v = list(seq.velocities[t]) + [0.0] * (3 - seq.velocities.shape[1])
            vtxt = ",".join(repr(float(x)) for x in v)
        else:
            vtxt = ",,"
        lines.append(f"{t}," + ",".join(repr(float(x)) for x in p) + "," + vtxt)
    path.write_text("\n".join(lines) + "\n")


def _read_pose_csv(path: Path, pose_dim: int) -> tuple[np.ndarray, np.ndarray]:
    try:
        lines = path.read_text().strip().splitlines()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read pose file ({exc})") from exc
    if not lines or lines[0].strip() != "t,px,py,pz,vx,vy,vz":
        raise DatasetError(f"{path}: bad pose CSV header")
    poses, vels = [], []
    try:
        for i, line in enumerate(lines[1:]):
            cols = line.split(",")
            if len(cols) != 7 or int(cols[0]) != i:
                raise ValueError(f"row {i + 1}")
            poses.append([float(c) for c in cols[1:4]][:pose_dim])
            if cols[4]:
                vels.append([float(c) for c in cols[4:7]][:pose_dim])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed pose row ({exc})") from exc
    return np.array(poses).reshape(-1, pose_dim), np.array(vels).reshape(-1, pose_dim)


def camera_to_dict(cam: Camera, cid: int) -> dict:
    return {"id": cid, "pose": cam.pose.tolist(), "focal": cam.focal, "width": cam.width,
            "height": cam.height, "near": cam.near, "far": cam.far}


def camera_from_dict(d: dict) -> Camera:
    return Camera(np.array(d["pose"], dtype=np.float64), float(d["focal"]), int(d["width"]),
                  int(d["height"]), float(d["near"]), float(d["far"]))


def write_dataset(manifest: DatasetManifest, directory) -> Path:
    """Write frames (PPM), poses (CSV), cameras (JSON) and a checksummed manifest."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    checksums: dict[str, str] = {}

    def track(rel: str) -> None:
        checksums[rel] = _sha256(root / rel)

    cams = [camera_to_dict(c, i) for i, c in enumerate(manifest.cameras)]
    (root / "cameras.json").write_text(json.dumps({"cameras": cams}, indent=1))
    track("cameras.json")
    seq_entries = []
    for seq in manifest.sequences:
        sdir = root / seq.name
        sdir.mkdir(parents=True, exist_ok=True)
        for c in range(seq.frames.shape[1]):
            cdir = sdir / f"cam_{c:02d}"
            cdir.mkdir(exist_ok=True)
            for t in range(seq.n_frames):
                rel = f"{seq.name}/cam_{c:02d}/frame_{t:04d}.ppm"
                write_ppm(root / rel, seq.frames[t, c])
                track(rel)
            rel = f"{seq.name}/cam_{c:02d}/static.ppm"
            write_ppm(root / rel, seq.static[c])
            track(rel)
        rel = f"{seq.name}/poses.csv"
        _write_pose_csv(root / rel, seq)
        track(rel)
        seq_entries.append({
            "name": seq.name,
            "n_frames": seq.n_frames,
            "n_cameras": int(seq.frames.shape[1]),
            "camera_ids": list(seq.camera_ids),
            "q0": list(seq.q0),
            "p0": [float(x) for x in seq.poses[0]] if seq.n_frames else [],
            "v0": [float(x) for x in seq.velocities[0]] if seq.n_frames > 1 else [],
            "poses": rel,
        })
    doc = {
        "format_version": FORMAT_VERSION,
        "scene": manifest.scene.to_dict(),
        "cameras": "cameras.json",
        "sequences": seq_entries,
        "splits": manifest.splits,
        "checksums": checksums,
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, root / "manifest.json")
    return root


def read_dataset(directory) -> DatasetManifest:
    root = Path(directory)
    mpath = root / "manifest.json"
    try:
        doc = json.loads(mpath.read_text())
    except OSError as exc:
        raise DatasetError(f"{mpath}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: malformed JSON ({exc})") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: unsupported format_version {doc.get('format_version')!r}")
    checksums = doc.get("checksums", {})

    def verified(rel: str) -> Path:
        path = root / rel
        if not path.exists():
            raise DatasetError(f"{path}: missing dataset file")
        want = checksums.get(rel)
        if want is not None and _sha256(path) != want:
            raise DatasetError(f"{path}: checksum mismatch (file modified or corrupt)")
        return path

    spec = SceneSpec.from_dict(doc["scene"])
    cpath = verified(doc["cameras"])
    try:
        cameras = [camera_from_dict(c) for c in json.loads(cpath.read_text())["cameras"]]
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"{cpath}: malformed camera file ({exc})") from exc
    seqs = []
    for entry in doc["sequences"]:
        name = entry["name"]
        n, ncam = int(entry["n_frames"]), int(entry["n_cameras"])
        frames = np.stack([
            np.stack([read_ppm(verified(f"{name}/cam_{c:02d}/frame_{t:04d}.ppm")) for c in range(ncam)])
            for t in range(n)
        ]) if n else np.zeros((0, ncam, spec.image_size, spec.image_size, 3), np.uint8)
        static = np.stack([read_ppm(verified(f"{name}/cam_{c:02d}/static.ppm")) for c in range(ncam)])
        poses, vels = _read_pose_csv(verified(entry["poses"]), spec.pose_dim)
        if len(poses) != n:
            raise DatasetError(f"{root / entry['poses']}: expected {n} rows, found {len(poses)}")
        seqs.append(SequenceRecord(frames, entry["camera_ids"], poses, vels, static, name=name,
                                   q0=tuple(entry.get("q0", ()))))
    return DatasetManifest(spec, cameras, seqs, doc.get("splits", {"train": [], "eval": []}))
