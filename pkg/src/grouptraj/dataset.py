"""Trajectory tables, group labels, scene windows and synthetic crowds.

File formats
------------
Trajectory file
    whitespace separated ``frame_id ped_id x y``, one record per line,
    ``#`` starts a comment line.  Frame and pedestrian ids may be written as
    floats (``780.0``) as in the public ETH/UCY releases.
Group label file
    whitespace separated ``ped_id group_id``.
Synthetic spec
    ``key=value`` lines, see :class:`SyntheticCrowdSpec`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .group_graph import GroupAssignment

__all__ = [
    "DataFormatError",
    "RawTrajectoryTable",
    "Scene",
    "RelativeRepresentation",
    "SyntheticCrowdSpec",
    "load_trajectory_file",
    "write_trajectory_file",
    "load_group_labels",
    "write_group_labels",
    "heuristic_group_labels",
    "label_table_groups",
    "extract_scenes",
    "compute_relative",
    "generate_synthetic_crowd",
    "parse_key_values",
    "load_synthetic_spec",
    "synthetic_scenes",
]


class DataFormatError(ValueError):
    pass


# --------------------------------------------------------------------- tables


@dataclass(frozen=True)
class RawTrajectoryTable:
    """Records sorted by ``(ped_id, frame_id)``; ``xy`` in meters."""

    frames: np.ndarray
    peds: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        peds = np.asarray(self.peds, dtype=np.int64).reshape(-1)
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if not (frames.size == peds.size == xy.shape[0]):
            raise ValueError("frames, peds and xy lengths differ")
        order = np.lexsort((frames, peds))
        frames, peds, xy = frames[order], peds[order], xy[order]
        same = (peds[1:] == peds[:-1]) & (frames[1:] == frames[:-1])
        if same.any():
            i = int(np.flatnonzero(same)[0])
            raise DataFormatError(f"duplicate record for frame {frames[i]}, ped {peds[i]}")
        for arr in (frames, peds, xy):
            arr.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "peds", peds)
        object.__setattr__(self, "xy", xy)

    def __len__(self) -> int:
        return int(self.frames.size)

    def ped_ids(self) -> np.ndarray:
        return np.unique(self.peds)

    def frame_ids(self) -> np.ndarray:
        return np.unique(self.frames)

    def grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Dense ``(ped_ids, frame_ids, present[P, F], coords[P, F, 2])``; absent cells are NaN."""
        ped_ids, pi = np.unique(self.peds, return_inverse=True)
        frame_ids, fi = np.unique(self.frames, return_inverse=True)
        present = np.zeros((ped_ids.size, frame_ids.size), dtype=bool)
        coords = np.full((ped_ids.size, frame_ids.size, 2), np.nan)
        present[pi, fi] = True
        coords[pi, fi] = self.xy
        return ped_ids, frame_ids, present, coords


def load_trajectory_file(path) -> RawTrajectoryTable:
    path = Path(path)
    frames, peds, xy = [], [], []
    first_line: dict[tuple[int, int], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            try:
                f, p, x, y = (float(v) for v in parts)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field in {text!r}") from None
            if f != int(f) or p != int(p):
                raise DataFormatError(f"{path}:{lineno}: frame and ped ids must be integers")
            key = (int(f), int(p))
            if key in first_line:
                raise DataFormatError(
                    f"{path}: duplicate (frame {key[0]}, ped {key[1]}) on lines {first_line[key]} and {lineno}"
                )
            first_line[key] = lineno
            frames.append(key[0])
            peds.append(key[1])
            xy.append((x, y))
    if not frames:
        raise DataFormatError(f"{path}: no trajectory records")
    return RawTrajectoryTable(np.array(frames), np.array(peds), np.array(xy))


def write_trajectory_file(path, table: RawTrajectoryTable) -> None:
    """Write the canonical form: sorted by frame then ped, tab separated, shortest round-trip floats."""
    order = np.lexsort((table.peds, table.frames))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in order:
            x, y = table.xy[i]
            fh.write(f"{table.frames[i]}\t{table.peds[i]}\t{float(x)!r}\t{float(y)!r}\n")


def load_group_labels(path, table: RawTrajectoryTable) -> GroupAssignment:
    """Read ``ped_id group_id`` pairs; returned partition is indexed like ``table.ped_ids()``."""
    path = Path(path)
    labels: dict[int, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            try:
                ped, grp = (int(float(v)) for v in parts)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: expected 'ped_id group_id', got {text!r}") from None
            if ped in labels and labels[ped] != grp:
                raise DataFormatError(f"{path}:{lineno}: ped {ped} labeled twice with different groups")
            labels[ped] = grp
    ids = table.ped_ids()
    missing = [int(p) for p in ids if int(p) not in labels]
    if missing:
        raise DataFormatError(f"{path}: no group label for ped ids {missing}")
    return GroupAssignment.from_labels([labels[int(p)] for p in ids])


def write_group_labels(path, ped_ids, groups: GroupAssignment) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pid, g in zip(ped_ids, groups.group_of):
            fh.write(f"{int(pid)}\t{int(g)}\n")


# ------------------------------------------------------------ heuristic labels


def _components(adjacency: np.ndarray, min_cluster: int) -> GroupAssignment:
    _, comp = connected_components(adjacency, directed=False)
    sizes = np.bincount(comp)
    labels = [("c", c) if sizes[c] >= min_cluster else ("s", i) for i, c in enumerate(comp)]
    return GroupAssignment.from_labels(labels)


def heuristic_group_labels(
    observed: np.ndarray,
    dt: float = 0.4,
    eps_pos: float = 2.0,
    eps_vel: float = 0.5,
    min_cluster: int = 2,
) -> GroupAssignment:
    """Cluster pedestrians of one window by last position and mean velocity.

    Two pedestrians are linked when their last observed positions are within
    ``eps_pos`` meters and their mean velocities within ``eps_vel`` m/s;
    groups are the connected components of that graph.  Components smaller
    than ``min_cluster`` are split into singletons.
    """
    obs = np.asarray(observed, dtype=np.float64)
    n, t = obs.shape[:2]
    pos = obs[:, -1]
    vel = (obs[:, -1] - obs[:, 0]) / (max(t - 1, 1) * dt)
    dpos = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    dvel = np.linalg.norm(vel[:, None] - vel[None], axis=-1)
    return _components((dpos <= eps_pos) & (dvel <= eps_vel), min_cluster)


def label_table_groups(
    table: RawTrajectoryTable,
    dt: float = 0.4,
    eps_pos: float = 2.0,
    eps_vel: float = 0.5,
    min_cluster: int = 2,
) -> GroupAssignment:
    """File-level version of :func:`heuristic_group_labels`.

    Each pair is compared over the frames both pedestrians share (at least
    two needed); ``dt`` is the time between consecutive frame ids in the file.
    """
    _, _, present, coords = table.grid()
    n = present.shape[0]
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n):
        adj[i, i] = True
        for j in range(i + 1, n):
            shared = np.flatnonzero(present[i] & present[j])
            if shared.size < 2:
                continue
            a, b = shared[0], shared[-1]
            span = (b - a) * dt
            vi = (coords[i, b] - coords[i, a]) / span
            vj = (coords[j, b] - coords[j, a]) / span
            if np.linalg.norm(coords[i, b] - coords[j, b]) <= eps_pos and np.linalg.norm(vi - vj) <= eps_vel:
                adj[i, j] = adj[j, i] = True
    return _components(adj, min_cluster)


# --------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class Scene:
    """``N`` pedestrians present for all ``t_obs + horizon`` frames of a window."""

    ped_ids: np.ndarray
    positions: np.ndarray
    groups: GroupAssignment
    t_obs: int = 8
    horizon: int = 12
    start_frame: int = 0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[1] != self.t_obs + self.horizon or pos.shape[2] != 2:
            raise ValueError(f"positions must be N x {self.t_obs + self.horizon} x 2, got {pos.shape}")
        if not np.isfinite(pos).all():
            raise ValueError("scene positions must be finite")
        if self.groups.n_peds != pos.shape[0]:
            raise ValueError("group assignment does not cover the scene's pedestrians")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "ped_ids", np.asarray(self.ped_ids))

    @property
    def n_peds(self) -> int:
        return self.positions.shape[0]

    @property
    def observed(self) -> np.ndarray:
        return self.positions[:, : self.t_obs]

    @property
    def future(self) -> np.ndarray:
        return self.positions[:, self.t_obs :]

    @property
    def last_observed(self) -> np.ndarray:
        return self.positions[:, self.t_obs - 1]

    def permute(self, perm) -> "Scene":
        perm = np.asarray(perm)
        return Scene(
            self.ped_ids[perm], self.positions[perm], self.groups.permute(perm), self.t_obs, self.horizon, self.start_frame
        )


def extract_scenes(
    table: RawTrajectoryTable,
    labels: GroupAssignment,
    t_obs: int = 8,
    horizon: int = 12,
    stride: int = 1,
) -> list[Scene]:
    """Slide a ``t_obs + horizon`` window over the distinct frame ids."""
    ped_ids, frame_ids, present, coords = table.grid()
    if labels.n_peds != ped_ids.size:
        raise ValueError(f"labels cover {labels.n_peds} pedestrians, table has {ped_ids.size}")
    length = t_obs + horizon
    scenes = []
    for start in range(0, frame_ids.size - length + 1, stride):
        sel = np.flatnonzero(present[:, start : start + length].all(axis=1))
        if sel.size == 0:
            continue
        scenes.append(
            Scene(
                ped_ids[sel],
                coords[sel, start : start + length],
                labels.subset(sel),
                t_obs,
                horizon,
                int(frame_ids[start]),
            )
        )
    return scenes


@dataclass(frozen=True)
class RelativeRepresentation:
    x_rel: np.ndarray  # N x t_obs x 2
    p_rel: np.ndarray  # N x N x 2
    future_rel: np.ndarray  # N x horizon x 2


def compute_relative(scene: Scene) -> RelativeRepresentation:
    pos = scene.positions
    disp = np.zeros_like(pos)
    disp[:, 1:] = pos[:, 1:] - pos[:, :-1]
    last = scene.last_observed
    p_rel = last[None, :, :] - last[:, None, :]
    return RelativeRepresentation(disp[:, : scene.t_obs].copy(), p_rel, disp[:, scene.t_obs :].copy())


# ------------------------------------------------------------------ synthetic


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise DataFormatError(f"line {lineno}: key {key!r} given twice")
        out[key] = value
    return out


def _floats(value: str) -> list[float]:
    return [float(v) for v in value.replace(",", " ").split()]


@dataclass
class SyntheticCrowdSpec:
    """Recipe for a crowd of straight-walking groups.

    Group centers are drawn uniformly in an ``arena`` wide square (redrawn
    until no two pedestrians start closer than ``spacing``) unless
    ``origins`` lists them explicitly as ``x0,y0,x1,y1,...``.  Each group shares one heading (degrees, counter-clockwise from +x) and
    one speed (m/s); members stand side by side ``spacing`` meters apart,
    perpendicular to the heading.  Every step adds independent
    ``N(0, noise^2)`` jitter to each pedestrian's displacement.  With
    ``episodes > 1`` the file holds that many independent crowds one after
    another, each with fresh pedestrian ids.
    """

    group_sizes: list[int] = field(default_factory=lambda: [2, 2])
    headings: list[float] | None = None
    speeds: list[float] | None = None
    speed_min: float = 0.8
    speed_max: float = 1.4
    noise: float = 0.0
    seed: int = 0
    n_frames: int = 20
    dt: float = 0.4
    spacing: float = 0.6
    arena: float = 8.0
    episodes: int = 1
    frame_step: int = 1
    origins: list[float] | None = None

    def __post_init__(self):
        if not self.group_sizes:
            raise ValueError("need at least one group")
        if any(int(s) < 1 for s in self.group_sizes):
            raise ValueError("group sizes must be positive")
        self.group_sizes = [int(s) for s in self.group_sizes]
        m = len(self.group_sizes)
        for name in ("headings", "speeds"):
            vals = getattr(self, name)
            if vals is not None and len(vals) != m:
                raise ValueError(f"{name} needs one value per group ({m}), got {len(vals)}")
        if self.origins is not None and len(self.origins) != 2 * m:
            raise ValueError(f"origins needs x,y per group ({2 * m} numbers), got {len(self.origins)}")
        speeds = self.speeds if self.speeds is not None else [self.speed_min, self.speed_max]
        if min(speeds) < 0 or self.speed_min > self.speed_max:
            raise ValueError("speeds must be non-negative with speed_min <= speed_max")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.spacing < 0.4:
            raise ValueError("group members must be at least 0.4 m apart")
        if self.n_frames < 1 or self.episodes < 1 or self.frame_step < 1 or self.dt <= 0:
            raise ValueError("n_frames, episodes, frame_step and dt must be positive")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "SyntheticCrowdSpec":
        known = {f.name for f in fields(cls)} | {"n_groups", "group_size"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise DataFormatError(f"unknown synthetic crowd keys: {unknown}")
        kw: dict = {}
        if "group_sizes" in values:
            kw["group_sizes"] = [int(v) for v in _floats(values["group_sizes"])]
        elif "n_groups" in values:
            n = int(values["n_groups"])
            if n < 1:
                raise ValueError("n_groups must be at least 1")
            kw["group_sizes"] = [int(values.get("group_size", 2))] * n
        for key in ("headings", "speeds", "origins"):
            if key in values:
                kw[key] = _floats(values[key])
        for key in ("speed_min", "speed_max", "noise", "dt", "spacing", "arena"):
            if key in values:
                kw[key] = float(values[key])
        for key in ("seed", "n_frames", "episodes", "frame_step"):
            if key in values:
                kw[key] = int(values[key])
        return cls(**kw)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            out[f.name] = ",".join(repr(x) for x in v) if isinstance(v, list) else repr(v)
        return out

    @property
    def n_peds(self) -> int:
        return sum(self.group_sizes)


def load_synthetic_spec(path) -> SyntheticCrowdSpec:
    return SyntheticCrowdSpec.from_mapping(parse_key_values(Path(path).read_text(encoding="utf-8")))


def _spawn(spec: SyntheticCrowdSpec, rng: np.random.Generator):
    m = len(spec.group_sizes)
    if spec.headings is None:
        headings = rng.uniform(0.0, 2 * np.pi, size=m)
    else:
        headings = np.radians(np.asarray(spec.headings, dtype=np.float64))
    if spec.speeds is None:
        speeds = rng.uniform(spec.speed_min, spec.speed_max, size=m)
    else:
        speeds = np.asarray(spec.speeds, dtype=np.float64)
    directions = np.stack([np.cos(headings), np.sin(headings)], axis=1)
    vel = np.repeat(speeds[:, None] * directions, spec.group_sizes, axis=0)
    if spec.origins is not None:
        start = _layout(spec, np.asarray(spec.origins, dtype=np.float64).reshape(m, 2), directions)
        _check_spawn(start)
        return start, vel
    # random centers are redrawn until no two pedestrians start closer than `spacing`
    for _ in range(_MAX_SPAWN_ATTEMPTS):
        start = _layout(spec, rng.uniform(-spec.arena / 2, spec.arena / 2, size=(m, 2)), directions)
        if _min_gap(start)[0] >= spec.spacing - 1e-12:
            return start, vel
    _check_spawn(start)
    return start, vel


_MAX_SPAWN_ATTEMPTS = 1000


def _layout(spec: SyntheticCrowdSpec, centers: np.ndarray, directions: np.ndarray) -> np.ndarray:
    start = []
    for g, n in enumerate(spec.group_sizes):
        normal = np.array([-directions[g, 1], directions[g, 0]])
        for j in range(n):
            start.append(centers[g] + (j - (n - 1) / 2) * spec.spacing * normal)
    return np.array(start)


def _min_gap(start: np.ndarray) -> tuple[float, int, int]:
    if len(start) < 2:
        return np.inf, 0, 0
    d = np.linalg.norm(start[:, None] - start[None], axis=-1) + np.eye(len(start)) * 1e9
    i, j = np.unravel_index(int(np.argmin(d)), d.shape)
    return float(d[i, j]), int(i), int(j)


def _check_spawn(start: np.ndarray) -> None:
    gap, i, j = _min_gap(start)
    if gap < 0.1:
        raise ValueError(f"spawn positions of pedestrians {i} and {j} overlap ({gap:.3f} m apart)")


def generate_synthetic_crowd(spec: SyntheticCrowdSpec) -> tuple[RawTrajectoryTable, GroupAssignment]:
    """Deterministic under ``spec.seed``; returned labels follow ``table.ped_ids()``."""
    rng = np.random.default_rng(spec.seed)
    frames, peds, xy, labels = [], [], [], []
    n = spec.n_peds
    for ep in range(spec.episodes):
        start, vel = _spawn(spec, rng)
        steps = np.broadcast_to(vel[:, None, :] * spec.dt, (n, spec.n_frames - 1, 2))
        if spec.noise > 0:
            steps = steps + rng.normal(0.0, spec.noise, size=steps.shape)
        traj = np.concatenate([start[:, None, :], start[:, None, :] + np.cumsum(steps, axis=1)], axis=1)
        base_frame = ep * spec.n_frames
        for i in range(n):
            pid = ep * n + i + 1
            frames.extend((base_frame + np.arange(spec.n_frames)) * spec.frame_step)
            peds.extend([pid] * spec.n_frames)
            xy.append(traj[i])
        labels.extend((ep, g) for g, size in enumerate(spec.group_sizes) for _ in range(size))
    table = RawTrajectoryTable(np.array(frames), np.array(peds), np.concatenate(xy))
    return table, GroupAssignment.from_labels(labels)


def synthetic_scenes(spec: SyntheticCrowdSpec, n_scenes: int, t_obs: int = 8, horizon: int = 12) -> list[Scene]:
    """``n_scenes`` independent single-window crowds drawn from ``spec``."""
    length = t_obs + horizon
    one = SyntheticCrowdSpec(**{**spec.__dict__, "n_frames": length, "episodes": n_scenes})
    table, labels = generate_synthetic_crowd(one)
    scenes = extract_scenes(table, labels, t_obs, horizon, stride=length)
    return [s for s in scenes if s.n_peds == spec.n_peds]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
