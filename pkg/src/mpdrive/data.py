"""Traffic data: synthetic generation, CSV interchange, splits, datasets.

The synthetic benchmark is dense highway traffic produced by a
car-following model with distinct driver temperaments and gated random
lane changes. Driver class is never recorded, so a learner sees the same
history lead to different futures: the data is irreducibly stochastic,
with noise levels that depend on who is driving (heteroscedastic).

CSV interchange format, one row per car per frame:

    frame,car_id,x_m,y_m,length_m,width_m
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .environment import CarTrack, RoadGeometry, extract_action, render_frame
from .seeding import substream

__all__ = [
    "TrafficConfig", "generate_traffic", "write_traffic_csv", "load_traffic_csv",
    "split_cars", "Normalizer", "TransitionDataset", "Transition",
]

CSV_HEADER = ["frame", "car_id", "x_m", "y_m", "length_m", "width_m"]


# ---------------------------------------------------------------- generation


@dataclass(frozen=True)
class DriverClass:
    name: str
    v0_range: Tuple[float, float]   # desired speed, m/step
    headway: float                  # desired time headway, steps
    accel: float                    # max acceleration, m/step^2
    decel: float                    # comfortable deceleration, m/step^2
    min_gap: float                  # standstill bumper gap, m
    noise_std: float                # accel noise, m/step^2
    lane_change_prob: float         # per-step attempt probability


DRIVER_CLASSES = (
    DriverClass("cautious", (1.8, 2.3), 1.8, 0.040, 0.08, 2.5, 0.010, 0.004),
    DriverClass("normal", (2.3, 2.9), 1.4, 0.060, 0.10, 2.0, 0.020, 0.008),
    DriverClass("aggressive", (2.9, 3.6), 1.0, 0.080, 0.12, 1.5, 0.035, 0.016),
)
CLASS_PROBS = (0.30, 0.45, 0.25)


@dataclass(frozen=True)
class TrafficConfig:
    n_cars: int = 240
    min_speed: float = 0.05
    max_speed: float = 4.0
    spawn_prob: float = 0.35        # per lane per step, once the entry is clear
    spawn_clearance_m: float = 16.0
    lane_change_steps: int = 8
    max_frames: int = 20000


@dataclass
class _Car:
    cid: int
    cls: DriverClass
    v0: float
    lane: int
    x: float
    y: float
    v: float
    # lane-change state
    change_step: int = -1           # -1 when not changing
    y_from: float = 0.0
    y_to: float = 0.0
    target_lane: int = -1
    history: List[Tuple[int, float, float]] = field(default_factory=list)


def _idm_accel(car: _Car, gap: float, lead_v: float) -> float:
    c = car.cls
    s_star = c.min_gap + max(0.0, car.v * c.headway
                             + car.v * (car.v - lead_v) / (2.0 * np.sqrt(c.accel * c.decel)))
    return c.accel * (1.0 - (car.v / car.v0) ** 4 - (s_star / max(gap, 0.1)) ** 2)


def _leader(car: _Car, lane_cars: List[_Car]) -> Optional[_Car]:
    best = None
    for other in lane_cars:
        if other is car or other.x <= car.x:
            continue
        if best is None or other.x < best.x:
            best = other
    return best


def _follower(x: float, lane_cars: List[_Car]) -> Optional[_Car]:
    best = None
    for other in lane_cars:
        if other.x >= x:
            continue
        if best is None or other.x > best.x:
            best = other
    return best


def generate_traffic(geom: RoadGeometry, cfg: TrafficConfig = TrafficConfig(),
                     seed: int = 0) -> Dict[int, CarTrack]:
    """Simulate ``cfg.n_cars`` through the road segment; return their tracks."""
    rng = substream(seed, "traffic")
    active: List[_Car] = []
    done: List[_Car] = []
    spawned = 0
    frame = 0
    L = geom.car_length_m

    while (spawned < cfg.n_cars or active) and frame < cfg.max_frames:
        by_lane: Dict[int, List[_Car]] = {i: [] for i in range(geom.n_lanes)}
        for car in active:
            by_lane[car.lane].append(car)
            if 0 <= car.change_step and car.change_step < cfg.lane_change_steps // 2:
                by_lane[car.target_lane].append(car)  # claim both lanes early in a change

        # spawning: one attempt per lane per frame while the entry is clear
        if spawned < cfg.n_cars:
            for lane in range(geom.n_lanes):
                if spawned >= cfg.n_cars:
                    break
                rear = min((c.x for c in by_lane[lane]), default=np.inf)
                if rear > cfg.spawn_clearance_m and rng.random() < cfg.spawn_prob:
                    ci = rng.choice(len(DRIVER_CLASSES), p=CLASS_PROBS)
                    cls = DRIVER_CLASSES[ci]
                    v0 = rng.uniform(*cls.v0_range)
                    car = _Car(spawned, cls, v0, lane, 0.0, geom.lane_center(lane),
                               v0 * rng.uniform(0.6, 0.9))
                    active.append(car)
                    by_lane[lane].append(car)
                    spawned += 1

        # lane-change decisions before motion
        for car in active:
            if car.change_step >= 0 or rng.random() >= car.cls.lane_change_prob:
                continue
            options = [ln for ln in (car.lane - 1, car.lane + 1) if 0 <= ln < geom.n_lanes]
            rng.shuffle(options)
            for ln in options:
                lead = _leader(car, by_lane[ln])
                lag = _follower(car.x, by_lane[ln])
                lead_ok = lead is None or lead.x - car.x - L > car.cls.min_gap + car.v * car.cls.headway
                lag_ok = lag is None or car.x - lag.x - L > lag.cls.min_gap + lag.v * lag.cls.headway
                if lead_ok and lag_ok:
                    car.change_step = 0
                    car.target_lane = ln
                    car.y_from, car.y_to = car.y, geom.lane_center(ln)
                    by_lane[ln].append(car)
                    break

        # longitudinal dynamics: respond to the nearest leader in every lane
        # the car currently claims, like a merging human covering both gaps
        new_v = {}
        for car in active:
            lanes = {car.lane}
            if car.change_step >= 0:
                lanes.add(car.target_lane)
            acc = car.cls.accel * (1.0 - (car.v / car.v0) ** 4)
            gap_cap = np.inf
            for ln in lanes:
                lead = _leader(car, by_lane[ln])
                if lead is not None:
                    gap = lead.x - car.x - L
                    acc = min(acc, _idm_accel(car, gap, lead.v))
                    gap_cap = min(gap_cap, max(gap - 0.3, cfg.min_speed))
            acc += rng.normal(0.0, car.cls.noise_std)
            acc = float(np.clip(acc, -3.0 * car.cls.decel, car.cls.accel + 0.05))
            v = float(np.clip(car.v + acc, cfg.min_speed, cfg.max_speed))
            new_v[car.cid] = min(v, gap_cap)  # hard no-overrun guard

        # motion + recording
        still_active = []
        for car in active:
            car.v = new_v[car.cid]
            car.x += car.v
            if car.change_step >= 0:
                car.change_step += 1
                k = car.change_step / cfg.lane_change_steps
                car.y = car.y_from + (car.y_to - car.y_from) * 0.5 * (1.0 - np.cos(np.pi * k))
                if car.change_step >= cfg.lane_change_steps:
                    car.lane = car.target_lane
                    car.y = car.y_to
                    car.change_step = -1
            car.history.append((frame, car.x, car.y))
            if car.x >= geom.road_length_m:
                done.append(car)
            else:
                still_active.append(car)
        active = still_active
        frame += 1

    done.extend(active)  # frame cap hit: keep partial tracks
    tracks = {}
    for car in done:
        if len(car.history) < 3:
            continue
        h = np.asarray(car.history, dtype=np.float64)
        tracks[car.cid] = CarTrack(car.cid, h[:, 0].astype(np.int64), h[:, 1:3],
                                   geom.car_length_m, geom.car_width_m)
    return tracks


# ----------------------------------------------------------------------- CSV


def write_traffic_csv(path, cars: Dict[int, CarTrack]) -> None:
    rows = []
    for cid in sorted(cars):
        tr = cars[cid]
        for i in range(len(tr)):
            rows.append((int(tr.frames[i]), cid, tr.pos[i, 0], tr.pos[i, 1],
                         tr.length, tr.width))
    rows.sort()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for fr, cid, x, y, ln, wd in rows:
            w.writerow([fr, cid, f"{x:.6f}", f"{y:.6f}", f"{ln:.3f}", f"{wd:.3f}"])


def load_traffic_csv(path) -> Dict[int, CarTrack]:
    """Parse the interchange CSV; malformed input errors name the line."""
    per_car: Dict[int, List[Tuple[int, float, float, float, float]]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"bad header: expected {','.join(CSV_HEADER)}, "
                             f"got {','.join(header or ['<empty>'])}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"line {lineno}: expected 6 fields, got {len(row)}")
            try:
                fr, cid = int(row[0]), int(row[1])
                x, y, ln, wd = (float(v) for v in row[2:])
            except ValueError as e:
                raise ValueError(f"line {lineno}: {e}") from None
            if not all(np.isfinite(v) for v in (x, y, ln, wd)):
                raise ValueError(f"line {lineno}: non-finite coordinate")
            per_car.setdefault(cid, []).append((fr, x, y, ln, wd))

    tracks = {}
    for cid, rows in per_car.items():
        rows.sort()
        frames = np.array([r[0] for r in rows], dtype=np.int64)
        pos = np.array([(r[1], r[2]) for r in rows])
        lengths = {r[3] for r in rows}
        widths = {r[4] for r in rows}
        if len(lengths) > 1 or len(widths) > 1:
            raise ValueError(f"car {cid}: inconsistent dimensions across rows")
        tracks[cid] = CarTrack(cid, frames, pos, lengths.pop(), widths.pop())
    return tracks


# -------------------------------------------------------------------- splits


def split_cars(car_ids: Sequence[int], seed: int,
               fractions=(0.8, 0.1, 0.1)) -> Dict[str, List[int]]:
    """Deterministic car-level split; a car's frames never cross splits."""
    ids = sorted(car_ids)
    substream(seed, "split").shuffle(ids)
    n = len(ids)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    return {"train": sorted(ids[:n_train]),
            "val": sorted(ids[n_train:n_train + n_val]),
            "test": sorted(ids[n_train + n_val:])}


# ------------------------------------------------------------- normalization


@dataclass
class Normalizer:
    """Affine statistics for state images, speeds, and actions.

    Standard deviations are floored so flat channels cannot blow up the
    normalized values.
    """

    img_mean: np.ndarray    # (3,)
    img_std: np.ndarray     # (3,)
    speed_mean: float
    speed_std: float
    action_mean: np.ndarray  # (2,)
    action_std: np.ndarray   # (2,)

    FLOOR = 0.01

    @classmethod
    def fit(cls, grids: np.ndarray, speeds: np.ndarray, actions: np.ndarray) -> "Normalizer":
        g = grids.reshape(-1, 3, grids.shape[-2], grids.shape[-1])
        return cls(
            img_mean=g.mean(axis=(0, 2, 3)),
            img_std=np.maximum(g.std(axis=(0, 2, 3)), cls.FLOOR),
            speed_mean=float(np.mean(speeds)),
            speed_std=float(max(np.std(speeds), cls.FLOOR)),
            action_mean=actions.mean(axis=0),
            action_std=np.maximum(actions.std(axis=0), cls.FLOOR),
        )

    def norm_img(self, g: np.ndarray) -> np.ndarray:
        shape = (3, 1, 1) if g.ndim == 3 else (1,) * (g.ndim - 3) + (3, 1, 1)
        return (g - self.img_mean.reshape(shape)) / self.img_std.reshape(shape)

    def norm_speed(self, s):
        return (s - self.speed_mean) / self.speed_std

    def norm_action(self, a: np.ndarray) -> np.ndarray:
        return (a - self.action_mean) / self.action_std

    def denorm_action(self, a: np.ndarray) -> np.ndarray:
        return a * self.action_std + self.action_mean

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {
            "norm.img_mean": self.img_mean, "norm.img_std": self.img_std,
            "norm.speed": np.array([self.speed_mean, self.speed_std]),
            "norm.action_mean": self.action_mean, "norm.action_std": self.action_std,
        }

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "Normalizer":
        return cls(img_mean=state["norm.img_mean"], img_std=state["norm.img_std"],
                   speed_mean=float(state["norm.speed"][0]),
                   speed_std=float(state["norm.speed"][1]),
                   action_mean=state["norm.action_mean"],
                   action_std=state["norm.action_std"])


# ------------------------------------------------------------------- dataset


@dataclass
class Transition:
    """One training sample: m frames of context, then T action/target pairs."""

    grids: np.ndarray          # (m, 3, H, W)
    speeds: np.ndarray         # (m,)
    actions: np.ndarray        # (T, 2)
    target_grids: np.ndarray   # (T, 3, H, W)
    target_speeds: np.ndarray  # (T,)
    car_id: int
    t: int


class TransitionDataset:
    """Lazy transition view over car tracks.

    A sample anchored at time t needs position t-m (for the oldest
    context speed) through t+T (for the last action), so a track of
    length L yields L - m - T samples. Rendered frames are cached per
    car on first touch.
    """

    def __init__(self, cars: Dict[int, CarTrack], geom: RoadGeometry,
                 history: int = 4, unroll: int = 1):
        if history < 1 or unroll < 1:
            raise ValueError("history and unroll must be positive")
        self.cars = cars
        self.geom = geom
        self.m = history
        self.T = unroll
        self.index: List[Tuple[int, int]] = []
        self.n_skipped = 0
        for cid in sorted(cars):
            tr = cars[cid]
            vel = np.diff(tr.pos, axis=0)
            ok = np.linalg.norm(vel, axis=1) > 1e-9
            for t in range(self.m, len(tr) - self.T):
                # every velocity in [t-m+1, t+T] must be a real displacement
                if np.all(ok[t - self.m:t + self.T]):
                    self.index.append((cid, t))
                else:
                    self.n_skipped += 1
        self._grid_cache: Dict[int, np.ndarray] = {}
        self._action_cache: Dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.index)

    # -- rendering ---------------------------------------------------------

    def _grids_for(self, cid: int) -> np.ndarray:
        if cid not in self._grid_cache:
            tr = self.cars[cid]
            out = np.empty((len(tr), 3, self.geom.grid_h, self.geom.grid_w),
                           dtype=np.float32)
            for i in range(len(tr)):
                nb = self._neighbors(cid, int(tr.frames[i]))
                out[i] = render_frame(tr.pos[i], tr.heading(i), nb, self.geom)
            self._grid_cache[cid] = out
        return self._grid_cache[cid]

    def _neighbors(self, cid: int, frame: int) -> np.ndarray:
        out = []
        for other_id, tr in self.cars.items():
            if other_id == cid:
                continue
            i = frame - int(tr.frames[0])
            if 0 <= i < len(tr):
                out.append((tr.pos[i, 0], tr.pos[i, 1], tr.length, tr.width))
        return np.asarray(out, dtype=np.float64).reshape(-1, 4)

    def _actions_for(self, cid: int) -> np.ndarray:
        if cid not in self._action_cache:
            pos = self.cars[cid].pos
            vel = np.diff(pos, axis=0)
            ok = np.linalg.norm(vel, axis=1) > 1e-9
            acts = np.zeros((len(pos) - 2, 2))
            for t in range(len(acts)):
                # standstill rows stay zero; the sample index never reads them
                if ok[t] and ok[t + 1]:
                    acts[t] = extract_action(vel[t], vel[t + 1])
            self._action_cache[cid] = acts
        return self._action_cache[cid]

    # -- samples -----------------------------------------------------------

    def sample(self, i: int) -> Transition:
        cid, t = self.index[i]
        tr = self.cars[cid]
        grids = self._grids_for(cid)
        speeds = np.linalg.norm(np.diff(tr.pos, axis=0), axis=1)  # speeds[j] = |p[j+1]-p[j]|
        acts = self._actions_for(cid)  # acts[j] maps v at j+1 to v at j+2
        m, T = self.m, self.T
        return Transition(
            grids=grids[t - m + 1:t + 1].astype(np.float64),
            speeds=speeds[t - m:t],
            actions=acts[t - 1:t + T - 1],
            target_grids=grids[t + 1:t + T + 1].astype(np.float64),
            target_speeds=speeds[t:t + T],
            car_id=cid, t=t)

    def batch(self, idxs: Sequence[int]) -> Transition:
        samples = [self.sample(i) for i in idxs]
        return Transition(
            grids=np.stack([s.grids for s in samples]),
            speeds=np.stack([s.speeds for s in samples]),
            actions=np.stack([s.actions for s in samples]),
            target_grids=np.stack([s.target_grids for s in samples]),
            target_speeds=np.stack([s.target_speeds for s in samples]),
            car_id=-1, t=-1)

    def fit_normalizer(self, seed: int = 0, n_frames: int = 512) -> Normalizer:
        rng = substream(seed, "normalizer")
        idxs = rng.choice(len(self.index), size=min(n_frames, len(self.index)),
                          replace=False)
        samples = [self.sample(int(i)) for i in idxs]
        return Normalizer.fit(
            np.concatenate([s.grids for s in samples]),
            np.concatenate([s.speeds for s in samples]),
            np.concatenate([s.actions for s in samples]))
