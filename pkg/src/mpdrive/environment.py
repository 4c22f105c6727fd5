"""Road world: kinematics, ego-centered rasterization, costs, replay env.

Positions are car centers in meters on a straight multi-lane road along
+x. Time is discrete; velocities are per-step displacement vectors, so a
"speed" of 2.0 means 2 meters per step. Actions are (delta_speed,
delta_angle) pairs in the ego frame, chosen so that action extraction
from logged positions and action application are exact inverses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "RoadGeometry", "extract_action", "apply_action", "actions_from_positions",
    "render_frame", "proximity_mask", "policy_cost", "eval_cost",
    "rectangles_collide", "CarTrack", "Observation", "ReplayEnv", "EpisodeResult",
    "run_episode", "evaluate_policy", "write_episode_csv",
]

PERP = np.array([[0.0, -1.0], [1.0, 0.0]])  # (x,y) -> (-y,x), left normal


@dataclass(frozen=True)
class RoadGeometry:
    """Static world and rasterization constants."""

    n_lanes: int = 4
    lane_width_m: float = 4.8
    road_length_m: float = 400.0
    grid_h: int = 39
    grid_w: int = 12
    resolution_m: float = 1.6
    car_length_m: float = 4.8
    car_width_m: float = 1.92
    # cost shaping
    k_safety: float = 1.5
    speed_ref: float = 2.0          # m/step at which the mask taper is k_safety car lengths
    lane_cost_weight: float = 0.2
    tau: float = 10.0               # smooth-max sharpness for training costs

    @property
    def road_width_m(self) -> float:
        return self.n_lanes * self.lane_width_m

    def lane_center(self, i: int) -> float:
        return (i + 0.5) * self.lane_width_m

    def lane_index(self, y: float) -> int:
        return int(np.clip(np.floor(y / self.lane_width_m), 0, self.n_lanes - 1))


# ---------------------------------------------------------------- kinematics


def extract_action(v: np.ndarray, v_next: np.ndarray) -> np.ndarray:
    """Action taking per-step velocity v to v_next.

    delta_speed is the change in displacement magnitude; delta_angle is the
    lateral component of the velocity change, measured along the left
    normal of the current heading.
    """
    v = np.asarray(v, dtype=np.float64)
    v_next = np.asarray(v_next, dtype=np.float64)
    r = np.linalg.norm(v)
    if r <= 0.0:
        raise ValueError("cannot extract an action from a standstill velocity")
    d_speed = np.linalg.norm(v_next) - r
    d_angle = float((v_next - v) @ (PERP @ v)) / r
    return np.array([d_speed, d_angle])


def apply_action(v: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Next per-step velocity under (delta_speed, delta_angle).

    Exact inverse of extract_action whenever the next velocity keeps a
    positive component along the current heading.
    """
    v = np.asarray(v, dtype=np.float64)
    d_speed, d_angle = float(action[0]), float(action[1])
    r = np.linalg.norm(v)
    if r <= 0.0:
        raise ValueError("cannot apply an action at standstill")
    u = v / r
    new_speed = r + d_speed
    rad = new_speed * new_speed - d_angle * d_angle
    if rad < 0.0:
        raise ValueError(f"action ({d_speed:.3f}, {d_angle:.3f}) exceeds turning limit "
                         f"at speed {r:.3f}")
    alpha = np.sqrt(rad)
    return alpha * u + d_angle * (PERP @ u)


def actions_from_positions(pos: np.ndarray) -> np.ndarray:
    """Per-step actions for a logged trajectory of positions (L, 2).

    Row t holds the action applied at time t+1 (mapping velocity v_{t+1} =
    p_{t+1}-p_t onto v_{t+2}); output has L-2 rows.
    """
    pos = np.asarray(pos, dtype=np.float64)
    vel = np.diff(pos, axis=0)
    out = np.empty((len(pos) - 2, 2))
    for t in range(len(out)):
        out[t] = extract_action(vel[t], vel[t + 1])
    return out


# --------------------------------------------------------------- rasterizing


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Per-cell overlap of interval [lo, hi] with unit cells 0..n-1."""
    idx = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, idx + 1.0) - np.maximum(lo, idx), 0.0, 1.0)


def _coverage_many(lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi[:, None], idx + 1.0) - np.maximum(lo[:, None], idx), 0.0, 1.0)


def render_frame(ego_pos: np.ndarray, ego_dir: np.ndarray,
                 neighbors: np.ndarray, geom: RoadGeometry) -> np.ndarray:
    """Rasterize one ego-centered state image of shape (3, H, W).

    Channels: 0 lane markings, 1 other cars, 2 ego. The image is rotated
    into the ego frame: up is the heading, right is to the driver's right.
    ``neighbors`` holds one row (x, y, length, width) per other car;
    rectangles are drawn axis-aligned in the ego frame, adequate while
    traffic stays near-parallel to the road.
    """
    H, W, res = geom.grid_h, geom.grid_w, geom.resolution_m
    grid = np.zeros((3, H, W))
    u = np.asarray(ego_dir, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu <= 0.0:
        raise ValueError("ego heading must be nonzero")
    u = u / nu
    right = np.array([u[1], -u[0]])
    p = np.asarray(ego_pos, dtype=np.float64)

    # lane boundaries: world lines y = c, drawn one pixel wide per row
    ux = max(u[0], 0.05)  # traffic flows along +x; guard the projection
    rows_f = (H / 2.0 - (np.arange(H) + 0.5)) * res
    for k in range(geom.n_lanes + 1):
        c = k * geom.lane_width_m
        lat = (u[1] * rows_f - (c - p[1])) / ux
        pc = W / 2.0 + lat / res
        cov = _coverage_many(pc - 0.5, pc + 0.5, W)
        grid[0] += cov

    # other cars, vectorized over all rows in view
    nb = np.asarray(neighbors, dtype=np.float64).reshape(-1, 4)
    if len(nb):
        d = nb[:, :2] - p
        f = d @ u
        lat = d @ right
        half_l = nb[:, 2] / 2.0
        half_w = nb[:, 3] / 2.0
        view = (np.abs(f) <= H / 2.0 * res + half_l) & (np.abs(lat) <= W / 2.0 * res + half_w)
        if view.any():
            f, lat, half_l, half_w = f[view], lat[view], half_l[view], half_w[view]
            row_lo = H / 2.0 - (f + half_l) / res
            row_hi = H / 2.0 - (f - half_l) / res
            col_lo = W / 2.0 + (lat - half_w) / res
            col_hi = W / 2.0 + (lat + half_w) / res
            rows = _coverage_many(row_lo, row_hi, H)
            cols = _coverage_many(col_lo, col_hi, W)
            grid[1] = np.einsum("nh,nw->hw", rows, cols)

    # ego rectangle sits at the image center by construction
    hl = geom.car_length_m / 2.0 / res
    hw = geom.car_width_m / 2.0 / res
    grid[2] = np.outer(_coverage(H / 2.0 - hl, H / 2.0 + hl, H),
                       _coverage(W / 2.0 - hw, W / 2.0 + hw, W))

    return np.clip(grid, 0.0, 1.0)


# --------------------------------------------------------------------- costs


def proximity_mask(speed: float, geom: RoadGeometry) -> np.ndarray:
    """Speed-scaled (H, W) cost mask centered on the ego.

    Value 1 over the ego footprint, linear taper to 0 with longitudinal
    reach growing with speed; pointwise nondecreasing in speed.
    """
    H, W, res = geom.grid_h, geom.grid_w, geom.resolution_m
    f = (H / 2.0 - (np.arange(H) + 0.5)) * res
    l = ((np.arange(W) + 0.5) - W / 2.0) * res
    v_hat = max(float(speed), 0.0) / geom.speed_ref
    taper_long = max(geom.k_safety * v_hat * geom.car_length_m, 1e-3)
    long_p = np.clip(1.0 - np.maximum(np.abs(f) - geom.car_length_m / 2.0, 0.0) / taper_long,
                     0.0, 1.0)
    # total lateral extent is one lane width: plateau over the car body,
    # taper reaching zero at lane_width/2 from center
    taper_lat = max((geom.lane_width_m - geom.car_width_m) / 2.0, 1e-3)
    lat_p = np.clip(1.0 - np.maximum(np.abs(l) - geom.car_width_m / 2.0, 0.0)
                    / taper_lat, 0.0, 1.0)
    return np.outer(long_p, lat_p)


def policy_cost(grids: Tensor, speeds: np.ndarray, geom: RoadGeometry) -> Tensor:
    """Differentiable per-sample cost of predicted state images.

    grids: Tensor (B, 3, H, W); speeds: plain array (B,), deliberately
    outside the graph so gradients shape the scene prediction rather than
    shrinking the mask. Returns Tensor (B,).
    """
    B = grids.shape[0]
    hw = geom.grid_h * geom.grid_w
    masks = np.stack([proximity_mask(s, geom) for s in np.asarray(speeds, dtype=np.float64)])
    m = Tensor(masks.reshape(B, 1, hw))
    flat = grids.reshape(B, 3, hw)
    lanes = ad.mul(flat.slice(1, 0, 1), m).reshape(B, hw)
    cars = ad.mul(flat.slice(1, 1, 2), m).reshape(B, hw)
    prox = ad.smooth_max(cars, geom.tau, axis=1)
    lane = ad.smooth_max(lanes, geom.tau, axis=1)
    return ad.add(prox, ad.mul(lane, Tensor(geom.lane_cost_weight)))


def eval_cost(grid: np.ndarray, speed: float, geom: RoadGeometry) -> Tuple[float, float]:
    """(proximity, lane) hard-max costs of one rendered state image."""
    mask = proximity_mask(speed, geom)
    return float((mask * grid[1]).max()), float((mask * grid[0]).max())


# ----------------------------------------------------------------- collision


def _corners(center, u, length, width):
    u = np.asarray(u, dtype=np.float64)
    u = u / np.linalg.norm(u)
    left = PERP @ u
    a = u * (length / 2.0)
    b = left * (width / 2.0)
    c = np.asarray(center, dtype=np.float64)
    return np.array([c + a + b, c + a - b, c - a - b, c - a + b])


def rectangles_collide(c1, u1, l1, w1, c2, u2, l2, w2) -> bool:
    """Oriented rectangle overlap via separating-axis projection."""
    r1, r2 = _corners(c1, u1, l1, w1), _corners(c2, u2, l2, w2)
    for rect in (r1, r2):
        for i in range(2):
            axis = PERP @ (rect[(i + 1) % 4] - rect[i])
            p1, p2 = r1 @ axis, r2 @ axis
            if p1.max() < p2.min() or p2.max() < p1.min():
                return False  # separating axis: no overlap
    return True


# -------------------------------------------------------------------- replay


@dataclass
class CarTrack:
    """One logged car: positions indexed by global frame numbers."""

    car_id: int
    frames: np.ndarray        # (L,) increasing ints, consecutive
    pos: np.ndarray           # (L, 2) meters
    length: float
    width: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.pos = np.asarray(self.pos, dtype=np.float64)
        if len(self.frames) != len(self.pos):
            raise ValueError(f"car {self.car_id}: {len(self.frames)} frames vs "
                             f"{len(self.pos)} positions")
        if len(self.frames) >= 2 and not np.all(np.diff(self.frames) == 1):
            raise ValueError(f"car {self.car_id}: frames are not consecutive")

    def __len__(self):
        return len(self.frames)

    def heading(self, i: int) -> np.ndarray:
        j = max(i, 1)
        v = self.pos[j] - self.pos[j - 1]
        n = np.linalg.norm(v)
        return v / n if n > 0 else np.array([1.0, 0.0])


@dataclass
class Observation:
    """What a policy sees: the last m state images and m speeds."""

    grids: np.ndarray   # (m, 3, H, W)
    speeds: np.ndarray  # (m,) displacement magnitudes, m/step


@dataclass
class EpisodeResult:
    car_id: int
    outcome: str                 # success | collision | off_road | timeout
    distance_m: float
    steps: int
    rows: List[dict] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.outcome == "success"


class ReplayEnv:
    """Logged traffic replays; the ego car is driven by a policy.

    Other cars follow their recorded trajectories and do not react to the
    ego, so grazing situations the human driver provoked differently can
    end in collision here; that is the intended evaluation regime.
    """

    def __init__(self, cars: Dict[int, CarTrack], geom: RoadGeometry, history: int = 4,
                 max_steps: int = 600):
        if history < 2:
            raise ValueError("history must be at least 2 to define a velocity")
        self.cars = cars
        self.geom = geom
        self.history = history
        self.max_steps = max_steps
        self._frame_index: Dict[int, List[int]] = {}
        for cid, tr in cars.items():
            for fr in tr.frames:
                self._frame_index.setdefault(int(fr), []).append(cid)
        self._ego_id: Optional[int] = None

    # -- neighbor lookup ------------------------------------------------

    def neighbors_at(self, frame: int, exclude: int) -> np.ndarray:
        out = []
        for cid in self._frame_index.get(frame, ()):
            if cid == exclude:
                continue
            tr = self.cars[cid]
            i = int(frame - tr.frames[0])
            out.append((tr.pos[i, 0], tr.pos[i, 1], tr.length, tr.width))
        return np.asarray(out, dtype=np.float64).reshape(-1, 4)

    # -- episode control --------------------------------------------------

    def reset(self, ego_id: int) -> Observation:
        tr = self.cars[ego_id]
        m = self.history
        if len(tr) < m + 1:
            raise ValueError(f"car {ego_id} has only {len(tr)} frames; need {m + 1}")
        self._ego_id = ego_id
        self._tr = tr
        self._positions = [tr.pos[i].copy() for i in range(m)]
        self._frame = int(tr.frames[m - 1])
        self._start_x = float(tr.pos[m - 1, 0])
        self._steps = 0
        self._done = False
        return self._observe()

    def _observe(self) -> Observation:
        m = self.history
        geom = self.geom
        grids = np.empty((m, 3, geom.grid_h, geom.grid_w))
        speeds = np.empty(m)
        for k in range(m):
            i = len(self._positions) - m + k
            pos = self._positions[i]
            v = self._positions[i] - self._positions[i - 1] if i > 0 else \
                self._positions[1] - self._positions[0]
            nb = self.neighbors_at(self._frame - (m - 1 - k), self._ego_id)
            grids[k] = render_frame(pos, v, nb, geom)
            speeds[k] = np.linalg.norm(v)
        return Observation(grids, speeds)

    def step(self, action: np.ndarray) -> Tuple[Optional[Observation], dict]:
        if self._done:
            raise RuntimeError("step() after episode end; call reset()")
        geom = self.geom
        pos = self._positions[-1]
        v = pos - self._positions[-2]
        action = self._clamp(v, np.asarray(action, dtype=np.float64))
        v_next = apply_action(v, action)
        new_pos = pos + v_next
        self._positions.append(new_pos)
        self._frame += 1
        self._steps += 1

        nb = self.neighbors_at(self._frame, self._ego_id)
        grid = render_frame(new_pos, v_next, nb, geom)
        prox, _ = eval_cost(grid, float(np.linalg.norm(v_next)), geom)

        event = ""
        half_w = geom.car_width_m / 2.0
        if any(rectangles_collide(new_pos, v_next, geom.car_length_m, geom.car_width_m,
                                  row[:2], np.array([1.0, 0.0]), row[2], row[3])
               for row in nb):
            event = "collision"
        elif not (half_w <= new_pos[1] <= geom.road_width_m - half_w):
            event = "off_road"
        elif new_pos[0] >= geom.road_length_m:
            event = "success"
        elif self._steps >= self.max_steps:
            event = "timeout"
        self._done = bool(event)

        info = {
            "position": new_pos.copy(),
            "action": action.copy(),
            "proximity": prox,
            "lane": geom.lane_index(new_pos[1]),
            "event": event,
            "distance_m": float(new_pos[0] - self._start_x),
        }
        return (None if self._done else self._observe()), info

    def _clamp(self, v: np.ndarray, action: np.ndarray) -> np.ndarray:
        # keep the car controllable: no reversing, no lateral jump beyond speed
        r = float(np.linalg.norm(v))
        d_speed = float(np.clip(action[0], 0.05 - r, 1.0))
        new_speed = r + d_speed
        d_angle = float(np.clip(action[1], -0.95 * new_speed, 0.95 * new_speed))
        return np.array([d_speed, d_angle])


def run_episode(env: ReplayEnv, policy, ego_id: int) -> EpisodeResult:
    """Drive one logged car with ``policy`` until a terminal event."""
    obs = env.reset(ego_id)
    rows, distance, outcome = [], 0.0, "timeout"
    step = 0
    while True:
        action = np.asarray(policy.act(obs), dtype=np.float64)
        obs, info = env.step(action)
        step += 1
        rows.append({
            "step": step,
            "x": float(info["position"][0]),
            "y": float(info["position"][1]),
            "dspeed": float(info["action"][0]),
            "dangle": float(info["action"][1]),
            "proximity": info["proximity"],
            "lane": info["lane"],
            "event": info["event"],
        })
        distance = info["distance_m"]
        if info["event"]:
            outcome = info["event"]
            break
    return EpisodeResult(ego_id, outcome, distance, step, rows)


def write_episode_csv(path, result: EpisodeResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=[
            "step", "x", "y", "dspeed", "dangle", "proximity", "lane", "event"])
        w.writeheader()
        for row in result.rows:
            w.writerow(row)


def evaluate_policy(env: ReplayEnv, policy, ego_ids, episode_dir=None) -> dict:
    """Run one episode per car id; aggregate success rate and distance."""
    results = []
    for ego_id in ego_ids:
        res = run_episode(env, policy, ego_id)
        results.append(res)
        if episode_dir is not None:
            write_episode_csv(f"{episode_dir}/episode_{ego_id}.csv", res)
    return {
        "mean_distance_m": float(np.mean([r.distance_m for r in results])),
        "success_rate": float(np.mean([r.success for r in results])),
        "n_episodes": len(results),
        "outcomes": {o: sum(r.outcome == o for r in results)
                     for o in ("success", "collision", "off_road", "timeout")},
    }
