"""Synthetic kitchen world: an agent walking between work stations.

The agent alternates between dwelling at a station (station-bound actions
such as "wash" or "cut" are active) and walking to the next station
(motion-bound actions "walk" and, towards storage, "fetch"). Each "video" is
one continuous run of the simulator; episodes are cut from it at successive
7 second intervals: 2 s of context, 5 s of future.

Internal clock is 10 Hz. Positions are emitted at 5 fps, context feature
vectors at 2 fps and action labels at 1 fps, so action step k lines up with
future position index 5k (1-based).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TICK_HZ = 10
POS_STRIDE = 2  # ticks per position frame (5 fps)
IMG_STRIDE = 5  # ticks per context image (2 fps)
ACT_STRIDE = 10  # ticks per action label (1 fps)

DEFAULT_CLASSES = (
    "walk", "fetch", "wash", "dry", "stir", "turn-on",
    "cut", "pour", "open", "take", "put", "close",
)
DEFAULT_STATIONS = (
    # x, y, z (head height while working), meters
    (0.6, 0.6, 1.55),  # sink
    (3.0, 0.5, 1.60),  # stove
    (5.4, 0.8, 1.50),  # counter
    (5.3, 4.2, 1.25),  # fridge
    (2.8, 4.4, 1.70),  # cupboard
    (0.7, 3.8, 1.40),  # table
)
DEFAULT_STATION_ACTIONS = (
    (2, 3),  # sink: wash, dry
    (4, 5),  # stove: stir, turn-on
    (6, 7),  # counter: cut, pour
    (8, 9, 11),  # fridge: open, take, close
    (8, 10, 11),  # cupboard: open, put, close
    (10, 9, 7),  # table: put, take, pour
)


class WorldConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class WorldConfig:
    box: tuple = (6.0, 5.0, 2.0)
    stations: tuple = DEFAULT_STATIONS
    class_names: tuple = DEFAULT_CLASSES
    station_actions: tuple = DEFAULT_STATION_ACTIONS
    walk_class: int = 0
    fetch_class: int | None = 1
    storage_stations: tuple = (3, 4)
    speed_range: tuple = (0.6, 1.4)  # m/s
    noise: float = 0.03  # trajectory noise scale, m
    dwell_mean: float = 4.0  # s; float("inf") keeps the agent at its first station
    dwell_std: float = 1.5
    secondary_prob: float = 0.5
    arrive_radius: float = 0.2
    feature_dim: int = 16
    feature_noise: float = 0.6
    n_videos: int = 135
    past_len: int = 10  # P
    traj_horizon: int = 25  # T_x
    action_horizon: int = 5  # T_a
    n_images: int = 4
    still_speed: float = 0.25  # m/s, below this the agent counts as still
    seed: int = 0

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def n_stations(self):
        return len(self.stations)

    def validate(self):
        C = self.n_classes
        if C < 2:
            raise WorldConfigError("need at least two action classes")
        if len(self.station_actions) != self.n_stations:
            raise WorldConfigError("one action set per station required")
        box = np.asarray(self.box)
        st = np.asarray(self.stations, dtype=float)
        if np.any(st < 0) or np.any(st > box):
            raise WorldConfigError("stations must lie inside the box")
        reach = {self.walk_class}
        if self.fetch_class is not None:
            if not self.storage_stations or self.n_stations < 2:
                raise WorldConfigError("fetch class needs a reachable storage station")
            reach.add(self.fetch_class)
        for acts in self.station_actions:
            if not acts:
                raise WorldConfigError("every station needs at least one action")
            reach.update(acts)
        missing = sorted(set(range(C)) - reach)
        if self.n_stations < 2 or not np.isfinite(self.dwell_mean):
            # the agent never walks
            missing = sorted(set(missing) | {self.walk_class} | ({self.fetch_class} - {None}))
            missing = [c for c in missing if not any(c in a for a in self.station_actions)]
            if missing and np.isfinite(self.dwell_mean):
                raise WorldConfigError(f"unreachable action classes: {missing}")
        elif missing:
            raise WorldConfigError(f"unreachable action classes: {missing}")
        if self.feature_dim < self.n_stations + 2:
            raise WorldConfigError("feature_dim must cover station proximity and heading")
        if not (0 < self.speed_range[0] <= self.speed_range[1]):
            raise WorldConfigError("bad speed range")
        if self.noise < 0 or self.dwell_std < 0:
            raise WorldConfigError("noise scales must be non-negative")
        if self.past_len < 1 or self.traj_horizon < 1 or self.action_horizon < 1:
            raise WorldConfigError("horizons must be positive")
        if self.traj_horizon < self.action_horizon * (ACT_STRIDE // POS_STRIDE):
            raise WorldConfigError("trajectory horizon must cover every action step")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["dwell_mean"] = None if not np.isfinite(self.dwell_mean) else self.dwell_mean
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("dwell_mean", 0.0) is None:
            d["dwell_mean"] = float("inf")
        for k in ("box", "speed_range", "storage_stations", "class_names"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        for k in ("stations", "station_actions"):
            if k in d:
                d[k] = tuple(tuple(x) for x in d[k])
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Episode:
    episode_id: int
    video_id: int
    past_positions: np.ndarray  # (P, 3)
    past_features: np.ndarray  # (n_images, F)
    future_positions: np.ndarray  # (T_x, 3)
    future_actions: np.ndarray  # (T_a, C_a, 2) one-hot: [1,0] absent, [0,1] occurs

    @property
    def last_position(self):
        return self.past_positions[-1]

    @property
    def action_labels(self):
        """Binary (T_a, C_a) occurrence matrix."""
        return self.future_actions[..., 1]

    def to_json(self):
        return {
            "episode_id": int(self.episode_id),
            "video_id": int(self.video_id),
            "past_positions": self.past_positions.tolist(),
            "past_features": self.past_features.tolist(),
            "future_positions": self.future_positions.tolist(),
            "future_actions": self.future_actions.astype(int).tolist(),
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            episode_id=int(d["episode_id"]),
            video_id=int(d["video_id"]),
            past_positions=np.asarray(d["past_positions"], dtype=np.float64),
            past_features=np.asarray(d["past_features"], dtype=np.float64),
            future_positions=np.asarray(d["future_positions"], dtype=np.float64),
            future_actions=np.asarray(d["future_actions"], dtype=np.float64),
        )

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    proportions: tuple
    videos: dict = field(default_factory=dict)  # split name -> video ids

    def to_dict(self):
        return {
            "train": list(map(int, self.train)),
            "val": list(map(int, self.val)),
            "test": list(map(int, self.test)),
            "proportions": list(self.proportions),
            "videos": {k: list(map(int, v)) for k, v in self.videos.items()},
        }


# ----------------------------------------------------------------- simulation


def _feature_projection(config):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7919]))
    cue_dim = config.feature_dim - config.n_stations - 2
    P = rng.normal(size=(config.n_classes, cue_dim))
    P /= np.linalg.norm(P, axis=1, keepdims=True) + 1e-12
    return P


def _dwell_sample(config, rng):
    if not np.isfinite(config.dwell_mean):
        return np.inf
    if config.dwell_std == 0:
        return config.dwell_mean
    k = (config.dwell_mean / config.dwell_std) ** 2
    return rng.gamma(k, config.dwell_mean / k)


def simulate_video(config: WorldConfig, n_ticks: int, rng):
    """Run the agent for ``n_ticks`` ticks.

    Returns positions (n_ticks, 3), velocities (n_ticks, 3) and the active
    action indicator (n_ticks, C).
    """
    dt = 1.0 / TICK_HZ
    st = np.asarray(config.stations, dtype=float)
    S = len(st)
    C = config.n_classes
    noise = config.noise
    pos = np.zeros((n_ticks, 3))
    vel = np.zeros((n_ticks, 3))
    active = np.zeros((n_ticks, C), dtype=bool)

    def start_dwell(s, elapsed_frac=0.0):
        acts = config.station_actions[s]
        primary = acts[rng.integers(len(acts))]
        others = [a for a in acts if a != primary]
        secondary = None
        if others and rng.random() < config.secondary_prob:
            secondary = others[rng.integers(len(others))]
        total = _dwell_sample(config, rng)
        spot = st[s] + noise * 2.0 * np.array([rng.normal(), rng.normal(), 0.3 * rng.normal()])
        return {
            "mode": "dwell",
            "station": s,
            "primary": primary,
            "secondary": secondary,
            "total": total,
            "left": total * (1.0 - elapsed_frac) if np.isfinite(total) else np.inf,
            "spot": spot,
        }

    def start_move(s_from):
        choices = [j for j in range(S) if j != s_from]
        s_to = choices[rng.integers(len(choices))]
        speed = rng.uniform(*config.speed_range)
        return {"mode": "move", "station": s_to, "speed": speed}

    s0 = int(rng.integers(S))
    state = start_dwell(s0, elapsed_frac=rng.random())
    x = state["spot"].copy()
    v = np.zeros(3)
    lateral = np.zeros(3)
    for i in range(n_ticks):
        if state["mode"] == "dwell":
            a = active[i]
            a[state["primary"]] = True
            if state["secondary"] is not None and np.isfinite(state["total"]) and state["left"] < state["total"] / 2:
                a[state["secondary"]] = True
            target = state["spot"]
            # damped sway around the standing spot
            v = 0.6 * v + 1.5 * (target - x) * dt + noise * np.array([1.0, 1.0, 0.3]) * rng.normal(size=3)
            state["left"] -= dt
            if state["left"] <= 0:
                state = start_move(state["station"])
        else:
            a = active[i]
            a[config.walk_class] = True
            if config.fetch_class is not None and state["station"] in config.storage_stations:
                a[config.fetch_class] = True
            target = st[state["station"]]
            d = target - x
            d[2] = 0.0
            dist = np.linalg.norm(d)
            heading = d / max(dist, 1e-9)
            perp = np.array([-heading[1], heading[0], 0.0])
            lateral = 0.9 * lateral + noise * 3.0 * perp * rng.normal()
            v_des = state["speed"] * heading + lateral
            v_des[2] = 2.0 * (1.65 - x[2])
            v = v + 0.5 * (v_des - v)
            if dist < config.arrive_radius + state["speed"] * dt:
                state = start_dwell(state["station"])
        x = x + v * dt
        pos[i] = x
        vel[i] = v
    return pos, vel, active


def _episode_from_stream(config, pos, vel, active, t0, proj, rng, episode_id, video_id):
    P, T, Ta = config.past_len, config.traj_horizon, config.action_horizon
    past_idx = t0 - POS_STRIDE * np.arange(P - 1, -1, -1)
    fut_idx = t0 + POS_STRIDE * np.arange(1, T + 1)
    act_idx = t0 + ACT_STRIDE * np.arange(1, Ta + 1)
    img_idx = t0 - IMG_STRIDE * np.arange(config.n_images - 1, -1, -1)
    obs_noise = 0.1 * config.noise
    past = pos[past_idx] + obs_noise * rng.normal(size=(P, 3))
    future = pos[fut_idx] + obs_noise * rng.normal(size=(T, 3))
    st = np.asarray(config.stations, dtype=float)
    feats = []
    smax = config.speed_range[1]
    for i in img_idx:
        d2 = ((pos[i, :2] - st[:, :2]) ** 2).sum(axis=1)
        prox = np.exp(-d2 / (2 * 0.8**2))
        head = vel[i, :2] / smax
        cue = active[i].astype(float) @ proj
        f = np.concatenate([prox, head, cue])
        feats.append(f + config.feature_noise * rng.normal(size=f.shape))
    labels = active[act_idx].astype(float)
    onehot = np.stack([1.0 - labels, labels], axis=-1)
    return Episode(episode_id, video_id, past, np.asarray(feats), future, onehot)


def episode_ticks(config):
    """Ticks spanned by one episode (context + future), e.g. 70 for 7 s."""
    return POS_STRIDE * (config.past_len + config.traj_horizon)


def generate_dataset(config: WorldConfig, n_episodes: int):
    """Deterministic list of episodes spread over ``config.n_videos`` videos."""
    config.validate()
    if n_episodes < 1:
        raise WorldConfigError("n_episodes must be >= 1")
    n_videos = min(config.n_videos, n_episodes)
    per_video = np.full(n_videos, n_episodes // n_videos)
    per_video[: n_episodes % n_videos] += 1
    proj = _feature_projection(config)
    span = episode_ticks(config)
    lead = max(POS_STRIDE * (config.past_len - 1), IMG_STRIDE * (config.n_images - 1))
    episodes = []
    eid = 0
    for vid in range(n_videos):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, vid]))
        n_ticks = lead + span * int(per_video[vid]) + 1
        pos, vel, active = simulate_video(config, n_ticks, rng)
        for j in range(int(per_video[vid])):
            t0 = lead + span * j
            episodes.append(_episode_from_stream(config, pos, vel, active, t0, proj, rng, eid, vid))
            eid += 1
    return episodes


# ----------------------------------------------------------------- analytics


def expected_travel_time(config):
    """Mean walking time between two distinct stations (uniform next-station choice)."""
    st = np.asarray(config.stations, dtype=float)
    a, b = config.speed_range
    inv_speed = np.log(b / a) / (b - a) if b > a else 1.0 / a
    S = len(st)
    total = 0.0
    for i in range(S):
        for j in range(S):
            if i != j:
                d = np.linalg.norm(st[i, :2] - st[j, :2])
                total += max(d - config.arrive_radius, 0.0) * inv_speed
    return total / (S * (S - 1))


def target_action_rates(config):
    """Long-run fraction of time each action class is active (renewal argument)."""
    C = config.n_classes
    S = config.n_stations
    D = config.dwell_mean
    M = expected_travel_time(config) if S > 1 else 0.0
    rates = np.zeros(C)
    # stationary station distribution is uniform under uniform next-station choice
    for s, acts in enumerate(config.station_actions):
        n = len(acts)
        for a in acts:
            rates[a] += D / n / S
            if n > 1:
                # secondary: chosen among the n-1 others, active for the second half
                rates[a] += config.secondary_prob * (n - 1) / n * (1.0 / (n - 1)) * D / 2 / S
    rates[config.walk_class] += M
    if config.fetch_class is not None:
        st = np.asarray(config.stations, dtype=float)
        a, b = config.speed_range
        inv_speed = np.log(b / a) / (b - a) if b > a else 1.0 / a
        frac = 0.0
        for i in range(S):
            for j in config.storage_stations:
                if i != j:
                    d = np.linalg.norm(st[i, :2] - st[j, :2])
                    frac += max(d - config.arrive_radius, 0.0) * inv_speed
        rates[config.fetch_class] += frac / (S * (S - 1))
    return rates / (D + M)


def still_classes(config):
    return sorted({a for acts in config.station_actions for a in acts})


# ----------------------------------------------------------------- splitting


def split_dataset(episodes, proportions=(0.7, 0.1, 0.2), seed=0, max_tries=500):
    """Video-grouped train/val/test split with every class in train and test."""
    proportions = tuple(float(p) for p in proportions)
    if len(proportions) != 3 or abs(sum(proportions) - 1.0) > 1e-9 or min(proportions) < 0:
        raise SplitError("proportions must be three non-negative numbers summing to 1")
    by_video = {}
    for ep in episodes:
        by_video.setdefault(int(ep.video_id), []).append(ep)
    videos = sorted(by_video)
    V = len(videos)
    if V < 2:
        raise SplitError("need at least two videos to keep train and test disjoint")
    n_train = max(1, int(np.floor(proportions[0] * V + 0.5)))
    n_val = int(np.floor(proportions[1] * V + 0.5))
    n_test = V - n_train - n_val
    if n_test < 1:
        n_val = max(0, n_val - (1 - n_test))
        n_test = V - n_train - n_val
    if n_test < 1:
        n_train -= 1
        n_test = 1
    C = episodes[0].future_actions.shape[1]
    occurs = {v: np.zeros(C, dtype=bool) for v in videos}
    for v, eps in by_video.items():
        for ep in eps:
            occurs[v] |= ep.action_labels.any(axis=0).astype(bool)
    rng = np.random.default_rng(seed)
    missing = None
    for _ in range(max_tries):
        order = [videos[i] for i in rng.permutation(V)]
        tr, va, te = order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
        in_tr = np.any([occurs[v] for v in tr], axis=0)
        in_te = np.any([occurs[v] for v in te], axis=0)
        missing = sorted(set(np.flatnonzero(~in_tr)) | set(np.flatnonzero(~in_te)))
        if not missing:
            ids = lambda vs: [ep.episode_id for v in sorted(vs) for ep in by_video[v]]
            return DatasetSplit(
                ids(tr), ids(va), ids(te), proportions,
                {"train": sorted(tr), "val": sorted(va), "test": sorted(te)},
            )
    raise SplitError(f"classes missing from train or test after regrouping: {[int(c) for c in missing]}")


def select(episodes, ids):
    wanted = set(int(i) for i in ids)
    return [ep for ep in episodes if ep.episode_id in wanted]


# ----------------------------------------------------------------- file io


def save_dataset(path, episodes, config: WorldConfig, split: DatasetSplit | None = None, extra=None):
    """Write ``path`` (JSONL, one episode per line) and ``path.manifest.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), separators=(",", ":")) + "\n")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "class_names": list(config.class_names),
        "n_episodes": len(episodes),
        "content_sha256": digest,
        "split": split.to_dict() if split is not None else None,
    }
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def load_dataset(path):
    path = Path(path)
    with open(path) as fh:
        episodes = [Episode.from_json(json.loads(line)) for line in fh if line.strip()]
    mp = manifest_path(path)
    manifest = json.loads(mp.read_text()) if mp.exists() else {}
    return episodes, manifest
