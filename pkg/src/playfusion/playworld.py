"""Kinematic 2-D pick-and-place world and a scripted play teleoperator.

The unit square holds one gripper agent, a few objects and a row of
containers near the top edge. Containers may start closed and must be opened
(articulation command) before an object released over them counts as placed.
Placed objects stay put for the rest of the episode.

Actions are 4-D in [-1, 1]: planar velocity (scaled by ``speed``), a gripper
command and an articulation command. The gripper command has a dead zone:
above +0.5 grasps, below -0.5 releases, in between nothing changes, so the
zero action is a no-op. A grasp takes the nearest free object within
``grasp_radius``; with nothing in reach the gripper stays open, so the
closed flag in the state always means "holding something" and a grasp
command issued early simply keeps trying until the object is in reach.

State vector layout (``state_dim = 3 + 4 * n_objects + 3 * n_containers``)::

    agent:      x, y, gripper_closed
    object i:   x, y, held, placed
    container j: x, y, open
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError

ACTION_DIM = 4
ACTION_LOW = -np.ones(ACTION_DIM)
ACTION_HIGH = np.ones(ACTION_DIM)
GRIP_THRESHOLD = 0.5

OBJECT_NAMES = ("carrot", "bread", "cup", "plate", "corn", "knife")
CONTAINER_NAMES = ("pan", "toaster", "pot", "rack", "grill", "bin")


@dataclass(frozen=True)
class WorldConfig:
    objects: tuple = ("carrot", "bread", "cup")
    containers: tuple = ("pan", "toaster", "pot")
    noise: float = 0.1
    multimodality: int = 2
    seed: int = 0
    episode_length: int = 64
    speed: float = 0.08
    grasp_radius: float = 0.1
    container_radius: float = 0.12
    closed_prob: float = 0.3
    preplaced_prob: float = 0.3
    detour: float = 0.3
    segments: int = 3

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "containers", tuple(self.containers))
        if not self.objects or not self.containers:
            raise ConfigError("world needs at least one object and one container")
        if self.multimodality < 1:
            raise ConfigError("multimodality level must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise level must be >= 0")
        if self.episode_length < 2:
            raise ConfigError("episode length must be >= 2")
        if self.segments < 1:
            raise ConfigError("segments must be >= 1")

    @property
    def n_objects(self):
        return len(self.objects)

    @property
    def n_containers(self):
        return len(self.containers)

    @property
    def state_dim(self):
        return 3 + 4 * self.n_objects + 3 * self.n_containers

    @property
    def tasks(self):
        """All (object index, container index) pairs, in task-id order."""
        return [(o, c) for o in range(self.n_objects) for c in range(self.n_containers)]

    def task_id(self, obj, cont):
        return obj * self.n_containers + cont

    def families(self):
        """Lateral detour signs, one per path family."""
        if self.multimodality == 1:
            return np.array([0.0])
        return np.linspace(-1.0, 1.0, self.multimodality)

    def to_dict(self):
        d = asdict(self)
        d["objects"] = list(self.objects)
        d["containers"] = list(self.containers)
        return d


def load_world_config(path, section="world", overrides=None):
    """Read a ``[world]`` section of a key=value config file."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return world_config_from_mapping(dict(cp[section]) if cp.has_section(section) else {},
                                     overrides)


def world_config_from_mapping(mapping, overrides=None):
    values = dict(mapping)
    values.update(overrides or {})
    kwargs = {}
    defaults = WorldConfig()
    for key, raw in values.items():
        if not hasattr(defaults, key):
            raise ConfigError(f"unknown world key {key!r}")
        current = getattr(defaults, key)
        if isinstance(current, tuple):
            kwargs[key] = tuple(s.strip() for s in str(raw).split(",") if s.strip()) \
                if isinstance(raw, str) else tuple(raw)
        elif isinstance(current, int):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return WorldConfig(**kwargs)


@dataclass
class WorldState:
    agent: np.ndarray            # (2,)
    gripper: int                 # 1 closed, 0 open
    held: int                    # object index or -1
    obj_pos: np.ndarray          # (O, 2)
    placed: np.ndarray           # (O,) container index or -1
    cont_pos: np.ndarray         # (C, 2)
    cont_open: np.ndarray        # (C,) bool

    def copy(self):
        return WorldState(self.agent.copy(), self.gripper, self.held, self.obj_pos.copy(),
                          self.placed.copy(), self.cont_pos.copy(), self.cont_open.copy())

    def vector(self):
        O = len(self.obj_pos)
        objs = np.zeros((O, 4))
        objs[:, :2] = self.obj_pos
        if self.held >= 0:
            objs[self.held, 2] = 1.0
        objs[:, 3] = self.placed >= 0
        conts = np.concatenate([self.cont_pos, self.cont_open[:, None].astype(float)], axis=1)
        return np.concatenate([self.agent, [float(self.gripper)], objs.ravel(), conts.ravel()])

    @classmethod
    def from_vector(cls, vec, cfg: WorldConfig):
        vec = np.asarray(vec, dtype=float)
        O, C = cfg.n_objects, cfg.n_containers
        objs = vec[3:3 + 4 * O].reshape(O, 4)
        conts = vec[3 + 4 * O:].reshape(C, 3)
        held = np.flatnonzero(objs[:, 2] > 0.5)
        placed = np.full(O, -1)
        for i in np.flatnonzero(objs[:, 3] > 0.5):
            placed[i] = int(np.argmin(np.linalg.norm(conts[:, :2] - objs[i, :2], axis=1)))
        return cls(agent=vec[:2].copy(), gripper=int(vec[2] > 0.5),
                   held=int(held[0]) if len(held) else -1, obj_pos=objs[:, :2].copy(),
                   placed=placed, cont_pos=conts[:, :2].copy(),
                   cont_open=conts[:, 2] > 0.5)

    def success_flags(self, cfg: WorldConfig):
        """One flag per task id: object placed in the named container."""
        flags = np.zeros(cfg.n_objects * cfg.n_containers, dtype=bool)
        for o in range(cfg.n_objects):
            if self.placed[o] >= 0:
                flags[cfg.task_id(o, self.placed[o])] = True
        return flags


def reset(cfg: WorldConfig, rng, free_objects=None, preplace=True):
    """Random initial state.

    Containers sit at jittered anchors along the top edge, objects and the
    agent are scattered over the lower region. ``free_objects`` lists objects
    that must not be pre-placed.
    """
    O, C = cfg.n_objects, cfg.n_containers
    anchors = np.stack([(np.arange(C) + 0.5) / C, np.full(C, 0.85)], axis=1)
    cont_pos = anchors + rng.uniform(-0.03, 0.03, size=(C, 2))
    cont_open = rng.random(C) >= cfg.closed_prob
    obj_pos = np.zeros((O, 2))
    for i in range(O):
        for _ in range(100):
            p = rng.uniform([0.1, 0.1], [0.9, 0.6])
            if i == 0 or np.min(np.linalg.norm(obj_pos[:i] - p, axis=1)) > 0.15:
                break
        obj_pos[i] = p
    agent = rng.uniform(0.05, 0.95, size=2)
    placed = np.full(O, -1)
    if preplace and O > 1 and rng.random() < cfg.preplaced_prob:
        free = set(range(O)) if free_objects is None else set(free_objects)
        candidates = [o for o in range(O) if o not in free]
        if candidates:
            o = candidates[rng.integers(len(candidates))]
            c = int(rng.integers(C))
            placed[o] = c
            cont_open[c] = True
            obj_pos[o] = cont_pos[c]
    return WorldState(agent=agent, gripper=0, held=-1, obj_pos=obj_pos, placed=placed,
                      cont_pos=cont_pos, cont_open=cont_open)


def step(cfg: WorldConfig, state: WorldState, action):
    """Deterministic kinematic update; returns (new_state, success_flags)."""
    a = np.clip(np.asarray(action, dtype=float), ACTION_LOW, ACTION_HIGH)
    s = state.copy()
    s.agent = np.clip(s.agent + cfg.speed * a[:2], 0.0, 1.0)
    if s.held >= 0:
        s.obj_pos[s.held] = s.agent

    if a[3] > GRIP_THRESHOLD:
        near = np.linalg.norm(s.cont_pos - s.agent, axis=1) <= cfg.container_radius
        s.cont_open = s.cont_open | near

    if a[2] > GRIP_THRESHOLD and s.held < 0:
        free = (s.placed < 0)
        d = np.linalg.norm(s.obj_pos - s.agent, axis=1)
        d[~free] = np.inf
        i = int(np.argmin(d))
        if d[i] <= cfg.grasp_radius:
            s.held = i
            s.gripper = 1
            s.obj_pos[i] = s.agent
    elif a[2] < -GRIP_THRESHOLD and s.gripper == 1:
        s.gripper = 0
        if s.held >= 0:
            d = np.linalg.norm(s.cont_pos - s.agent, axis=1)
            c = int(np.argmin(d))
            if d[c] <= cfg.container_radius and s.cont_open[c]:
                s.placed[s.held] = c
            s.held = -1
    return s, s.success_flags(cfg)


# ---------------------------------------------------------------- teleoperator

class ScriptedOperator:
    """Closed-loop controller that carries one object to one container.

    The route to each target bends through a waypoint displaced sideways by
    ``family * detour * distance``; the family sign fixes which side, so
    distinct signs give distinct path families.
    """

    def __init__(self, cfg: WorldConfig, task, family=0.0, hesitate=True):
        self.cfg = cfg
        self.obj, self.cont = task
        self.family = family
        self.phase = "hesitate" if hesitate else "plan_reach"
        self.waypoint = None

    def _waypoint(self, start, target):
        v = target - start
        dist = np.linalg.norm(v)
        if dist < 1e-9 or self.family == 0.0:
            return None
        perp = np.array([-v[1], v[0]]) / dist
        wp = (start + target) / 2 + self.family * self.cfg.detour * dist * perp
        return np.clip(wp, 0.05, 0.95)

    def _move(self, pos, target):
        v = (target - pos) / self.cfg.speed
        n = np.linalg.norm(v)
        return v / n if n > 1.0 else v

    def _go(self, s, target, grip):
        """Velocity toward the current waypoint (if any) then the target."""
        if self.waypoint is not None:
            if np.linalg.norm(self.waypoint - s.agent) <= 0.5 * self.cfg.speed:
                self.waypoint = None
            else:
                return np.array([*self._move(s.agent, self.waypoint), grip, 0.0])
        return np.array([*self._move(s.agent, target), grip, 0.0])

    @property
    def done(self):
        return self.phase == "done"

    def act(self, s: WorldState):
        cfg = self.cfg
        idle = np.array([0.0, 0.0, -1.0, 0.0])
        if self.phase == "hesitate":
            self.phase = "plan_reach"
            return np.zeros(ACTION_DIM)
        if self.phase == "plan_reach":
            if s.held == self.obj:
                self.phase = "plan_carry"
            else:
                self.waypoint = self._waypoint(s.agent, s.obj_pos[self.obj])
                self.phase = "reach"
        if self.phase == "reach":
            if s.held == self.obj:
                self.phase = "plan_carry"
            elif s.placed[self.obj] >= 0:
                self.phase = "done"
                return idle
            else:
                d = np.linalg.norm(s.obj_pos[self.obj] - s.agent)
                if d <= 0.5 * cfg.grasp_radius and self.waypoint is None:
                    if s.held >= 0:
                        return np.array([0.0, 0.0, -1.0, 0.0])
                    return np.array([0.0, 0.0, 1.0, 0.0])
                return self._go(s, s.obj_pos[self.obj], -1.0)
        if self.phase == "plan_carry":
            self.waypoint = self._waypoint(s.agent, s.cont_pos[self.cont])
            self.phase = "carry"
        if self.phase == "carry":
            if s.held != self.obj:
                if s.placed[self.obj] >= 0:
                    self.phase = "done"
                    return idle
                self.phase = "plan_reach"
                return self.act(s)
            d = np.linalg.norm(s.cont_pos[self.cont] - s.agent)
            if d <= 0.5 * cfg.container_radius and self.waypoint is None:
                if not s.cont_open[self.cont]:
                    return np.array([0.0, 0.0, 1.0, 1.0])
                return np.array([0.0, 0.0, -1.0, 0.0])
            return self._go(s, s.cont_pos[self.cont], 1.0)
        return idle


@dataclass
class PlayEpisode:
    states: np.ndarray           # (H, state_dim), states[t] precedes actions[t]
    actions: np.ndarray          # (H, ACTION_DIM)
    segments: list = field(default_factory=list)   # [(start, end, instruction_or_task)]
    families: list = field(default_factory=list)   # path family sign per segment
    final_state: np.ndarray = None
    episode_id: int = 0

    @property
    def length(self):
        return len(self.actions)

    def label_at(self, t):
        for start, end, label in self.segments:
            if start <= t < end:
                return label
        return -1


def script_play(cfg: WorldConfig, seed, allowed_tasks=None, H=None, noise=None,
                multimodality=None):
    """Generate one play episode with hindsight task labels.

    The operator picks a random allowed task whose object is still free,
    picks a path family uniformly, and executes the task with Gaussian
    velocity noise. With ``cfg.segments > 1`` it chains further tasks in the
    same episode. Segment labels are the task ids actually achieved in the
    segment (first placement event), or -1 when nothing was placed.
    """
    if noise is not None or multimodality is not None:
        cfg = WorldConfig(**{**cfg.to_dict(),
                             **({"noise": noise} if noise is not None else {}),
                             **({"multimodality": multimodality}
                                if multimodality is not None else {})})
    H = cfg.episode_length if H is None else H
    tasks = cfg.tasks if allowed_tasks is None else [tuple(t) for t in allowed_tasks]
    if not tasks:
        raise ConfigError("no tasks to perform")
    rng = np.random.default_rng(seed)
    families = cfg.families()
    task = tasks[rng.integers(len(tasks))]
    state = reset(cfg, rng, free_objects=[task[0]])

    states = np.zeros((H, cfg.state_dim))
    actions = np.zeros((H, ACTION_DIM))
    segments, fams = [], []
    operator, seg_start, seg_label = None, 0, -1
    for t in range(H):
        if operator is None or (operator.done and len(segments) + 1 < cfg.segments):
            if operator is not None:
                segments.append((seg_start, t, seg_label))
                seg_start, seg_label = t, -1
                options = [tk for tk in tasks if state.placed[tk[0]] < 0] or tasks
                task = options[rng.integers(len(options))]
            fam = float(families[rng.integers(len(families))])
            fams.append(fam)
            operator = ScriptedOperator(cfg, task, family=fam)
        a = operator.act(state)
        if cfg.noise > 0 and np.any(a[:2] != 0):
            a[:2] += cfg.noise * rng.standard_normal(2)
        a = np.clip(a, ACTION_LOW, ACTION_HIGH)
        states[t] = state.vector()
        actions[t] = a
        before = state.placed.copy()
        state, _ = step(cfg, state, a)
        newly = np.flatnonzero((before < 0) & (state.placed >= 0))
        if seg_label < 0 and len(newly):
            o = int(newly[0])
            seg_label = cfg.task_id(o, int(state.placed[o]))
    segments.append((seg_start, H, seg_label))
    return PlayEpisode(states=states, actions=actions, segments=segments, families=fams,
                       final_state=state.vector())


def replay(cfg: WorldConfig, episode: PlayEpisode):
    """Re-simulate an episode from its first state; returns the final state."""
    s = WorldState.from_vector(episode.states[0], cfg)
    for a in episode.actions:
        s, _ = step(cfg, s, a)
    return s


def compositional_split(n_objects, n_containers):
    """Split (object, container) pairs into train and held-out combinations.

    Object ``i`` is trained with containers ``i, i+1, ..., i+w-1`` (mod the
    container count) where ``w = n_containers - 1``. Every object and every
    container appears in training and each object keeps at least one unseen
    container. With two of each this is the diagonal / anti-diagonal split.
    """
    if n_objects < 2 or n_containers < 2:
        raise ConfigError("compositional split needs >= 2 objects and >= 2 containers")
    w = n_containers - 1
    train = sorted((o, c) for o in range(n_objects) for c in range(n_containers)
                   if (c - o) % n_containers < w)
    held = sorted((o, c) for o in range(n_objects) for c in range(n_containers)
                  if (o, c) not in set(train))
    covered_o = {o for o, _ in train}
    covered_c = {c for _, c in train}
    if len(covered_o) != n_objects or len(covered_c) != n_containers or not held:
        raise ConfigError("vocabulary too small for a covering compositional split")
    return {"train": train, "heldout": held}


def relative_heading(actions, start, target):
    """Angle (radians) of the summed planar displacement relative to the
    straight line from ``start`` to ``target``; positive is counter-clockwise."""
    disp = np.asarray(actions)[..., :2].sum(axis=-2)
    direct = np.asarray(target) - np.asarray(start)
    ang = np.arctan2(disp[..., 1], disp[..., 0]) - np.arctan2(direct[..., 1], direct[..., 0])
    return (ang + np.pi) % (2 * np.pi) - np.pi


def heading_family(angle, threshold=np.pi / 12):
    """Map a relative heading to its path family sign (+1, -1, or 0 if straight)."""
    angle = np.asarray(angle)
    return np.where(angle > threshold, 1, np.where(angle < -threshold, -1, 0))
