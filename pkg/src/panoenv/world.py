"""Seeded synthetic navigation worlds with one procedural panorama per node."""

from __future__ import annotations

import colorsys
import heapq
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import FormatError
from .conditioning import SCENE_TEXTURE, SCENES
from .pano import N_ELEVATIONS, N_HEADINGS, N_VIEWS, Panorama, SubView, load_panorama, partition, save_panorama, view_index, view_slices
from .rng import substream

STOP = -1
DEFAULT_PANO_SHAPE = (24, 96)  # height, width -> 8x8 sub-views


@dataclass(frozen=True)
class Node:
    id: int
    pos: tuple[float, float, float]
    scene: str
    pano: str = ""


class WorldGraph:
    """Undirected graph of viewpoints with Euclidean edge weights. Immutable after construction."""

    def __init__(self, nodes: Sequence[Node], edges: Sequence[tuple[int, int]]):
        self.nodes = list(nodes)
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ValueError("node ids must be 0..K-1 in order")
        self.adj: dict[int, dict[int, float]] = {i: {} for i in ids}
        clean = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop on node {a}")
            if a not in self.adj or b not in self.adj:
                raise ValueError(f"edge ({a}, {b}) references an unknown node")
            w = float(np.linalg.norm(np.subtract(self.nodes[a].pos, self.nodes[b].pos)))
            self.adj[a][b] = w
            self.adj[b][a] = w
            clean.add((min(a, b), max(a, b)))
        self.edges = sorted(clean)
        self._dist_cache: dict[int, np.ndarray] = {}
        if len(self.nodes) > 1 and np.isinf(self.distances_to(0)).any():
            raise ValueError("world graph is not connected")

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node: int) -> bool:
        return node in self.adj

    def neighbors(self, node: int) -> list[int]:
        return sorted(self.adj[node])

    def weight(self, a: int, b: int) -> float:
        try:
            return self.adj[a][b]
        except KeyError:
            raise ValueError(f"nodes {a} and {b} are not adjacent") from None

    def distances_to(self, goal: int) -> np.ndarray:
        """Dijkstra distances from every node to ``goal`` (cached)."""
        cached = self._dist_cache.get(goal)
        if cached is not None:
            return cached
        self._require(goal)
        dist = np.full(len(self.nodes), np.inf)
        dist[goal] = 0.0
        heap = [(0.0, goal)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for v, w in self.adj[u].items():
                nd = d + w
                if nd < dist[v]:
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        self._dist_cache[goal] = dist
        return dist

    def _require(self, node: int) -> None:
        if node not in self.adj:
            raise ValueError(f"node {node} not in graph")

    def path_length(self, path: Sequence[int]) -> float:
        return math.fsum(self.weight(a, b) for a, b in zip(path[:-1], path[1:]))

    def heading_to(self, a: int, b: int) -> int:
        dx, dy = np.subtract(self.nodes[b].pos[:2], self.nodes[a].pos[:2])
        deg = math.degrees(math.atan2(dy, dx)) % 360.0
        return int(round(deg / 30.0)) % N_HEADINGS

    def neighbor_headings(self, node: int) -> dict[int, int]:
        """Heading index of the sub-view facing each neighbour; collisions move to the next free heading."""
        taken: dict[int, int] = {}
        used: set[int] = set()
        for nb in self.neighbors(node):
            h = self.heading_to(node, nb)
            while h in used:
                h = (h + 1) % N_HEADINGS
            used.add(h)
            taken[nb] = h
        return taken

    def view_scenes(self, node: int) -> list[str]:
        """Dominant scene label of each of the node's 36 sub-views."""
        labels = [self.nodes[node].scene] * N_VIEWS
        for nb, h in self.neighbor_headings(node).items():
            labels[view_index(h, 1)] = self.nodes[nb].scene
        return labels


def geodesic(g: WorldGraph, a: int, b: int) -> float:
    """Shortest-path length, summed exactly (``math.fsum``) along the oracle path.

    Dijkstra only ranks routes; the reported length is the correctly rounded
    sum of the chosen path's edge weights, so it does not depend on the order
    in which any particular algorithm accumulated them.
    """
    g._require(a)
    if not np.isfinite(g.distances_to(b)[a]):
        raise ValueError(f"nodes {a} and {b} are disconnected")
    return g.path_length(shortest_path(g, a, b))


def oracle_action(g: WorldGraph, current: int, goal: int) -> int:
    """Next node on a minimum-weight path to ``goal`` (smallest id on ties), or STOP."""
    g._require(current)
    if current == goal:
        return STOP
    dist = g.distances_to(goal)
    if not np.isfinite(dist[current]):
        raise ValueError(f"nodes {current} and {goal} are disconnected")
    best, best_cost = None, np.inf
    for nb in g.neighbors(current):
        cost = g.adj[current][nb] + dist[nb]
        if cost < best_cost - 1e-9:
            best, best_cost = nb, cost
    return best


def shortest_path(g: WorldGraph, start: int, goal: int) -> list[int]:
    path = [start]
    while path[-1] != goal:
        path.append(oracle_action(g, path[-1], goal))
        if len(path) > len(g) + 1:
            raise RuntimeError("oracle failed to converge")
    return path


# ---------------------------------------------------------------------------
# appearance


@dataclass(frozen=True)
class SceneStyle:
    texture: str
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    period: float
    phase: float


def base_palette(scene: str) -> tuple[np.ndarray, np.ndarray]:
    hue = SCENES.index(scene) / len(SCENES)
    a = colorsys.hsv_to_rgb(hue, 0.65, 0.85)
    b = colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.35, 0.3)
    return np.array(a), np.array(b)


def world_styles(rng: np.random.Generator, jitter: float = 0.1) -> dict[str, SceneStyle]:
    styles = {}
    for scene in SCENES:
        a, b = base_palette(scene)
        a = np.clip(a + rng.uniform(-jitter, jitter, 3), 0.0, 1.0)
        b = np.clip(b + rng.uniform(-jitter, jitter, 3), 0.0, 1.0)
        styles[scene] = SceneStyle(
            SCENE_TEXTURE[scene], tuple(a), tuple(b), float(rng.uniform(3.0, 5.0)), float(rng.uniform(0, 2 * np.pi))
        )
    return styles


def texture_field(texture: str, ys: np.ndarray, xs: np.ndarray, period: float, phase: float) -> np.ndarray:
    """Pattern intensity in [0, 1] at pixel coordinates."""
    p = period
    shift = phase / (2 * np.pi) * p
    x, y = xs + shift, ys
    if texture == "checker":
        t = (np.floor(x / p) + np.floor(y / p)) % 2
    elif texture == "stripes":
        t = np.floor(y / (p / 2)) % 2
    elif texture == "grid":
        t = ((np.mod(x, p) < 1) | (np.mod(y, p) < 1)).astype(float)
    elif texture == "dots":
        t = ((np.mod(x, p) - p / 2) ** 2 + (np.mod(y, p) - p / 2) ** 2 < (p / 3) ** 2).astype(float)
    elif texture == "waves":
        t = 0.5 + 0.5 * np.sin(2 * np.pi * (y + 1.5 * np.sin(2 * np.pi * x / (2 * p))) / p)
    elif texture == "diagonal":
        t = np.floor((x + y) / p) % 2
    elif texture == "rings":
        r = np.hypot(np.mod(x, 2 * p) - p, np.mod(y, 2 * p) - p)
        t = 0.5 + 0.5 * np.cos(2 * np.pi * r / p)
    elif texture == "plain":
        t = 0.5 + 0.1 * np.sin(2 * np.pi * x / (8 * p))
    else:
        raise ValueError(f"unknown texture {texture!r}")
    return np.asarray(t, dtype=np.float64)


def paint(style: SceneStyle, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    t = texture_field(style.texture, ys, xs, style.period, style.phase)[..., None]
    return (1.0 - t) * np.array(style.color_a) + t * np.array(style.color_b)


_BAND_SHADE = np.array([1.1, 1.0, 0.8])  # top, middle, bottom rows


def render_panorama(
    g: WorldGraph, node: int, styles: Mapping[str, SceneStyle], rng: np.random.Generator, shape=DEFAULT_PANO_SHAPE, noise: float = 0.03
) -> Panorama:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = paint(styles[g.nodes[node].scene], ys, xs)
    for nb, hd in g.neighbor_headings(node).items():
        rs, cs = view_slices((h, w), hd, 1)
        img[rs, cs] = paint(styles[g.nodes[nb].scene], ys[rs, cs], xs[rs, cs])
    band = np.repeat(_BAND_SHADE, h // N_ELEVATIONS)[:, None, None]
    img = img * band + rng.normal(0.0, noise, size=img.shape)
    # store-precision rounding so in-memory and on-disk panoramas agree bit for bit
    return Panorama(np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------------------
# episodes and worlds


@dataclass(frozen=True)
class Episode:
    instruction: tuple[str, ...]
    path: tuple[int, ...]

    @property
    def start(self) -> int:
        return self.path[0]

    @property
    def goal(self) -> int:
        return self.path[-1]

    def validate(self, g: WorldGraph) -> None:
        if not self.path:
            raise ValueError("episode path is empty")
        for a, b in zip(self.path[:-1], self.path[1:]):
            if b not in g.adj.get(a, {}):
                raise ValueError(f"path step {a}->{b} is not an edge")
        if not self.instruction:
            raise ValueError("episode instruction is empty")


def instruction_for(g: WorldGraph, path: Sequence[int]) -> tuple[str, ...]:
    scenes: list[str] = []
    for n in path:
        s = g.nodes[n].scene
        if not scenes or scenes[-1] != s:
            scenes.append(s)
    toks = ["leave", "the", scenes[0]]
    for s in scenes[1:-1]:
        toks += [",", "walk", "past", "the", s]
    toks += [",", "stop", "at", "the", g.nodes[path[-1]].scene]
    return tuple(toks)


@dataclass
class World:
    graph: WorldGraph
    panoramas: dict[int, Panorama]
    episodes: list[Episode]
    name: str = "world"

    def observe(self, node: int, generated: Mapping[int, Panorama] | None = None) -> "Observation":
        if generated is not None and node in generated:
            return Observation.from_panorama(node, generated[node], "generated")
        return Observation.from_panorama(node, self.panoramas[node], "original")


def _grow_layout(rng: np.random.Generator, count: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    cells = [(0, 0)]
    index = {(0, 0): 0}
    tree = []
    steps = ((1, 0), (-1, 0), (0, 1), (0, -1))
    while len(cells) < count:
        src = cells[int(rng.integers(0, len(cells)))]
        dx, dy = steps[int(rng.integers(0, 4))]
        cell = (src[0] + dx, src[1] + dy)
        if cell in index:
            continue
        index[cell] = len(cells)
        tree.append((index[src], len(cells)))
        cells.append(cell)
    return cells, tree


def make_world(
    seed: int,
    node_count: int,
    spacing: float = 3.0,
    jitter: float = 0.5,
    room_size: int = 2,
    extra_edge_prob: float = 0.5,
    episodes: int = 20,
    path_nodes: tuple[int, int] = (3, 8),
    pano_shape: tuple[int, int] = DEFAULT_PANO_SHAPE,
    style_jitter: float = 0.1,
    name: str = "world",
) -> World:
    """Rooms on a jittered grid, one textured panorama per node, shortest-path episodes."""
    if node_count < 2:
        raise ValueError("a world needs at least two nodes")
    if spacing <= 2 * jitter:
        raise ValueError("jitter too large for the grid spacing")
    rng = substream(seed, "world")
    cells, tree = _grow_layout(rng, node_count)
    index = {c: i for i, c in enumerate(cells)}
    edges = set(tree)
    for (cx, cy), i in index.items():
        for nb in ((cx + 1, cy), (cx, cy + 1)):
            j = index.get(nb)
            if j is not None and (min(i, j), max(i, j)) not in edges and (max(i, j), min(i, j)) not in edges:
                if rng.random() < extra_edge_prob:
                    edges.add((i, j))
    rooms = sorted({(cx // room_size, cy // room_size) for cx, cy in cells})
    labels = list(rng.permutation(len(SCENES)))
    room_scene = {r: SCENES[labels[k % len(SCENES)]] for k, r in enumerate(rooms)}
    nodes = []
    for i, (cx, cy) in enumerate(cells):
        pos = (cx * spacing + rng.uniform(-jitter, jitter), cy * spacing + rng.uniform(-jitter, jitter), 0.0)
        nodes.append(Node(i, tuple(float(v) for v in pos), room_scene[(cx // room_size, cy // room_size)], f"panos/node_{i:04d}.pan"))
    g = WorldGraph(nodes, sorted(edges))
    styles = world_styles(rng, style_jitter)
    panos = {n.id: render_panorama(g, n.id, styles, substream(seed, "world", 1, n.id), pano_shape) for n in nodes}
    eps = sample_episodes(g, substream(seed, "world", 2), episodes, path_nodes)
    return World(g, panos, eps, name)


def sample_episodes(g: WorldGraph, rng: np.random.Generator, count: int, path_nodes=(3, 8)) -> list[Episode]:
    lo, hi = path_nodes
    pairs = []
    for goal in range(len(g)):
        for start in range(len(g)):
            if start == goal:
                continue
            n = len(shortest_path(g, start, goal))
            pairs.append((start, goal, n))
    ok = [(s, t) for s, t, n in pairs if lo <= n <= hi]
    if not ok:
        longest = max(n for _, _, n in pairs)
        ok = [(s, t) for s, t, n in pairs if n == longest]
    picks = rng.choice(len(ok), size=count, replace=len(ok) < count)
    out = []
    for k in picks:
        s, t = ok[int(k)]
        path = shortest_path(g, s, t)
        out.append(Episode(instruction_for(g, path), tuple(path)))
    return out


# ---------------------------------------------------------------------------
# observations and environment mixing


@dataclass
class Observation:
    node: int
    views: list[SubView]
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.views) != N_VIEWS:
            raise ValueError(f"an observation holds exactly {N_VIEWS} views")
        if not self.provenance:
            self.provenance = ["original"] * N_VIEWS

    @classmethod
    def from_panorama(cls, node: int, pano: Panorama, provenance: str = "original") -> "Observation":
        return cls(node, partition(pano), [provenance] * N_VIEWS)

    def pixels(self) -> np.ndarray:
        return np.stack([v.pixels for v in self.views])


@dataclass(frozen=True)
class MixPolicy:
    ratio: float = 0.5
    scope: str = "finetune"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("mix ratio must lie in [0, 1]")
        if self.scope not in ("finetune", "pretrain"):
            raise ValueError("scope must be 'finetune' or 'pretrain'")

    def count(self, k: int) -> int:
        return int(math.floor(self.ratio * k + 0.5))


def mix_selection(k: int, policy: MixPolicy, epoch: int = 0) -> list[int]:
    """Trajectory positions to replace: the first ``round_half_up(p*K)`` entries of a seeded shuffle."""
    rng = np.random.default_rng([policy.seed, epoch])
    return sorted(int(i) for i in rng.permutation(k)[: policy.count(k)])


def mix_environment(
    trajectory: Sequence[Observation], generated: Mapping[int, Observation], policy: MixPolicy, epoch: int = 0
) -> list[Observation]:
    """Swap a seeded ``p`` fraction of trajectory observations for their generated counterparts."""
    chosen = mix_selection(len(trajectory), policy, epoch)
    out = list(trajectory)
    for i in chosen:
        node = trajectory[i].node
        if node not in generated:
            raise KeyError(f"no generated observation for viewpoint {node}")
        gen = generated[node]
        out[i] = Observation(node, gen.views, ["generated"] * N_VIEWS)
    return out


# ---------------------------------------------------------------------------
# files


def world_json(g: WorldGraph) -> dict:
    return {
        "nodes": [{"id": n.id, "pos": list(n.pos), "pano": n.pano, "scene": n.scene} for n in g.nodes],
        "edges": [list(e) for e in g.edges],
    }


def save_world(directory: str | os.PathLike, world: World) -> Path:
    d = Path(directory)
    (d / "panos").mkdir(parents=True, exist_ok=True)
    for n in world.graph.nodes:
        save_panorama(d / n.pano, world.panoramas[n.id])
    (d / "world.json").write_text(json.dumps(world_json(world.graph), indent=1) + "\n", encoding="utf-8")
    write_episodes(d / "episodes.jsonl", world.episodes)
    return d / "world.json"


def write_episodes(path: str | os.PathLike, episodes: Sequence[Episode]) -> None:
    lines = [json.dumps({"instruction": list(e.instruction), "path": list(e.path)}) for e in episodes]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_episodes(path: str | os.PathLike) -> list[Episode]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(Episode(tuple(obj["instruction"]), tuple(int(i) for i in obj["path"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{n}: bad episode ({exc})") from exc
    return out


def graph_from_json(obj: dict) -> WorldGraph:
    try:
        nodes = [Node(int(n["id"]), tuple(float(v) for v in n["pos"]), str(n["scene"]), str(n["pano"])) for n in obj["nodes"]]
        edges = [(int(a), int(b)) for a, b in obj["edges"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad world file ({exc})") from exc
    return WorldGraph(nodes, edges)


def load_world(path: str | os.PathLike, episodes: str | os.PathLike | None = None) -> World:
    path = Path(path)
    if path.is_dir():
        path = path / "world.json"
    g = graph_from_json(json.loads(path.read_text(encoding="utf-8")))
    panos = {n.id: load_panorama(path.parent / n.pano) for n in g.nodes}
    ep_path = Path(episodes) if episodes else path.parent / "episodes.jsonl"
    eps = read_episodes(ep_path) if ep_path.exists() else []
    for e in eps:
        e.validate(g)
    return World(g, panos, eps, path.parent.name)
