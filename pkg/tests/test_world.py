import json
import math

import numpy as np
import pytest

from panoenv import world as W
from panoenv.checkpoint import FormatError
from panoenv.pano import N_VIEWS, view_index


def floyd_warshall(g):
    n = len(g)
    D = np.full((n, n), np.inf)
    np.fill_diagonal(D, 0.0)
    for a, nbrs in g.adj.items():
        for b, w in nbrs.items():
            D[a, b] = w
    for k in range(n):
        D = np.minimum(D, D[:, k : k + 1] + D[k : k + 1, :])
    return D


def first_hop(g, D, cur, goal):
    if cur == goal:
        return W.STOP
    costs = {nb: g.adj[cur][nb] + D[nb, goal] for nb in g.adj[cur]}
    best = min(costs.values())
    return min(nb for nb, c in costs.items() if c <= best + 1e-9)


def random_graph(seed):
    """Integer lattice positions so equal-cost alternatives (ties) are common."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 14))
    cells = set()
    while len(cells) < n:
        cells.add((int(rng.integers(0, 4)), int(rng.integers(0, 4))))
    cells = sorted(cells, key=lambda c: rng.random())
    nodes = [W.Node(i, (float(x), float(y), 0.0), "porch") for i, (x, y) in enumerate(cells)]
    edges = []
    for i in range(1, n):
        edges.append((int(rng.integers(0, i)), i))
    for _ in range(n):
        a, b = rng.integers(0, n, size=2)
        if a != b:
            edges.append((int(a), int(b)))
    return W.WorldGraph(nodes, edges)


def graphs():
    for s in range(25):
        yield f"world{s}", W.make_world(100 + s, int(np.random.default_rng(s).integers(6, 16)), episodes=1).graph
    for s in range(25):
        yield f"lattice{s}", random_graph(s)


GRAPHS = list(graphs())


@pytest.mark.parametrize("name,g", GRAPHS, ids=[n for n, _ in GRAPHS])
def test_oracle_matches_floyd_warshall_first_hop(name, g):
    D = floyd_warshall(g)
    for goal in range(len(g)):
        for cur in range(len(g)):
            assert W.oracle_action(g, cur, goal) == first_hop(g, D, cur, goal), (cur, goal)


@pytest.mark.parametrize("name,g", GRAPHS, ids=[n for n, _ in GRAPHS])
def test_geodesic_matches_floyd_warshall(name, g):
    # exact equality: both sides report the correctly rounded sum along their own shortest path
    D = floyd_warshall(g)
    for a in range(len(g)):
        for b in range(len(g)):
            path = [a]
            while path[-1] != b:
                path.append(first_hop(g, D, path[-1], b))
            exact = math.fsum(g.adj[u][v] for u, v in zip(path[:-1], path[1:]))
            assert W.geodesic(g, a, b) == exact
            assert abs(W.geodesic(g, a, b) - D[a, b]) <= 1e-12


def test_shortest_path_follows_oracle(small_world):
    g = small_world.graph
    for s in range(len(g)):
        for t in range(len(g)):
            p = W.shortest_path(g, s, t)
            assert p[0] == s and p[-1] == t
            assert g.path_length(p) == pytest.approx(W.geodesic(g, s, t), abs=1e-12)


def test_graph_validation():
    nodes = [W.Node(i, (float(i), 0.0, 0.0), "porch") for i in range(3)]
    with pytest.raises(ValueError, match="not connected"):
        W.WorldGraph(nodes, [(0, 1)])
    with pytest.raises(ValueError, match="self-loop"):
        W.WorldGraph(nodes, [(0, 0), (1, 2)])
    with pytest.raises(ValueError):
        W.WorldGraph(nodes, [(0, 5)])
    with pytest.raises(ValueError):
        W.WorldGraph(nodes[1:], [(1, 2)])
    g = W.WorldGraph(nodes, [(1, 0), (2, 1), (0, 1)])
    assert g.edges == [(0, 1), (1, 2)]
    with pytest.raises(ValueError):
        g.weight(0, 2)


def test_headings():
    nodes = [W.Node(0, (0.0, 0.0, 0.0), "porch"), W.Node(1, (3.0, 0.0, 0.0), "attic"), W.Node(2, (0.0, 3.0, 0.0), "cellar"), W.Node(3, (3.0, 0.2, 0.0), "stairs")]
    g = W.WorldGraph(nodes, [(0, 1), (0, 2), (0, 3)])
    assert g.heading_to(0, 1) == 0 and g.heading_to(0, 2) == 3 and g.heading_to(1, 0) == 6
    heads = g.neighbor_headings(0)
    assert heads == {1: 0, 2: 3, 3: 1}  # node 3 collides with node 1 and moves one step
    scenes = g.view_scenes(0)
    assert len(scenes) == N_VIEWS
    assert scenes[view_index(0, 1)] == "attic" and scenes[view_index(1, 1)] == "stairs"
    assert scenes[view_index(0, 2)] == "porch"


def test_make_world_shape_and_determinism():
    a = W.make_world(3, 10)
    b = W.make_world(3, 10)
    assert W.world_json(a.graph) == W.world_json(b.graph)
    assert a.episodes == b.episodes
    assert all(np.array_equal(a.panoramas[i].pixels, b.panoramas[i].pixels) for i in a.panoramas)
    c = W.make_world(4, 10)
    assert W.world_json(a.graph) != W.world_json(c.graph)
    for n in a.graph.nodes:
        p = a.panoramas[n.id].pixels
        assert p.shape == (24, 96, 3) and p.min() >= 0 and p.max() <= 1
    assert len(a.episodes) == 20
    for e in a.episodes:
        e.validate(a.graph)
        assert 3 <= len(e.path) <= 8
        assert list(e.path) == W.shortest_path(a.graph, e.start, e.goal)
        assert e.instruction[-1] == a.graph.nodes[e.goal].scene


def test_make_world_edge_geometry():
    w = W.make_world(5, 16)
    for a, b in w.graph.edges:
        assert 3.0 - 1.5 < w.graph.weight(a, b) < 3.0 + 1.5


def test_make_world_rejects_tiny():
    with pytest.raises(ValueError):
        W.make_world(0, 1)


def test_small_world_falls_back_to_longest_paths():
    w = W.make_world(1, 2, episodes=3)
    assert all(len(e.path) == 2 for e in w.episodes)


def test_instruction_template():
    nodes = [W.Node(i, (3.0 * i, 0.0, 0.0), s) for i, s in enumerate(["kitchen", "kitchen", "hallway", "garage"])]
    g = W.WorldGraph(nodes, [(0, 1), (1, 2), (2, 3)])
    assert " ".join(W.instruction_for(g, [0, 1, 2, 3])) == "leave the kitchen , walk past the hallway , stop at the garage"


def test_doorway_shows_neighbour_scene(small_world):
    g = small_world.graph
    for n in range(len(g)):
        for nb, h in g.neighbor_headings(n).items():
            if g.nodes[nb].scene != g.nodes[n].scene:
                views = small_world.observe(n).views
                own = views[view_index((h + 6) % 12, 1)].pixels
                door = views[view_index(h, 1)].pixels
                assert not np.allclose(own, door)


# ---------------------------------------------------------------------------
# environment mixing


def test_mix_counts():
    assert W.MixPolicy(0.5).count(7) == 4
    assert W.MixPolicy(0.5).count(5) == 3
    assert W.MixPolicy(0.1).count(5) == 1
    assert W.MixPolicy(0.0).count(8) == 0
    assert W.MixPolicy(1.0).count(8) == 8
    with pytest.raises(ValueError):
        W.MixPolicy(1.3)
    with pytest.raises(ValueError):
        W.MixPolicy(0.5, scope="eval")


def test_mix_selection_seeded_and_epoch_dependent():
    pol = W.MixPolicy(0.5, seed=3)
    a = W.mix_selection(7, pol, 0)
    assert a == W.mix_selection(7, pol, 0) and len(a) == 4 and len(set(a)) == 4
    assert any(W.mix_selection(7, pol, e) != a for e in range(1, 6))


def test_mix_environment(small_world):
    ep = small_world.episodes[0]
    traj = [small_world.observe(n) for n in ep.path]
    gen = {n: W.Observation(n, [v for v in small_world.observe(n).views]) for n in ep.path}
    out = W.mix_environment(traj, gen, W.MixPolicy(0.0), 0)
    assert all(o is t for o, t in zip(out, traj))
    out = W.mix_environment(traj, gen, W.MixPolicy(0.5, seed=1), 2)
    flagged = [i for i, o in enumerate(out) if o.provenance[0] == "generated"]
    assert flagged == W.mix_selection(len(traj), W.MixPolicy(0.5, seed=1), 2)
    assert all(o.node == t.node for o, t in zip(out, traj))
    with pytest.raises(KeyError):
        W.mix_environment(traj, {}, W.MixPolicy(1.0), 0)


def test_observation_requires_36_views(small_world):
    obs = small_world.observe(0)
    assert obs.pixels().shape == (36, 8, 8, 3)
    with pytest.raises(ValueError):
        W.Observation(0, obs.views[:10])


# ---------------------------------------------------------------------------
# files


def test_world_io_round_trip(tmp_path, small_world):
    W.save_world(tmp_path / "w", small_world)
    back = W.load_world(tmp_path / "w")
    assert W.world_json(back.graph) == W.world_json(small_world.graph)
    assert back.episodes == small_world.episodes
    for i, p in small_world.panoramas.items():
        assert np.array_equal(back.panoramas[i].pixels, p.pixels)
    obj = json.loads((tmp_path / "w" / "world.json").read_text())
    assert set(obj) == {"nodes", "edges"}


def test_bad_episode_file(tmp_path):
    (tmp_path / "e.jsonl").write_text('{"instruction": ["a"]}\n')
    with pytest.raises(FormatError):
        W.read_episodes(tmp_path / "e.jsonl")


def test_bad_world_file():
    with pytest.raises(FormatError):
        W.graph_from_json({"nodes": [{"id": 0}], "edges": []})
