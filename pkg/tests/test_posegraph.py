import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, strategies as st

from multireg.geometry import RigidPose, compose, inverse, random_pose, relative, rotation_error
from multireg.matching import CorrespondenceSet, DescriptorSet
from multireg.posegraph import (DisconnectedGraph, GraphError, InsufficientCorrespondence, KTooLarge, PoseGraph,
                                RansacConfig, compute_icr, compute_ipr, graph_from_json, graph_to_json, load_graph,
                                load_poses, maximum_spanning_tree, permute_init, ransac_register, save_graph,
                                save_poses, select_topk, spanning_init, tree_center)
from oracles import icr_loop, ipr_exhaustive, spanning_trees, topk_loop

seeds = st.integers(0, 2**32 - 1)


# ---------------------------------------------------------------- selection

def test_topk_complete_case():
    assert select_topk(np.random.default_rng(0).random((3, 3)), 2) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]


def test_topk_zero_row_still_contributes():
    o = np.array([[1, .9, .8, 0], [.9, 1, .7, 0], [.8, .7, 1, 0], [0, 0, 0, 1.]])
    edges = select_topk(o, 1)
    assert any(3 in e for e in edges)


@given(seeds, st.integers(2, 9), st.integers(1, 8))
def test_topk_matches_loop_oracle(seed, n, k):
    k = min(k, n - 1)
    o = np.random.default_rng(seed).integers(0, 4, (n, n)) / 4.0  # coarse values force ties
    assert select_topk(o, k) == topk_loop(o, k)


@given(seeds, st.integers(3, 10), st.integers(1, 9))
def test_topk_degree_bound(seed, n, k):
    k = min(k, n - 1)
    edges = select_topk(np.random.default_rng(seed).random((n, n)), k)
    deg = np.bincount([u for u, _ in edges], minlength=n)
    assert np.all(deg >= k)


def test_topk_rejects_bad_k():
    with pytest.raises(KTooLarge):
        select_topk(np.eye(4), 4)
    with pytest.raises(KTooLarge):
        select_topk(np.eye(4), 0)


# ----------------------------------------------------------------- pairwise

def planted_correspondences(rng, m=60, inlier=0.6):
    pose = random_pose(rng, 2.0)
    b_pts = rng.uniform(-1, 1, (m, 3))
    a_pts = pose.apply(b_pts)
    n_out = int(round(m * (1 - inlier)))
    out = rng.choice(m, n_out, replace=False)
    a_pts[out] = rng.uniform(-3, 3, (n_out, 3))
    d = np.ones((m, 4))
    a, b = DescriptorSet(a_pts, d), DescriptorSet(b_pts, d)
    c = CorrespondenceSet(np.stack([np.arange(m), np.arange(m)], 1), np.zeros(m))
    return pose, a, b, c


def test_ransac_noiseless_all_inliers(rng):
    pose, a, b, c = planted_correspondences(rng, inlier=1.0)
    est, mask = ransac_register(c, a, b)
    assert mask.all()
    np.testing.assert_allclose(est.matrix(), pose.matrix(), atol=1e-9)


def test_ransac_success_rate_with_outliers():
    ok = 0
    for trial in range(100):
        rng = np.random.default_rng([21, trial])
        pose, a, b, c = planted_correspondences(rng)
        est, _ = ransac_register(c, a, b, RansacConfig(iterations=1024, seed=trial))
        ok += rotation_error(est.r, pose.r) < 1e-6
    assert ok >= 99


@given(seeds)
def test_ransac_mask_residuals_below_tau(seed):
    rng = np.random.default_rng(seed)
    _, a, b, c = planted_correspondences(rng, m=30, inlier=0.5)
    cfg = RansacConfig(iterations=200, seed=1)
    est, mask = ransac_register(c, a, b, cfg)
    res = np.linalg.norm(a.keypoints[c.pairs[:, 0]] - est.apply(b.keypoints[c.pairs[:, 1]]), axis=1)
    assert np.all(res[mask] < cfg.tau)


def test_ransac_needs_three_correspondences(rng):
    _, a, b, c = planted_correspondences(rng, m=10)
    with pytest.raises(InsufficientCorrespondence):
        ransac_register(CorrespondenceSet(c.pairs[:2], c.distances[:2]), a, b)


@given(seeds)
def test_icr_matches_loop(seed):
    rng = np.random.default_rng(seed)
    pose, a, b, c = planted_correspondences(rng, m=25, inlier=0.7)
    noisy = RigidPose(pose.r, pose.t + rng.normal(0, 0.03, 3))
    assert compute_icr(c, a, b, noisy, 0.07) == icr_loop(c, a, b, noisy, 0.07)


def test_icr_limits(rng):
    pose, a, b, c = planted_correspondences(rng, m=20, inlier=1.0)
    assert compute_icr(c, a, b, pose) == len(c) / len(a)
    far = RigidPose(pose.r, pose.t + 100.0)
    assert compute_icr(c, a, b, far) == 0.0


def test_ipr_cube_corners():
    cube = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    assert compute_ipr(cube, 0.01) == 0.5 == ipr_exhaustive(cube, 0.01)


@given(seeds)
def test_ipr_coplanar_is_one(seed):
    rng = np.random.default_rng(seed)
    pts = np.c_[rng.uniform(-1, 1, (40, 2)), np.zeros(40)]
    assert compute_ipr(random_pose(rng).apply(pts)) == 1.0


@given(seeds)
def test_ipr_in_unit_interval_and_small_clouds_exact(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, (9, 3))
    v = compute_ipr(pts, 0.05)
    assert 0.0 < v <= 1.0
    assert v == ipr_exhaustive(pts, 0.05)


def test_ipr_too_few_points():
    assert compute_ipr(np.zeros((2, 3))) == 1.0


# ------------------------------------------------------------------- graphs

def chain_graph(rng, poses, pairs, prio=None):
    g = PoseGraph(len(poses))
    for i, (u, v) in enumerate(pairs):
        o = 0.5 if prio is None else prio[i]
        g.add_pair(u, v, relative(poses[u], poses[v]), o, 1.0, 0.1)
    return g


def test_reverse_edge_is_inverse(rng):
    g = PoseGraph(2)
    g.add_pair(0, 1, random_pose(rng), 0.5, 0.2, 0.3)
    fwd, rev = g.edges[(0, 1)].transform, g.edges[(1, 0)].transform
    np.testing.assert_allclose(compose(fwd, rev).matrix(), np.eye(4), atol=1e-12)


def test_graph_validation():
    g = PoseGraph(3)
    with pytest.raises(GraphError):
        g.add_pair(1, 1, RigidPose(), 0.5, 0.5, 0.5)
    g.add_pair(0, 1, RigidPose(), 0.5, 0.5, 0.5)
    with pytest.raises(DisconnectedGraph):
        g.validate()
    with pytest.raises(DisconnectedGraph):
        spanning_init(g)


def test_three_cycle_keeps_two_best_edges():
    g = PoseGraph(3)
    for (u, v), o in zip([(0, 1), (1, 2), (0, 2)], [0.9, 0.8, 0.1]):
        g.add_pair(u, v, RigidPose(), o, 1.0, 0.1)
    assert spanning_init(g).tree_edges == [(0, 1), (1, 2)]


def connected_atlas(max_nodes=7):
    for G in nx.graph_atlas_g():
        if 2 <= G.number_of_nodes() <= max_nodes and nx.is_connected(G):
            yield G


def test_mst_matches_exhaustive_enumeration_on_small_graphs():
    rng = np.random.default_rng(0)
    graphs = [G for G in connected_atlas(6)]
    for G in graphs[:: max(1, len(graphs) // 60)]:
        pairs = sorted((min(u, v), max(u, v)) for u, v in G.edges())
        trees = spanning_trees(G.number_of_nodes(), pairs)
        for _ in range(5):
            w = rng.integers(0, 16, len(pairs)) / 16.0
            tree = maximum_spanning_tree(G.number_of_nodes(), [(u, v, x) for (u, v), x in zip(pairs, w)])
            total = sum(w[pairs.index(e)] for e in tree)
            assert total == (trees @ w).max()


def test_tree_center_of_path():
    assert tree_center(5, [(0, 1), (1, 2), (2, 3), (3, 4)]) == 2
    assert tree_center(4, [(0, 1), (1, 2), (2, 3)]) == 1


@given(seeds, st.integers(2, 9))
def test_spanning_init_exact_on_noiseless_graph(seed, n):
    rng = np.random.default_rng(seed)
    poses = [random_pose(rng) for _ in range(n)]
    pairs = sorted({(min(a, b), max(a, b)) for a, b in zip(range(n - 1), range(1, n))}
                   | {tuple(sorted(rng.choice(n, 2, replace=False).tolist())) for _ in range(n)})
    init = spanning_init(chain_graph(rng, poses, pairs, rng.uniform(0.1, 1, len(pairs))))
    assert np.array_equal(init.poses[init.root].r, np.eye(3)) and np.array_equal(init.poses[init.root].t, np.zeros(3))
    # identical to the ground truth after removing the root's gauge
    gauge = inverse(poses[init.root])
    for p, q in zip(init.poses, poses):
        np.testing.assert_allclose(p.matrix(), compose(q, gauge).matrix(), atol=1e-9)


def test_spanning_init_hops_and_priority(rng):
    poses = [random_pose(rng) for _ in range(4)]
    init = spanning_init(chain_graph(rng, poses, [(0, 1), (1, 2), (2, 3)], [0.5, 0.5, 0.5]))
    assert init.root == 1
    np.testing.assert_array_equal(init.hops, [1, 0, 1, 2])
    np.testing.assert_allclose(init.priority, [0.5, 1.0, 0.5, 0.25])


@given(seeds)
def test_permute_init_matches_relabelled_graph(seed):
    rng = np.random.default_rng(seed)
    n = 6
    poses = [random_pose(rng) for _ in range(n)]
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]
    g = chain_graph(rng, poses, pairs, rng.permutation(len(pairs)) / 10 + 0.1)
    perm = rng.permutation(n)
    a, b = permute_init(spanning_init(g), perm), spanning_init(g.relabeled(perm))
    assert a.tree_edges == b.tree_edges
    if a.root == b.root:  # a two-centre tree may resolve its tie differently after relabelling
        np.testing.assert_array_equal(a.hops, b.hops)


def test_graph_json_roundtrip(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(4)]
    g = chain_graph(rng, poses, [(0, 1), (1, 2), (2, 3), (0, 3)])
    save_graph(tmp_path / "g.json", g)
    h = load_graph(tmp_path / "g.json")
    assert h.edge_list() == g.edge_list()
    for e in g.edges:
        np.testing.assert_array_equal(h.edges[e].transform.matrix(), g.edges[e].transform.matrix())
    assert graph_to_json(graph_from_json(graph_to_json(g))) == graph_to_json(g)
    save_poses(tmp_path / "p.json", poses)
    for p, q in zip(load_poses(tmp_path / "p.json"), poses):
        np.testing.assert_array_equal(p.matrix(), q.matrix())
