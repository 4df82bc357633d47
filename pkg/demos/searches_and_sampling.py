"""The three searches and the sampler that feed the network.

Every grouping decision in the model reduces to one of: k nearest points,
points within a ball, k nearest feature rows, or farthest point sampling.
This script runs each on a random cloud, cross-checks the kd-tree searches
against direct sorting, and shows how FPS spreads its picks out.
"""
import numpy as np

from aecnn import build_index, farthest_point_sampling, knn, knn_feature_graph
from aecnn.neighbors import ball_query, knn_points

rng = np.random.default_rng(11)
cloud = rng.normal(size=(500, 3))
index = build_index(cloud)
query = np.zeros(3)

# kd-tree kNN vs a plain argsort over all distances.
tree_hits = knn(index, query, 10)
flat_hits = knn_points(cloud, query[None], 10)[0]
print("knn: kd-tree == exhaustive:", np.array_equal(tree_hits, flat_hits))
print("  nearest distances:",
      np.round(np.linalg.norm(cloud[tree_hits[:4]], axis=1), 3))

# Ball query: everything within a radius, nearest first.
hits = ball_query(index, query, radius=0.5, max_k=32)
dists = np.linalg.norm(cloud[hits] - query, axis=1)
print(f"\nball r=0.5: {len(set(hits.tolist()))} distinct hits, "
      f"max distance {dists.max():.3f}")

# Feature-space kNN includes each row itself at distance zero.
features = rng.normal(size=(500, 16))
graph = knn_feature_graph(features, 5)
self_first = (graph.neighbor_lists[:, 0] == np.arange(500)).all()
print(f"\nfeature knn: every row lists itself first: {self_first}")

# FPS picks are spread out: compare min pairwise distance of an FPS subset
# against random subsets of the same size.
fps_idx = farthest_point_sampling(cloud, 24)


def min_pairwise(pts):
    d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    return d[np.triu_indices(len(pts), k=1)].min()


fps_spread = min_pairwise(cloud[fps_idx])
random_spread = np.mean([
    min_pairwise(cloud[rng.choice(500, size=24, replace=False)])
    for _ in range(20)
])
print(f"\nfps min pairwise distance:    {fps_spread:.3f}")
print(f"random subset (mean of 20):   {random_spread:.3f}")
