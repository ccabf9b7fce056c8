"""Geometric cluster trees and block trees with a standard admissibility test."""

import json
import math

import numpy as np


class Cluster:
    __slots__ = ("id", "start", "end", "sons", "father", "level", "bmin", "bmax")

    def __init__(self, id, start, end, level, bmin, bmax, father=None):
        self.id = id
        self.start = start
        self.end = end
        self.level = level
        self.bmin = bmin
        self.bmax = bmax
        self.father = father
        self.sons = ()

    @property
    def size(self):
        return self.end - self.start

    @property
    def is_leaf(self):
        return not self.sons

    def parts(self):
        """Sons, or the cluster itself for a leaf (row/column split of a block)."""
        return self.sons if self.sons else (self,)

    def diameter(self):
        return float(np.linalg.norm(self.bmax - self.bmin))

    def __repr__(self):
        return f"Cluster(id={self.id}, [{self.start}:{self.end}), level={self.level})"


def bbox_distance(t, s):
    gap = np.maximum(0.0, np.maximum(s.bmin - t.bmax, t.bmin - s.bmax))
    return float(np.linalg.norm(gap))


def is_admissible(t, s, eta=1.0):
    dist = bbox_distance(t, s)
    if dist <= 0.0:
        return False
    return max(t.diameter(), s.diameter()) <= 2.0 * eta * dist


class ClusterTree:
    def __init__(self, root, clusters, perm, leaf_size, points):
        self.root = root
        self.clusters = clusters
        self.perm = perm
        self.leaf_size = leaf_size
        self.points = points  # in permuted order

    @property
    def n(self):
        return self.root.size

    def __len__(self):
        return len(self.clusters)

    def leaves(self):
        return [c for c in self.clusters if c.is_leaf]

    def depth(self):
        """Number of levels (a single cluster has depth 1)."""
        return 1 + max(c.level for c in self.clusters)

    def subtree(self, t):
        """Clusters below and including t, fathers before sons."""
        out = [t]
        i = 0
        while i < len(out):
            out.extend(out[i].sons)
            i += 1
        return out

    def ancestors(self, t):
        out = []
        while t.father is not None:
            t = t.father
            out.append(t)
        return out


def build_cluster_tree(points, leaf_size=32):
    """Binary bisection at the coordinate median along the longest bounding box axis."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if n < 1:
        raise ValueError("need at least one point")
    if leaf_size < 1:
        raise ValueError("leaf_size must be positive")
    perm = np.arange(n)
    clusters = []

    def make(start, end, level, father):
        idx = perm[start:end]
        pts = points[idx]
        c = Cluster(len(clusters), start, end, level, pts.min(axis=0), pts.max(axis=0), father)
        clusters.append(c)
        if end - start > leaf_size:
            axis = int(np.argmax(c.bmax - c.bmin))
            # ties are broken by the original index
            order = np.lexsort((idx, pts[:, axis]))
            perm[start:end] = idx[order]
            mid = start + (end - start) // 2
            c.sons = (make(start, mid, level + 1, c), make(mid, end, level + 1, c))
        return c

    root = make(0, n, 0, None)
    return ClusterTree(root, clusters, perm, leaf_size, points[perm])


class Block:
    __slots__ = ("id", "row", "col", "sons", "admissible")

    def __init__(self, id, row, col):
        self.id = id
        self.row = row
        self.col = col
        self.sons = None
        self.admissible = False

    @property
    def is_leaf(self):
        return self.sons is None

    def __repr__(self):
        kind = "adm" if self.admissible else ("inadm" if self.is_leaf else "sub")
        return f"Block({self.id}, {self.row.id}x{self.col.id}, {kind})"


class BlockTree:
    def __init__(self, rows, cols, eta):
        self.rows = rows
        self.cols = cols
        self.eta = eta
        self.blocks = []
        self.lookup = {}
        self.root = self._build(rows.root, cols.root)
        self.admissible_leaves = [b for b in self.blocks if b.admissible]
        self.inadmissible_leaves = [b for b in self.blocks if b.is_leaf and not b.admissible]

    def _build(self, t, s):
        b = Block(len(self.blocks), t, s)
        self.blocks.append(b)
        self.lookup[(t.id, s.id)] = b
        if is_admissible(t, s, self.eta):
            b.admissible = True
        elif not (t.is_leaf and s.is_leaf):
            b.sons = [[self._build(ti, si) for si in s.parts()] for ti in t.parts()]
        return b

    def block(self, t, s):
        return self.lookup.get((t.id, s.id))

    def subtree(self, b):
        out = [b]
        i = 0
        while i < len(out):
            if out[i].sons is not None:
                for row in out[i].sons:
                    out.extend(row)
            i += 1
        return out

    def sparsity(self):
        rows = {}
        cols = {}
        for b in self.blocks:
            rows[b.row.id] = rows.get(b.row.id, 0) + 1
            cols[b.col.id] = cols.get(b.col.id, 0) + 1
        return max(max(rows.values()), max(cols.values()))

    def stats(self):
        return {
            "n": self.rows.n,
            "depth": self.rows.depth(),
            "clusters": len(self.rows),
            "blocks": len(self.blocks),
            "admissible_leaves": len(self.admissible_leaves),
            "inadmissible_leaves": len(self.inadmissible_leaves),
            "c_sp": self.sparsity(),
            "eta": self.eta,
            "leaf_size": self.rows.leaf_size,
        }

    def stats_json(self):
        return json.dumps(self.stats(), sort_keys=True)


def build_block_tree(rows, cols=None, eta=1.0):
    return BlockTree(rows, rows if cols is None else cols, eta)


def expected_depth(n, leaf_size):
    return 1 + max(0, math.ceil(math.log2(n / leaf_size)))
