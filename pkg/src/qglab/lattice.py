"""Cubic-lattice quantum graph restricted to edge-bounded boxes.

The ambient graph has vertex set Z^d and one unit edge between each pair of
nearest neighbours, oriented in the direction of the increasing coordinate.
A box with even side length centred at a lattice point cuts no edge interior,
so its restriction is obtained by keeping exactly the edges contained in the
closed box.  This module builds those finite graphs and supplies the geometric
predicates (region masks, set distances, unit-cell intervals) that the
spectral and resolvent machinery relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

MAX_DIMENSION = 3

__all__ = [
    "LatticeBox",
    "GraphRegion",
    "GraphPoint",
    "LatticeGraph",
    "build_graph",
    "region_mask",
    "set_distance",
    "is_suitable",
    "is_override_suitable",
    "next_override_suitable",
    "segment_distance",
]


def is_suitable(side: int) -> bool:
    """Side lengths that admit the interior/collar decomposition at full margin:
    divisible by 6 but not by 12, and at least 42."""
    return side % 6 == 0 and side % 12 != 0 and side >= 42


def is_override_suitable(side: int) -> bool:
    """Relaxed predicate for desk-scale runs: divisible by 6 and at least 18."""
    return side % 6 == 0 and side >= 18


def next_override_suitable(side: float) -> int:
    """Smallest override-suitable integer side >= ``side``."""
    n = max(18, int(np.ceil(side)))
    while n % 6 != 0:
        n += 1
    return n


@dataclass(frozen=True)
class LatticeBox:
    """Closed axis-aligned box ``center + [-side/2, side/2]^d``.

    Only even sides centred at lattice points are allowed; those are exactly
    the boxes whose boundary meets edges only in whole edges or endpoints.
    """

    dimension: int
    side: int
    center: tuple = None

    def __post_init__(self):
        if not (1 <= self.dimension <= MAX_DIMENSION):
            raise ValueError(f"dimension must be in 1..{MAX_DIMENSION}, got {self.dimension}")
        if self.side < 1:
            raise ValueError(f"side must be >= 1, got {self.side}")
        if self.side % 2 != 0:
            raise ValueError(
                f"side must be even so the box boundary avoids edge interiors, got {self.side}"
            )
        if self.center is None:
            object.__setattr__(self, "center", (0,) * self.dimension)
        else:
            center = tuple(int(c) for c in self.center)
            if len(center) != self.dimension:
                raise ValueError("center has wrong dimension")
            object.__setattr__(self, "center", center)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.int64) - self.side // 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.int64) + self.side // 2

    @property
    def volume(self) -> int:
        return self.side**self.dimension

    @property
    def suitable(self) -> bool:
        return is_suitable(self.side)

    @property
    def override_suitable(self) -> bool:
        return is_override_suitable(self.side)

    def shrunk(self, new_side: int) -> "LatticeBox":
        return LatticeBox(self.dimension, new_side, self.center)

    def contains_points(self, pts: np.ndarray, closed: bool = True) -> np.ndarray:
        """Vectorised membership test for an (n, d) array of points."""
        pts = np.atleast_2d(pts)
        if closed:
            return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)
        return np.all((pts > self.lo) & (pts < self.hi), axis=1)


@dataclass(frozen=True)
class GraphRegion:
    """A geometric sub-domain of a box, realised on the graph as the set of
    edges contained in the region's closure.

    kind is one of
      'full'    -- the whole box,
      'int'     -- the concentric box of side L/3,
      'out'     -- the collar: box minus the open concentric box of side L-12,
      'box'     -- a custom concentric or shifted sub-box (params: center, side),
      'annulus' -- custom closed outer box minus open inner box
                   (params: center, outer, inner).
    """

    box: LatticeBox
    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in ("full", "int", "out", "box", "annulus"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.kind in ("int", "out"):
            L = self.box.side
            if self.kind == "int" and L % 6 != 0:
                raise ValueError("interior region needs side divisible by 6")
            if self.kind == "out" and L <= 12:
                raise ValueError("collar region needs side > 12")

    def outer_box(self) -> LatticeBox:
        if self.kind == "full":
            return self.box
        if self.kind == "int":
            return self.box.shrunk(self.box.side // 3)
        if self.kind == "out":
            return self.box
        if self.kind == "box":
            center, side = self.params
            return LatticeBox(self.box.dimension, side, center)
        center, outer, _ = self.params
        return LatticeBox(self.box.dimension, outer, center)

    def inner_box(self):
        """Open box excluded from the region, or None."""
        if self.kind == "out":
            return self.box.shrunk(self.box.side - 12)
        if self.kind == "annulus":
            center, _, inner = self.params
            return LatticeBox(self.box.dimension, inner, center)
        return None

    def contains_points(self, pts: np.ndarray) -> np.ndarray:
        """Membership in the region's closure (outer closed, inner open removed)."""
        inside = self.outer_box().contains_points(pts, closed=True)
        inner = self.inner_box()
        if inner is not None:
            inside &= ~inner.contains_points(pts, closed=False)
        return inside


@dataclass(frozen=True)
class GraphPoint:
    """A point on the metric graph: edge index plus coordinate t in [0, 1]."""

    edge: int
    t: float

    def embed(self, graph: "LatticeGraph") -> np.ndarray:
        tail = graph.vertices[graph.edge_tail[self.edge]].astype(float)
        tail[graph.edge_dir[self.edge]] += self.t
        return tail


class LatticeGraph:
    """Immutable restriction of the cubic-lattice graph to a closed box.

    Vertices are the lattice points of the box; edges are the unit segments
    with both endpoints inside.  Edge e runs from ``edge_tail[e]`` to
    ``edge_head[e]`` along coordinate axis ``edge_dir[e]``.
    """

    def __init__(self, box: LatticeBox):
        self.box = box
        d, L = box.dimension, box.side
        axes = [np.arange(lo, hi + 1) for lo, hi in zip(box.lo, box.hi)]
        grids = np.meshgrid(*axes, indexing="ij")
        self.vertices = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
        self._vertex_index = {tuple(v): i for i, v in enumerate(self.vertices)}

        tails, heads, dirs = [], [], []
        for k in range(d):
            shift = np.zeros(d, dtype=np.int64)
            shift[k] = 1
            head_pts = self.vertices + shift
            ok = head_pts[:, k] <= box.hi[k]
            for ti in np.nonzero(ok)[0]:
                tails.append(ti)
                heads.append(self._vertex_index[tuple(head_pts[ti])])
                dirs.append(k)
        self.edge_tail = np.asarray(tails, dtype=np.int64)
        self.edge_head = np.asarray(heads, dtype=np.int64)
        self.edge_dir = np.asarray(dirs, dtype=np.int64)

        self.boundary_vertices = np.any(
            (self.vertices == box.lo) | (self.vertices == box.hi), axis=1
        )
        self.degree = np.bincount(
            np.concatenate([self.edge_tail, self.edge_head]), minlength=self.n_vertices
        )

        # midpoints and endpoint coordinates of the embedded edges
        t = self.vertices[self.edge_tail].astype(float)
        h = self.vertices[self.edge_head].astype(float)
        self.edge_p0 = t
        self.edge_p1 = h
        self.edge_mid = 0.5 * (t + h)

    @property
    def dimension(self) -> int:
        return self.box.dimension

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edge_tail)

    @property
    def total_length(self) -> float:
        return float(self.n_edges)

    def vertex_id(self, coords) -> int:
        return self._vertex_index[tuple(int(c) for c in coords)]

    def edge_in_closed_box(self, box: LatticeBox) -> np.ndarray:
        """Edges with both endpoints in the closed box (the segment then lies
        inside by convexity)."""
        return box.contains_points(self.edge_p0) & box.contains_points(self.edge_p1)

    def edge_meets_open_box(self, box: LatticeBox) -> np.ndarray:
        """Edges whose intersection with the open box is nonempty."""
        lo, hi = box.lo.astype(float), box.hi.astype(float)
        pmin = np.minimum(self.edge_p0, self.edge_p1)
        pmax = np.maximum(self.edge_p0, self.edge_p1)
        # per coordinate the edge spans [pmin_j, pmax_j]; the open box is met
        # iff every coordinate interval overlaps the open interval (lo_j, hi_j)
        return np.all((pmax > lo) & (pmin < hi), axis=1)

    def incident_edges(self, vertex: int):
        """(edge index, endpoint flag) pairs, flag 0 for tail and 1 for head."""
        out = [(int(e), 0) for e in np.nonzero(self.edge_tail == vertex)[0]]
        out += [(int(e), 1) for e in np.nonzero(self.edge_head == vertex)[0]]
        return out

    def adjacency(self):
        ones = np.ones(self.n_edges)
        n = self.n_vertices
        a = coo_matrix((ones, (self.edge_tail, self.edge_head)), shape=(n, n))
        return (a + a.T).tocsr()

    def describe(self) -> str:
        """Structured text dump of the graph for debugging and export."""
        lines = [
            f"# lattice graph: d={self.dimension} side={self.box.side} center={self.box.center}",
            f"# vertices: {self.n_vertices}  edges: {self.n_edges}",
            "[vertices]",
        ]
        for i, v in enumerate(self.vertices):
            tag = " boundary" if self.boundary_vertices[i] else ""
            lines.append(f"{i} " + " ".join(str(int(c)) for c in v) + tag)
        lines.append("[edges]")
        for e in range(self.n_edges):
            lines.append(
                f"{e} {self.edge_tail[e]} -> {self.edge_head[e]} axis={self.edge_dir[e]}"
            )
        return "\n".join(lines) + "\n"


def build_graph(box: LatticeBox, max_dim: int = MAX_DIMENSION) -> LatticeGraph:
    """Construct the restriction of the lattice graph to a closed box.

    Rejects dimensions above ``max_dim`` and boxes that are not edge-bounded
    (LatticeBox already enforces even side and integer center).
    """
    if box.dimension > max_dim:
        raise ValueError(f"dimension {box.dimension} exceeds limit {max_dim}")
    graph = LatticeGraph(box)
    # Kirchhoff-degree bookkeeping sanity: every edge has two endpoints.
    assert graph.degree.sum() == 2 * graph.n_edges
    return graph


def closed_form_edge_count(d: int, L: int) -> int:
    """Exact number of lattice edges in a closed box of even side L."""
    return d * L * (L + 1) ** (d - 1)


def region_mask(
    graph: LatticeGraph, region: GraphRegion, allow_override: bool = False
) -> np.ndarray:
    """Boolean edge mask: edges of the graph contained in the region closure.

    Interior and collar regions require a suitable box (or the override tier
    when ``allow_override`` is set), because only then is the decomposition
    geometrically meaningful.
    """
    if region.box != graph.box:
        raise ValueError("region belongs to a different box")
    if region.kind in ("int", "out"):
        ok = graph.box.suitable or (allow_override and graph.box.override_suitable)
        if not ok:
            raise ValueError(
                f"side {graph.box.side} is not suitable; pass allow_override=True "
                "for sides >= 18 divisible by 6"
            )
    outer = region.outer_box()
    if (outer.side % 2) != 0:
        raise ValueError("region is not edge-bounded (odd side)")
    mask = graph.edge_in_closed_box(outer)
    inner = region.inner_box()
    if inner is not None:
        mask &= ~graph.edge_meets_open_box(inner)
    return mask


def _segment_endpoints(graph: LatticeGraph, mask: np.ndarray):
    idx = np.nonzero(mask)[0]
    return graph.edge_p0[idx], graph.edge_p1[idx]


def segment_distance(p0, p1, q0, q1) -> np.ndarray:
    """Pairwise Euclidean distance between segments [p0,p1] and [q0,q1].

    Standard clamped quadratic minimisation; vectorised over leading axes.
    Inputs broadcast: p* of shape (na, 1, d) against q* of shape (1, nb, d).
    """
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-14, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = np.where(e > 1e-14, np.clip((b * s + f) / e, 0.0, 1.0), 0.0)
        # recompute s for the clamped t
        s = np.where(a > 1e-14, np.clip((b * t - c) / a, 0.0, 1.0), 0.0)
        t = np.where(e > 1e-14, np.clip((b * s + f) / e, 0.0, 1.0), 0.0)
    closest1 = p0 + s[..., None] * d1
    closest2 = q0 + t[..., None] * d2
    return np.linalg.norm(closest1 - closest2, axis=-1)


def set_distance(
    graph: LatticeGraph,
    mask_a: np.ndarray,
    mask_b: np.ndarray,
    metric: str = "euclidean",
) -> float:
    """Distance between two edge subsets, as point sets on the embedded graph.

    Euclidean (default) is the minimum over segment pairs; the intrinsic
    alternative measures shortest paths along the graph.  Both are symmetric
    and vanish exactly when the closures intersect.
    """
    if not mask_a.any() or not mask_b.any():
        raise ValueError("set_distance needs nonempty edge subsets")
    if metric == "euclidean":
        a0, a1 = _segment_endpoints(graph, mask_a)
        b0, b1 = _segment_endpoints(graph, mask_b)
        dm = segment_distance(
            a0[:, None, :], a1[:, None, :], b0[None, :, :], b1[None, :, :]
        )
        return float(dm.min())
    if metric == "intrinsic":
        # whole closed edges: minimising path enters/leaves at endpoints
        ia = np.nonzero(mask_a)[0]
        ib = np.nonzero(mask_b)[0]
        if np.intersect1d(ia, ib).size:
            return 0.0
        src = np.unique(np.concatenate([graph.edge_tail[ia], graph.edge_head[ia]]))
        dst = np.unique(np.concatenate([graph.edge_tail[ib], graph.edge_head[ib]]))
        dist = dijkstra(graph.adjacency(), directed=False, indices=src)
        return float(dist[:, dst].min())
    raise ValueError(f"unknown metric {metric!r}")


def edge_injection(inner: LatticeGraph, outer: LatticeGraph) -> np.ndarray:
    """Index map: edge e of the inner graph -> the same geometric edge of the
    outer graph.  Raises KeyError if the inner graph is not a subgraph."""
    key = {
        (tuple(outer.vertices[outer.edge_tail[e]]), int(outer.edge_dir[e])): e
        for e in range(outer.n_edges)
    }
    return np.array(
        [
            key[(tuple(inner.vertices[inner.edge_tail[e]]), int(inner.edge_dir[e]))]
            for e in range(inner.n_edges)
        ],
        dtype=np.int64,
    )


def unit_cell_intervals(graph: LatticeGraph, vertex: int):
    """Per-edge sub-intervals of the unit cube centred at a lattice vertex.

    Returns (edge index, t0, t1) triples covering the half-edges adjacent to
    the vertex; this realises the unit-cell characteristic function used for
    eigenfunction profiles.
    """
    out = []
    for e, flag in graph.incident_edges(vertex):
        if flag == 0:
            out.append((e, 0.0, 0.5))
        else:
            out.append((e, 0.5, 1.0))
    return out
