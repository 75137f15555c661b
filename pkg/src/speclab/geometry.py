"""Structured, graded triangulations of the fixed polygon families used by the lab.

Every mesh is a tensor-product (or log-polar ring) grid split into right
triangles, mirror symmetric about ``x = 0``.  Grids are graded geometrically
toward the points where the Dirichlet/interface data change type: the junction
corners ``(+-eps*w/2, 0)`` of the tube, the ends of a Neumann window, the ends
of the blow-up section.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from .errors import MeshError

__all__ = [
    "Mode",
    "BlowupKind",
    "EdgeTag",
    "DomainSpec",
    "BlowupSpec",
    "MeshParams",
    "Mesh",
    "graded_axis",
    "build_perturbed_domain",
    "build_mixed_domain",
    "build_blowup_domain",
    "refine",
    "validate",
]


class Mode(str, Enum):
    TUBE = "TUBE"
    MIXED = "MIXED"


class BlowupKind(str, Enum):
    PI = "PI"
    HALF_SPACE = "HALF_SPACE"


class EdgeTag(IntEnum):
    DIRICHLET_OUTER = 0
    SIGMA_INTERFACE = 1
    SIGMA_NEUMANN = 2
    ARTIFICIAL = 3


@dataclass(frozen=True)
class DomainSpec:
    """Base rectangle (-1/2, 1/2) x (0, 1) perturbed at the origin.

    ``epsilon * sigma_half_width`` is the half-width of the tube opening (TUBE)
    or of the Neumann window (MIXED).
    """

    mode: Mode
    epsilon: float
    sigma_half_width: float = 0.5
    tube_length: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        eps = self.epsilon
        if not (0.0 <= eps < 1.0) or (self.mode is Mode.TUBE and eps <= 0.0):
            raise MeshError(f"epsilon={eps} outside the admissible range", code="DEGENERATE_SPEC")
        if self.sigma_half_width <= 0.0 or self.tube_length <= 0.0:
            raise MeshError("sigma_half_width and tube_length must be positive", code="DEGENERATE_SPEC")
        if eps * self.sigma_half_width >= 0.5:
            raise MeshError("opening does not fit inside the bottom edge", code="DEGENERATE_SPEC")

    @property
    def opening(self) -> float:
        """Half-width of eps*Sigma."""
        return self.epsilon * self.sigma_half_width


@dataclass(frozen=True)
class BlowupSpec:
    """Truncated blow-up domain: half-disk of radius R (plus the tube for PI)."""

    kind: BlowupKind
    sigma_half_width: float
    truncation_radius: float
    tube_trunc_length: float | None = None
    tube_follows_radius: bool = field(default=False, init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", BlowupKind(self.kind))
        if self.sigma_half_width <= 0:
            raise MeshError("sigma_half_width must be positive", code="DEGENERATE_SPEC")
        if self.truncation_radius <= 2 * self.sigma_half_width:
            raise MeshError("truncation radius must exceed the section width", code="DEGENERATE_SPEC")
        if self.tube_trunc_length is None:
            object.__setattr__(self, "tube_trunc_length", float(self.truncation_radius))
            object.__setattr__(self, "tube_follows_radius", True)
        if self.tube_trunc_length <= 0:
            raise MeshError("tube_trunc_length must be positive", code="DEGENERATE_SPEC")


@dataclass(frozen=True)
class MeshParams:
    """Mesh-size controls.

    ``h_target`` is the element size next to the singular points before
    grading; the first ``grading_levels`` layers halve it repeatedly, each level
    repeated ``per_level`` times.  Away from those points the size grows by
    ``growth`` per cell up to ``h_far`` (defaults to ``h_target``).
    ``core_half`` is the half-size of the tensor core of blow-up meshes.
    """

    h_target: float
    grading_levels: int = 4
    h_far: float | None = None
    growth: float = 1.2
    per_level: int = 2
    core_half: float | None = None

    def __post_init__(self):
        if not self.h_target > 0:
            raise MeshError("h_target must be positive", code="DEGENERATE_SPEC")
        if self.grading_levels < 0 or self.per_level < 1:
            raise MeshError("invalid grading parameters", code="DEGENERATE_SPEC")
        if self.h_far is None:
            object.__setattr__(self, "h_far", float(self.h_target))
        if self.h_far < self.h_target or self.growth < 1.0:
            raise MeshError("h_far must be >= h_target and growth >= 1", code="DEGENERATE_SPEC")


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_tags: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("nodes", "triangles", "edges", "edge_tags"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def h_max(self) -> float:
        return float(_all_edge_lengths(self).max())

    def tagged(self, tag: EdgeTag) -> np.ndarray:
        return self.edges[self.edge_tags == int(tag)]

    def tag_length(self, tag: EdgeTag) -> float:
        e = self.tagged(tag)
        if len(e) == 0:
            return 0.0
        return float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).sum())

    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.nodes, self.triangles, self.edges, self.edge_tags):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> str:
        doc = {
            "nodes": [[_num(x), _num(y)] for x, y in self.nodes],
            "triangles": self.triangles.tolist(),
            "edges": [[int(i), int(j), EdgeTag(t).name] for (i, j), t in zip(self.edges, self.edge_tags)],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str, info: dict | None = None) -> "Mesh":
        doc = json.loads(text)
        edges = doc["edges"]
        return cls(
            nodes=np.array(doc["nodes"], dtype=float).reshape(-1, 2),
            triangles=np.array(doc["triangles"], dtype=np.int64).reshape(-1, 3),
            edges=np.array([[e[0], e[1]] for e in edges], dtype=np.int64).reshape(-1, 2),
            edge_tags=np.array([EdgeTag[e[2]] for e in edges], dtype=np.int8),
            info=dict(info or {}),
        )


def _num(x: float) -> float:
    # 17 significant digits round-trip exactly
    return float(f"{x:.17g}")


# ---------------------------------------------------------------------------
# 1D graded axes


def _segment_nodes(p, q, left_attr, right_attr, params: MeshParams):
    h, g, per = params.h_target, params.grading_levels, params.per_level
    length = q - p
    layers = [h * 2.0 ** (-(g - lev)) for lev in range(g) for _ in range(per)]
    cap = 0.5 * length

    def take(flag):
        if not flag:
            return []
        out, acc = [], 0.0
        for s in layers:
            if acc + s > cap + 1e-14 * length:
                break
            acc += s
            out.append(s)
        return out

    lsz, rsz = take(left_attr), take(right_attr)
    a = p + sum(lsz)
    b = q - sum(rsz)
    left_pts = p + np.cumsum([0.0] + lsz)
    right_pts = q - np.cumsum([0.0] + rsz)[::-1]

    def size(x):
        d = np.full_like(x, np.inf)
        if left_attr:
            d = np.minimum(d, x - p)
        if right_attr:
            d = np.minimum(d, q - x)
        return np.minimum(params.h_far, h + (params.growth - 1.0) * d)

    mid = np.array([a, b])
    if b - a > 1e-14 * length:
        xs = np.linspace(a, b, 4001)
        inv = 1.0 / size(xs)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(xs))])
        n = max(1, int(round(cum[-1])))
        mid = np.interp(np.linspace(0.0, cum[-1], n + 1), cum, xs)
        mid[0], mid[-1] = a, b
    pts = np.concatenate([left_pts[:-1], mid, right_pts[1:]])
    return pts


def graded_axis(lo, hi, breaks, attractors, params: MeshParams, symmetric=False):
    """Nodes of a 1D grid on [lo, hi] containing every break point.

    Cells are graded toward each attractor.  With ``symmetric`` the grid is
    built on [0, hi] and mirrored, so it is exactly symmetric about 0.
    """
    if symmetric:
        if abs(lo + hi) > 1e-15:
            raise MeshError("symmetric axis needs lo == -hi")
        half = graded_axis(0.0, hi, [b for b in breaks if b >= 0] + [0.0], [a for a in attractors if a >= 0], params)
        return np.concatenate([-half[:0:-1], half])
    pts = sorted({float(lo), float(hi), *[float(b) for b in breaks if lo <= b <= hi],
                  *[float(a) for a in attractors if lo <= a <= hi]})
    attr = {float(a) for a in attractors}
    out = [np.array([pts[0]])]
    for p, q in zip(pts[:-1], pts[1:]):
        out.append(_segment_nodes(p, q, p in attr, q in attr, params)[1:])
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# assembly of structured blocks


def _tensor_block(xs, ys):
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()  # (i, j)
    b = idx[1:, :-1].ravel()  # (i+1, j)
    c = idx[1:, 1:].ravel()  # (i+1, j+1)
    d = idx[:-1, 1:].ravel()  # (i, j+1)
    xc = (0.5 * (xs[:-1] + xs[1:]))[:, None].repeat(ny - 1, axis=1).ravel()
    return nodes, _split_quads(a, b, c, d, xc >= 0)


def _split_quads(a, b, c, d, diag_ac):
    # quad a-b-c-d counterclockwise; split along a-c or b-d (mirror pairs)
    t1 = np.where(diag_ac[:, None], np.column_stack([a, b, c]), np.column_stack([a, b, d]))
    t2 = np.where(diag_ac[:, None], np.column_stack([a, c, d]), np.column_stack([b, c, d]))
    return np.vstack([t1, t2])


def _merge(blocks):
    """Glue blocks whose shared nodes have bitwise-identical coordinates."""
    nodes = np.vstack([b[0] for b in blocks])
    offs = np.cumsum([0] + [len(b[0]) for b in blocks])
    tris = np.vstack([b[1] + o for b, o in zip(blocks, offs[:-1])])
    uniq, inv = np.unique(nodes, axis=0, return_inverse=True)
    inv = inv.ravel()
    tris = inv[tris]
    # deterministic order: lexicographic by (y, x)
    order = np.lexsort((uniq[:, 0], uniq[:, 1]))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    nodes = uniq[order]
    tris = rank[tris]
    p = nodes[tris]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    neg = area2 < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return nodes, tris


def _edge_table(tris):
    e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def _all_edge_lengths(mesh):
    e, _ = _edge_table(mesh.triangles)
    return np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)


def _finish(nodes, tris, tagger, info):
    edges, counts = _edge_table(tris)
    if np.any(counts > 2):
        raise MeshError("non-manifold edge produced", code="NONCONFORMING")
    boundary = counts == 1
    tags = tagger(nodes, edges, boundary)
    keep = tags >= 0
    mesh = Mesh(nodes=nodes, triangles=tris.astype(np.int64), edges=edges[keep].astype(np.int64),
                edge_tags=tags[keep].astype(np.int8), info=info)
    validate(mesh)
    return mesh


def _on_segment_y0(nodes, edges, half, tol):
    p, q = nodes[edges[:, 0]], nodes[edges[:, 1]]
    return ((np.abs(p[:, 1]) < tol) & (np.abs(q[:, 1]) < tol)
            & (np.abs(p[:, 0]) <= half + tol) & (np.abs(q[:, 0]) <= half + tol))


# ---------------------------------------------------------------------------
# builders


def _base_axes(spec: DomainSpec, params: MeshParams):
    o = spec.opening
    attractors = [-o, o] if o > 0 else []
    xs = graded_axis(-0.5, 0.5, [0.0], attractors, params, symmetric=True)
    ys = graded_axis(0.0, 1.0, [], [0.0], params) if o > 0 else graded_axis(0.0, 1.0, [], [], params)
    return xs, ys


def build_perturbed_domain(spec: DomainSpec, params: MeshParams) -> Mesh:
    """Rectangle plus the thin tube (-o, o) x (-L, 0], o = eps*w/2."""
    if spec.mode is not Mode.TUBE:
        raise MeshError("build_perturbed_domain needs a TUBE spec", code="DEGENERATE_SPEC")
    o = spec.opening
    if params.h_target > o + 1e-15:
        raise MeshError(f"h_target={params.h_target} does not resolve the tube half-width {o}",
                        code="DEGENERATE_SPEC")
    xs, ys = _base_axes(spec, params)
    xt = xs[np.abs(xs) <= o]
    yt = -graded_axis(0.0, spec.tube_length, [], [0.0], params)[::-1]
    nodes, tris = _merge([_tensor_block(xs, ys), _tensor_block(xt, yt)])
    tol = 1e-12

    def tagger(nodes, edges, boundary):
        tags = np.full(len(edges), -1)
        tags[boundary] = EdgeTag.DIRICHLET_OUTER
        tags[~boundary & _on_segment_y0(nodes, edges, o, tol)] = EdgeTag.SIGMA_INTERFACE
        return tags

    info = {"kind": "TUBE", "epsilon": spec.epsilon, "sigma_half_width": spec.sigma_half_width,
            "tube_length": spec.tube_length, "opening": o, "params": _params_dict(params),
            "corners": [[-o, 0.0], [o, 0.0]], "expected_area": 1.0 + 2 * o * spec.tube_length,
            "expected_boundary": 4.0 + 2 * spec.tube_length, "refinements": 0}
    return _finish(nodes, tris, tagger, info)


def build_mixed_domain(spec: DomainSpec, params: MeshParams) -> Mesh:
    """Rectangle only, with the bottom window |x| < eps*w/2 tagged Neumann.

    For the same spec and params the grid is the restriction of the TUBE mesh
    to the rectangle, so both problems share their discretization of Omega.
    """
    if spec.mode is not Mode.MIXED:
        raise MeshError("build_mixed_domain needs a MIXED spec", code="DEGENERATE_SPEC")
    o = spec.opening
    if o > 0 and params.h_target > o + 1e-15:
        raise MeshError(f"h_target={params.h_target} does not resolve the window half-width {o}",
                        code="DEGENERATE_SPEC")
    xs, ys = _base_axes(spec, params)
    nodes, tris = _merge([_tensor_block(xs, ys)])
    tol = 1e-12

    def tagger(nodes, edges, boundary):
        tags = np.full(len(edges), -1)
        tags[boundary] = EdgeTag.DIRICHLET_OUTER
        if o > 0:
            tags[boundary & _on_segment_y0(nodes, edges, o, tol)] = EdgeTag.SIGMA_NEUMANN
        return tags

    info = {"kind": "MIXED", "epsilon": spec.epsilon, "sigma_half_width": spec.sigma_half_width,
            "opening": o, "params": _params_dict(params), "corners": [[-o, 0.0], [o, 0.0]] if o > 0 else [],
            "expected_area": 1.0, "expected_boundary": 4.0, "refinements": 0}
    return _finish(nodes, tris, tagger, info)


def build_blowup_domain(spec: BlowupSpec, params: MeshParams) -> Mesh:
    """Truncated blow-up domain: half-disk of radius R, plus the tube for PI.

    The half-disk is a graded tensor core [-a, a] x [0, a] surrounded by
    log-polar shells whose radii are a * 2**(j/n); radii that are a power-of-two
    multiple of a therefore give nested meshes.
    """
    w2 = spec.sigma_half_width
    R = spec.truncation_radius
    a = params.core_half if params.core_half is not None else min(2.0 * w2, 0.5 * R)
    if not (w2 < a <= 0.5 * R + 1e-12):
        raise MeshError("core half-size must lie in (w/2, R/2]", code="DEGENERATE_SPEC")
    if params.h_target > w2 + 1e-15:
        raise MeshError("h_target does not resolve the section", code="DEGENERATE_SPEC")
    xs = graded_axis(-a, a, [0.0], [-w2, w2], params, symmetric=True)
    ys = graded_axis(0.0, a, [], [0.0], params)
    blocks = [_tensor_block(xs, ys)]

    # core perimeter: left side upward, top left-to-right, right side downward
    left = np.column_stack([np.full(len(ys), -a), ys])
    top = np.column_stack([xs, np.full(len(xs), a)])[1:]
    right = np.column_stack([np.full(len(ys), a), ys[::-1]])[1:]
    Q = np.vstack([left, top, right])
    S = len(Q) - 1
    # radial step matched to the arc spacing pi*rho/S of the outer shells
    q_target = 1.0 + math.pi / S
    n_double = max(1, int(round(math.log(2.0) / math.log(q_target))))
    J_exact = math.log2(R / a) * n_double
    J = int(round(J_exact))
    if abs(J - J_exact) > 1e-9 or J == 0:
        J = max(1, int(math.ceil(math.log(R / a) / math.log(q_target))))
        rho = a * (R / a) ** (np.arange(J + 1) / J)
    else:
        rho = a * 2.0 ** (np.arange(J + 1) / n_double)
    rho[-1] = R
    beta = np.minimum(1.0, np.log2(rho / a))
    rQ = np.linalg.norm(Q, axis=1)
    shell = [Q]
    for j in range(1, J + 1):
        P = rho[j] * ((1 - beta[j]) * Q / a + beta[j] * Q / rQ[:, None])
        if beta[j] >= 1.0:
            P = rho[j] * Q / rQ[:, None]
        shell.append(P)
    ring_nodes = np.vstack(shell)
    idx = np.arange((J + 1) * (S + 1)).reshape(J + 1, S + 1)
    A = idx[:-1, :-1].ravel()
    B = idx[:-1, 1:].ravel()
    C = idx[1:, 1:].ravel()
    D = idx[1:, :-1].ravel()
    s_index = np.tile(np.arange(S), J)
    blocks.append((ring_nodes, _split_quads(A, B, C, D, s_index < S // 2)))

    if spec.kind is BlowupKind.PI:
        xt = xs[np.abs(xs) <= w2]
        lt = spec.tube_trunc_length
        yt_near = ys[ys <= min(a, lt)]
        step = (yt_near[-1] - yt_near[-2]) if len(yt_near) > 1 else params.h_far
        rest = lt - yt_near[-1]
        extra = np.linspace(yt_near[-1], lt, max(1, int(math.ceil(rest / max(step, 1e-300)))) + 1)[1:] if rest > 1e-14 else []
        yt = -np.concatenate([yt_near, extra])[::-1]
        blocks.append(_tensor_block(xt, yt))

    nodes, tris = _merge(blocks)
    tol = 1e-9 * R

    def tagger(nodes, edges, boundary):
        tags = np.full(len(edges), -1)
        p, q = nodes[edges[:, 0]], nodes[edges[:, 1]]
        tags[boundary] = EdgeTag.DIRICHLET_OUTER
        on_arc = (np.abs(np.linalg.norm(p, axis=1) - R) < tol) & (np.abs(np.linalg.norm(q, axis=1) - R) < tol)
        tags[boundary & on_arc] = EdgeTag.ARTIFICIAL
        if spec.kind is BlowupKind.PI:
            bottom = (np.abs(p[:, 1] + spec.tube_trunc_length) < tol) & (np.abs(q[:, 1] + spec.tube_trunc_length) < tol)
            tags[boundary & bottom] = EdgeTag.ARTIFICIAL
            tags[~boundary & _on_segment_y0(nodes, edges, w2, tol)] = EdgeTag.SIGMA_INTERFACE
        else:
            tags[boundary & _on_segment_y0(nodes, edges, w2, tol)] = EdgeTag.SIGMA_NEUMANN
        return tags

    info = {"kind": f"BLOWUP_{spec.kind.value}", "sigma_half_width": w2, "truncation_radius": R,
            "tube_trunc_length": spec.tube_trunc_length, "core_half": a, "params": _params_dict(params),
            "corners": [[-w2, 0.0], [w2, 0.0]], "refinements": 0}
    return _finish(nodes, tris, tagger, info)


def _params_dict(params: MeshParams) -> dict:
    return {"h_target": params.h_target, "grading_levels": params.grading_levels, "h_far": params.h_far,
            "growth": params.growth, "per_level": params.per_level, "core_half": params.core_half}


# ---------------------------------------------------------------------------


def refine(mesh: Mesh) -> Mesh:
    """Uniform red refinement: every triangle split in four at edge midpoints."""
    tris = mesh.triangles
    n = len(mesh.nodes)
    edges, _ = _edge_table(tris)
    mid = n + np.arange(len(edges))
    key = edges[:, 0] * (n + 1) + edges[:, 1]
    order = np.argsort(key)
    skey = key[order]

    def mid_of(i, j):
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        return mid[order[np.searchsorted(skey, lo * (n + 1) + hi)]]

    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, bc, ca = mid_of(a, b), mid_of(b, c), mid_of(c, a)
    new_tris = np.vstack([np.column_stack(t) for t in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
    new_nodes = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])])
    te = mesh.edges
    tm = mid_of(te[:, 0], te[:, 1])
    child_edges = np.vstack([np.column_stack([te[:, 0], tm]), np.column_stack([tm, te[:, 1]])])
    child_tags = np.concatenate([mesh.edge_tags, mesh.edge_tags])

    order = np.lexsort((new_nodes[:, 0], new_nodes[:, 1]))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    new_nodes = new_nodes[order]
    new_tris = rank[new_tris]
    child_edges = np.sort(rank[child_edges], axis=1)
    srt = np.lexsort((child_edges[:, 1], child_edges[:, 0]))
    info = dict(mesh.info)
    info["refinements"] = info.get("refinements", 0) + 1
    out = Mesh(nodes=new_nodes, triangles=new_tris.astype(np.int64), edges=child_edges[srt].astype(np.int64),
               edge_tags=child_tags[srt].astype(np.int8), info=info)
    validate(out)
    return out


def validate(mesh: Mesh) -> dict:
    """Check conformity and tag consistency; return a report.

    Raises ``MeshError`` on any violated invariant.
    """
    areas = mesh.areas()
    if np.any(areas <= 0):
        raise MeshError(f"{int(np.sum(areas <= 0))} triangles with non-positive area", code="NONCONFORMING")
    edges, counts = _edge_table(mesh.triangles)
    if np.any(counts > 2):
        raise MeshError("edge shared by more than two triangles", code="NONCONFORMING")
    lengths = np.linalg.norm(mesh.nodes[edges[:, 0]] - mesh.nodes[edges[:, 1]], axis=1)
    bnd = counts == 1
    tagged = {tuple(e) for e in np.sort(mesh.edges, axis=1).tolist()}
    boundary_set = {tuple(e) for e in edges[bnd].tolist()}
    bt = np.isin(mesh.edge_tags, [EdgeTag.DIRICHLET_OUTER, EdgeTag.SIGMA_NEUMANN, EdgeTag.ARTIFICIAL])
    tagged_boundary = {tuple(e) for e in np.sort(mesh.edges[bt], axis=1).tolist()}
    if tagged_boundary != boundary_set:
        raise MeshError("boundary tags do not partition the boundary", code="NONCONFORMING")
    if not tagged >= boundary_set:
        raise MeshError("untagged boundary edge", code="NONCONFORMING")
    report = {
        "n_nodes": int(mesh.n_nodes),
        "n_triangles": int(len(mesh.triangles)),
        "n_edges": int(len(edges)),
        "min_area": float(areas.min()),
        "area": float(areas.sum()),
        "h_max": float(lengths.max()),
        "h_min": float(lengths.min()),
        "boundary_length": float(lengths[bnd].sum()),
        "tag_lengths": {t.name: mesh.tag_length(t) for t in EdgeTag},
        "interior_edges_shared_by_two": bool(np.all(counts[~bnd] == 2)),
    }
    corners = mesh.info.get("corners") or []
    if corners:
        cidx = [int(np.argmin(np.linalg.norm(mesh.nodes - np.asarray(c), axis=1))) for c in corners]
        for c, i in zip(corners, cidx):
            if np.linalg.norm(mesh.nodes[i] - np.asarray(c)) > 1e-12:
                raise MeshError(f"no node at junction corner {c}", code="NONCONFORMING")
        inc = np.isin(edges[:, 0], cidx) | np.isin(edges[:, 1], cidx)
        report["corner_edge_min"] = float(lengths[inc].min())
    if mesh.info.get("truncation_radius"):
        R = mesh.info["truncation_radius"]
        arc = mesh.tagged(EdgeTag.ARTIFICIAL)
        p, q = mesh.nodes[arc[:, 0]], mesh.nodes[arc[:, 1]]
        on_circle = np.abs(np.linalg.norm(p, axis=1) - R) < 1e-9 * R
        on_circle &= np.abs(np.linalg.norm(q, axis=1) - R) < 1e-9 * R
        if np.any(on_circle):
            m = 0.5 * (p + q)[on_circle]
            seg = np.linalg.norm((p - q)[on_circle], axis=1)
            sag = R - np.linalg.norm(m, axis=1)
            report["facet_max"] = float(seg.max())
            report["chord_error_max"] = float(sag.max())
            report["chord_error_ok"] = bool(np.all(sag < seg ** 2 / R))
    return report
