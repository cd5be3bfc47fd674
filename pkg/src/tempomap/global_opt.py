"""Deformation graph and robust pose-graph optimization.

Nodes are robot poses, background control points and fragment poses. Observed
edges are always trusted; candidate edges (fragment associations and loop
closures) are classified by truncated least squares solved with graduated
non-convexity around a sparse Levenberg-Marquardt inner solver.

Edge residuals live in the SO(3) x R^3 chart:
    r = [log(Rm^T Ri^T Rj), Rm^T (Ri^T (tj - ti) - tm)]
weighted by diag(w_rot * I3, w_trans * I3).
"""
from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from .geometry import Aabb, Pose, compose, hat, so3_exp


class NodeKind(str, Enum):
    ROBOT = "X"
    CONTROL = "PM"
    FRAGMENT = "Y"


class EdgeKind(str, Enum):
    XX = "XX"
    PMPM = "PMPM"
    XPM = "XPM"
    XY = "XY"
    YY = "YY"
    LC = "LC"


CANDIDATE_KINDS = (EdgeKind.YY, EdgeKind.LC)


@dataclass
class GraphNode:
    id: int
    kind: NodeKind
    estimate: Pose
    stamp: float = 0.0


@dataclass
class Edge:
    i: int
    j: int
    kind: EdgeKind
    measurement: Pose
    w_rot: float = 1.0
    w_trans: float = 1.0
    is_outlier: bool = False  # ground-truth bookkeeping for tests

    @property
    def candidate(self):
        return self.kind in CANDIDATE_KINDS

    @property
    def information(self):
        return (self.w_rot, self.w_rot, self.w_rot, self.w_trans)


@dataclass
class OptimizerConfig:
    truncation: float = 1.0
    truncation_by_kind: dict = field(default_factory=dict)
    gnc_mu_update: float = 1.4
    max_gnc_iterations: int = 100
    max_inner_iterations: int = 10
    rel_tol: float = 1e-6
    lm_damping: float = 1e-4
    assoc_weight: float = 1.0  # lambda for fragment association edges
    gnc_pose_graph_only: bool = True

    def c_bar(self, kind):
        return float(self.truncation_by_kind.get(EdgeKind(kind).value, self.truncation))


@dataclass
class Solution:
    estimates: dict
    omega: dict  # edge index -> 0/1 for candidate edges
    associations: list  # accepted (fragment node a, fragment node b)
    cost: float
    converged: bool = True
    gnc_iterations: int = 0
    weights: dict = field(default_factory=dict)


class DeformationGraph:
    def __init__(self):
        self.nodes = {}
        self.edges = []
        self._ids = itertools.count()
        self.robot_nodes = []  # (stamp, node id) in insertion order
        self.fragment_nodes = {}  # fragment id -> node id
        self.control_nodes = []  # node ids
        self._pairs = set()

    def add_node(self, kind, estimate, stamp=0.0):
        nid = next(self._ids)
        self.nodes[nid] = GraphNode(nid, NodeKind(kind), estimate, stamp)
        if kind == NodeKind.ROBOT:
            self.robot_nodes.append((stamp, nid))
        elif kind == NodeKind.CONTROL:
            self.control_nodes.append(nid)
        return nid

    def add_edge(self, edge: Edge):
        if edge.i not in self.nodes or edge.j not in self.nodes:
            raise KeyError(f"edge references unknown node ({edge.i}, {edge.j})")
        self.edges.append(edge)
        return len(self.edges) - 1

    @property
    def first_robot_node(self):
        return self.robot_nodes[0][1] if self.robot_nodes else None

    def robot_node_at(self, stamp, tolerance=math.inf):
        if not self.robot_nodes:
            raise KeyError("graph has no robot pose nodes")
        stamps = np.array([s for s, _ in self.robot_nodes])
        k = int(np.argmin(np.abs(stamps - stamp)))
        if abs(stamps[k] - stamp) > tolerance:
            raise KeyError(f"no robot pose node near t={stamp}")
        return self.robot_nodes[k][1]

    def estimates(self):
        return {nid: n.estimate for nid, n in self.nodes.items()}

    def set_estimates(self, estimates):
        for nid, pose in estimates.items():
            if nid in self.nodes:
                self.nodes[nid].estimate = pose

    def snapshot(self):
        g = DeformationGraph.__new__(DeformationGraph)
        g.nodes = {k: GraphNode(v.id, v.kind, v.estimate, v.stamp) for k, v in self.nodes.items()}
        g.edges = list(self.edges)
        g._ids = None
        g.robot_nodes = list(self.robot_nodes)
        g.fragment_nodes = dict(self.fragment_nodes)
        g.control_nodes = list(self.control_nodes)
        g._pairs = set(self._pairs)
        return g


def add_fragment(graph: DeformationGraph, fragment, odom_poses=None, tolerance=math.inf, weights=(1e4, 1e4)):
    """Insert a fragment node at the centroid of its surface with unit orientation.

    ``odom_poses`` maps robot node id -> odometry-frame pose the fragment surface
    is expressed in; defaults to the nodes' current estimates.
    """
    nf = graph.robot_node_at(fragment.first_observed, tolerance)
    nl = graph.robot_node_at(fragment.last_observed, tolerance)
    centroid = Pose(np.eye(3), np.asarray(fragment.surface).mean(axis=0))
    anchor_est = graph.nodes[nf].estimate
    anchor_odom = odom_poses[nf] if odom_poses is not None else anchor_est
    estimate = compose(anchor_est, compose(anchor_odom.inverse(), centroid))
    nid = graph.add_node(NodeKind.FRAGMENT, estimate, fragment.first_observed)
    graph.fragment_nodes[fragment.id] = nid
    for rn in dict.fromkeys([nf, nl]):
        odom = odom_poses[rn] if odom_poses is not None else graph.nodes[rn].estimate
        rel = compose(odom.inverse(), centroid)
        graph.add_edge(Edge(rn, nid, EdgeKind.XY, rel, *weights))
    return nid


_FACE_OFFSETS = [o for o in itertools.product((-1, 0, 1), repeat=3) if sum(map(abs, o)) == 1]


def add_control_points(graph: DeformationGraph, vertices, cell=1.0, window=math.inf, weights=(1e2, 1e2), odom_poses=None):
    """Subsample background vertices on a ``cell`` grid into control-point nodes.

    ``vertices`` is a list of (position in odometry frame, robot node id, stamp).
    A cell reuses an existing control point only if it was created within
    ``window`` seconds. Returns the control node id for each vertex.
    """
    if not vertices:
        return []
    if not hasattr(graph, "_cells"):
        graph._cells = {}
    cells = graph._cells
    out = []
    new_nodes = []
    for pos, rn, stamp in vertices:
        key = tuple(np.floor(np.asarray(pos) / cell).astype(int))
        found = None
        for nid in cells.get(key, []):
            if abs(graph.nodes[nid].stamp - stamp) < window:
                found = nid
        if found is None:
            odom = odom_poses[rn] if odom_poses is not None else graph.nodes[rn].estimate
            local = Pose(np.eye(3), np.asarray(pos, dtype=float))
            rel = compose(odom.inverse(), local)
            est = compose(graph.nodes[rn].estimate, rel)
            found = graph.add_node(NodeKind.CONTROL, est, stamp)
            graph.nodes[found].origin = local  # odometry-frame position at insertion
            graph.add_edge(Edge(rn, found, EdgeKind.XPM, rel, *weights))
            cells.setdefault(key, []).append(found)
            new_nodes.append((key, found))
        out.append(found)
    for key, nid in new_nodes:
        for off in _FACE_OFFSETS:
            nb = tuple(k + o for k, o in zip(key, off))
            for other in cells.get(nb, []):
                if other == nid or abs(graph.nodes[other].stamp - graph.nodes[nid].stamp) >= window:
                    continue
                pair = (min(nid, other), max(nid, other))
                if pair in graph._pairs:
                    continue
                graph._pairs.add(pair)
                a, b = graph.nodes[pair[0]], graph.nodes[pair[1]]
                rel = compose(a.origin.inverse(), b.origin)
                graph.add_edge(Edge(pair[0], pair[1], EdgeKind.PMPM, rel, *weights))
    return out


def fragment_world_surface(fragment, node_estimate: Pose, node_init: Pose):
    return compose(node_estimate, node_init.inverse()).apply(fragment.surface)


def propose_associations(graph: DeformationGraph, fragments, margin=0.08, weight=1.0, world_surfaces=None):
    """Candidate translation-only edges between same-label fragments whose boxes overlap."""
    new = []
    frags = [f for f in fragments if not f.dynamic and f.id in graph.fragment_nodes]
    boxes = {}
    for f in frags:
        pts = world_surfaces[f.id] if world_surfaces is not None else f.surface
        boxes[f.id] = Aabb.from_points(pts).inflated(margin)
    for a, b in itertools.combinations(sorted(frags, key=lambda f: f.id), 2):
        if a.label != b.label:
            continue
        if a.first_observed <= b.last_observed and b.first_observed <= a.last_observed:
            continue
        if not boxes[a.id].overlaps(boxes[b.id]):
            continue
        na, nb = graph.fragment_nodes[a.id], graph.fragment_nodes[b.id]
        pair = ("YY", min(na, nb), max(na, nb))
        if pair in graph._pairs:
            continue
        graph._pairs.add(pair)
        e = Edge(na, nb, EdgeKind.YY, Pose.identity(), 0.0, weight)
        graph.add_edge(e)
        new.append(e)
    return new


# ---------------------------------------------------------------- residuals


def _batch_log(R):
    cos = (np.trace(R, axis1=1, axis2=2) - 1.0) / 2.0
    w = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    sin = 0.5 * np.linalg.norm(w, axis=1)
    theta = np.arctan2(sin, cos)
    small = theta < 1e-7
    scale = np.where(small, 0.5, theta / (2.0 * np.where(small, 1.0, sin)))
    return w * scale[:, None]


def _batch_hat(v):
    z = np.zeros(len(v))
    return np.stack(
        [np.stack([z, -v[:, 2], v[:, 1]], 1), np.stack([v[:, 2], z, -v[:, 0]], 1), np.stack([-v[:, 1], v[:, 0], z], 1)],
        axis=1,
    )


def _batch_jr_inv(phi):
    theta = np.linalg.norm(phi, axis=1)
    K = _batch_hat(phi)
    K2 = K @ K
    small = theta < 1e-7
    th = np.where(small, 1.0, theta)
    coef = np.where(small, 1.0 / 12.0, 1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)))
    return np.eye(3)[None] + 0.5 * K + coef[:, None, None] * K2


def edge_residuals(Ri, ti, Rj, tj, Rm, tm, jacobians=False):
    """Unweighted 6-dim residuals (E, 6) and optionally Jacobians (E, 6, 6) wrt i and j."""
    RiT = np.transpose(Ri, (0, 2, 1))
    RmT = np.transpose(Rm, (0, 2, 1))
    E = RmT @ RiT @ Rj
    phi = _batch_log(E)
    u = np.einsum("eab,eb->ea", RiT, tj - ti)
    rho = np.einsum("eab,eb->ea", RmT, u - tm)
    r = np.concatenate([phi, rho], axis=1)
    if not jacobians:
        return r
    n = len(Ri)
    Jinv = _batch_jr_inv(phi)
    Ji = np.zeros((n, 6, 6))
    Jj = np.zeros((n, 6, 6))
    RjT = np.transpose(Rj, (0, 2, 1))
    Ji[:, :3, :3] = -Jinv @ RjT @ Ri
    Ji[:, 3:, :3] = RmT @ _batch_hat(u)
    Ji[:, 3:, 3:] = -RmT
    Jj[:, :3, :3] = Jinv
    Jj[:, 3:, 3:] = RmT @ RiT @ Rj
    return r, Ji, Jj


def single_edge_residual(Ti: Pose, Tj: Pose, Tm: Pose, jacobians=False):
    out = edge_residuals(
        Ti.rotation[None], Ti.translation[None], Tj.rotation[None], Tj.translation[None],
        Tm.rotation[None], Tm.translation[None], jacobians,
    )
    if jacobians:
        return out[0][0], out[1][0], out[2][0]
    return out[0]


class _Problem:
    """Flat arrays over a graph snapshot for vectorized evaluation."""

    def __init__(self, graph: DeformationGraph, fixed, nodes=None, edges=None, init=None):
        self.ids = sorted(graph.nodes if nodes is None else nodes)
        self.index = {nid: k for k, nid in enumerate(self.ids)}
        init = init or {}
        est = [init.get(n, graph.nodes[n].estimate) for n in self.ids]
        self.R = np.array([p.rotation for p in est]).reshape(-1, 3, 3)
        self.t = np.array([p.translation for p in est]).reshape(-1, 3)
        edges = graph.edges if edges is None else edges
        self.ei = np.array([self.index[e.i] for e in edges], dtype=int)
        self.ej = np.array([self.index[e.j] for e in edges], dtype=int)
        self.Rm = np.array([e.measurement.rotation for e in edges]).reshape(-1, 3, 3)
        self.tm = np.array([e.measurement.translation for e in edges]).reshape(-1, 3)
        self.sw = np.sqrt(np.array([[e.w_rot] * 3 + [e.w_trans] * 3 for e in edges]).reshape(-1, 6))
        self.fixed = np.zeros(len(self.ids), dtype=bool)
        for f in fixed:
            self.fixed[self.index[f]] = True
        self.var_index = -np.ones(len(self.ids), dtype=int)
        free = np.flatnonzero(~self.fixed)
        self.var_index[free] = np.arange(len(free))
        self.nvar = len(free) * 6

    def residuals(self, R=None, t=None, jac=False):
        R = self.R if R is None else R
        t = self.t if t is None else t
        out = edge_residuals(R[self.ei], t[self.ei], R[self.ej], t[self.ej], self.Rm, self.tm, jac)
        if not jac:
            return out * self.sw
        r, Ji, Jj = out
        return r * self.sw, Ji * self.sw[:, :, None], Jj * self.sw[:, :, None]

    def cost(self, w, R=None, t=None):
        r = self.residuals(R, t)
        return float(np.sum(w * np.einsum("ij,ij->i", r, r)))

    def retract(self, delta):
        R = self.R.copy()
        t = self.t.copy()
        for k in np.flatnonzero(~self.fixed):
            d = delta[6 * self.var_index[k]: 6 * self.var_index[k] + 6]
            t[k] = t[k] + R[k] @ d[3:]
            R[k] = R[k] @ so3_exp(d[:3])
        return R, t

    def normal_equations(self, w):
        r, Ji, Jj = self.residuals(jac=True)
        n_e = len(r)
        rows, cols, vals = [], [], []
        g = np.zeros(self.nvar)
        for J, idx in ((Ji, self.ei), (Jj, self.ej)):
            v = self.var_index[idx]
            ok = v >= 0
            # gradient
            gi = np.einsum("eab,ea->eb", J[ok], r[ok] * w[ok, None])
            np.add.at(g, (6 * v[ok])[:, None] + np.arange(6), gi)
        blocks = [(Ji, self.ei), (Jj, self.ej)]
        for (JA, ia), (JB, ib) in itertools.product(blocks, repeat=2):
            va, vb = self.var_index[ia], self.var_index[ib]
            ok = (va >= 0) & (vb >= 0)
            if not ok.any():
                continue
            H = np.einsum("eka,ekb->eab", JA[ok] * w[ok, None, None], JB[ok])
            ra = (6 * va[ok])[:, None, None] + np.arange(6)[None, :, None]
            cb = (6 * vb[ok])[:, None, None] + np.arange(6)[None, None, :]
            rows.append(np.broadcast_to(ra, H.shape).ravel())
            cols.append(np.broadcast_to(cb, H.shape).ravel())
            vals.append(H.ravel())
        if rows:
            H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.nvar, self.nvar)).tocsc()
        else:
            H = sp.csc_matrix((self.nvar, self.nvar))
        return H, g, n_e


def check_connected(graph: DeformationGraph):
    """Every node must be reachable from the first robot pose through observed edges."""
    if not graph.nodes:
        return
    root = graph.first_robot_node
    if root is None:
        root = min(graph.nodes)
    adj = {n: [] for n in graph.nodes}
    for e in graph.edges:
        if not e.candidate:
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
    seen = {root}
    q = deque([root])
    while q:
        n = q.popleft()
        for m in adj[n]:
            if m not in seen:
                seen.add(m)
                q.append(m)
    missing = set(graph.nodes) - seen
    if missing:
        raise ValueError(f"graph is disconnected: {len(missing)} nodes unreachable (e.g. {sorted(missing)[:5]})")


def levenberg_marquardt(prob: _Problem, w, config: OptimizerConfig):
    """Weighted LM on ``prob`` in place. Returns final cost; cost never increases."""
    cost = prob.cost(w)
    lam = config.lm_damping
    if prob.nvar == 0:
        return cost
    for _ in range(config.max_inner_iterations):
        H, g, _ = prob.normal_equations(w)
        improved = False
        for _attempt in range(10):
            diag = H.diagonal()
            A = H + sp.diags(lam * np.maximum(diag, 1e-9) + 1e-12)
            delta = -spsolve(A.tocsc(), g)
            if not np.all(np.isfinite(delta)):
                lam *= 10
                continue
            R, t = prob.retract(delta)
            new_cost = prob.cost(w, R, t)
            if new_cost <= cost:
                prob.R, prob.t = R, t
                rel = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or rel < config.rel_tol:
            break
    return cost


def tls_weights(r2, c2, mu):
    """GNC-TLS weight update."""
    w = np.empty_like(r2)
    lo = mu / (mu + 1.0) * c2
    hi = (mu + 1.0) / mu * c2
    w[r2 <= lo] = 1.0
    w[r2 >= hi] = 0.0
    mid = (r2 > lo) & (r2 < hi)
    w[mid] = np.sqrt(c2[mid] * mu * (mu + 1.0) / r2[mid]) - mu
    return np.clip(w, 0.0, 1.0)


def _gnc(prob: _Problem, cand, c2, config: OptimizerConfig):
    """Graduated non-convexity over the candidate edges of ``prob``.

    Returns binarized weights, whether the weights settled, and the outer
    iteration count."""
    w = np.ones(len(cand))
    converged, it = True, 0
    if len(cand):
        levenberg_marquardt(prob, w, config)
    if not cand.any():
        return w, converged, it
    r = prob.residuals()
    r2 = np.einsum("ij,ij->i", r, r)
    ratio = 2.0 * r2[cand] / c2[cand]
    if ratio.max() > 1.0:
        k = int(np.argmax(ratio))
        mu = c2[cand][k] / (2.0 * r2[cand][k] - c2[cand][k])
        converged = False
        for it in range(1, config.max_gnc_iterations + 1):
            w[cand] = tls_weights(r2[cand], c2[cand], mu)
            levenberg_marquardt(prob, w, config)
            r = prob.residuals()
            r2 = np.einsum("ij,ij->i", r, r)
            wc = w[cand]
            if np.all((wc < 1e-6) | (wc > 1 - 1e-6)):
                converged = True
                break
            mu *= config.gnc_mu_update
    w[cand] = np.round(w[cand])
    return w, converged, it


def optimize(graph: DeformationGraph, config: OptimizerConfig = None) -> Solution:
    """Solve the robust pose-graph problem; writes nothing back to ``graph``.

    With ``config.gnc_pose_graph_only`` the outer GNC loop runs on robot and
    fragment nodes alone; control points are then carried along with their
    robot pose and everything is refined once with the settled weights.
    """
    config = config or OptimizerConfig()
    check_connected(graph)
    fixed = [graph.first_robot_node] if graph.first_robot_node is not None else ([min(graph.nodes)] if graph.nodes else [])
    edges = graph.edges
    n_e = len(edges)
    cand = np.array([e.candidate for e in edges], dtype=bool)
    c2 = np.array([config.c_bar(e.kind) ** 2 for e in edges])
    controls = {n for n, node in graph.nodes.items() if node.kind == NodeKind.CONTROL}
    if config.gnc_pose_graph_only and controls:
        keep = [k for k, e in enumerate(edges) if e.i not in controls and e.j not in controls]
        sub = _Problem(graph, fixed, set(graph.nodes) - controls, [edges[k] for k in keep])
        ws, converged, it = _gnc(sub, cand[keep], c2[keep], config)
        w = np.ones(n_e)
        w[keep] = ws
        init = {nid: Pose(sub.R[k], sub.t[k]) for k, nid in enumerate(sub.ids)}
        for e in edges:
            if e.kind == EdgeKind.XPM and e.j in controls:
                # move each control point rigidly with the robot pose that observed it
                corr = compose(init[e.i], graph.nodes[e.i].estimate.inverse())
                init[e.j] = compose(corr, graph.nodes[e.j].estimate)
        prob = _Problem(graph, fixed, init=init)
        if n_e:
            levenberg_marquardt(prob, w, config)
    else:
        prob = _Problem(graph, fixed)
        w, converged, it = _gnc(prob, cand, c2, config)
        if cand.any():
            levenberg_marquardt(prob, w, config)
    estimates = {nid: Pose(prob.R[k], prob.t[k]) for k, nid in enumerate(prob.ids)}
    r = prob.residuals() if n_e else np.zeros((0, 6))
    r2 = np.einsum("ij,ij->i", r, r)
    cost = float(np.sum(np.where(cand, w * r2 + (1 - w) * c2, r2))) if n_e else 0.0
    omega = {k: int(w[k]) for k in np.flatnonzero(cand)}
    assoc = [(edges[k].i, edges[k].j) for k, v in omega.items() if v == 1 and edges[k].kind == EdgeKind.YY]
    return Solution(estimates, omega, assoc, cost, converged, it, {k: float(w[k]) for k in np.flatnonzero(cand)})


def edge_cost_terms(graph: DeformationGraph, estimates):
    """Per-edge weighted squared residual under ``estimates``."""
    out = []
    for e in graph.edges:
        r = single_edge_residual(estimates[e.i], estimates[e.j], e.measurement)
        sw = np.sqrt(np.array([e.w_rot] * 3 + [e.w_trans] * 3))
        out.append(float(np.sum((r * sw) ** 2)))
    return np.array(out)


def deform_background(vertices, old_controls, new_controls, k=4, anchors=None):
    """Displace vertices by the inverse-distance blend of nearby control-point corrections.

    ``old_controls``/``new_controls`` are sequences of Poses (same order). If
    ``anchors`` (N, m) is given, vertex i blends only controls ``anchors[i]``
    (-1 entries ignored); otherwise its k nearest old controls.
    """
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    if len(old_controls) == 0 or len(V) == 0:
        return V.copy()
    old_t = np.array([p.translation for p in old_controls])
    corr = [compose(n, o.inverse()) for o, n in zip(old_controls, new_controls)]
    CR = np.array([c.rotation for c in corr])
    Ct = np.array([c.translation for c in corr])
    if anchors is None:
        kk = min(k, len(old_controls))
        dist, idx = cKDTree(old_t).query(V, k=kk)
        idx = np.asarray(idx).reshape(len(V), kk)
        dist = np.asarray(dist).reshape(len(V), kk)
        valid = np.ones_like(idx, dtype=bool)
    else:
        idx = np.asarray(anchors, dtype=int).reshape(len(V), -1)
        valid = idx >= 0
        idx = np.where(valid, idx, 0)
        dist = np.linalg.norm(old_t[idx] - V[:, None, :], axis=2)
    exact = valid & (dist < 1e-12)
    wts = np.where(valid, 1.0 / np.maximum(dist, 1e-12), 0.0)
    has_exact = exact.any(axis=1)
    wts[has_exact] = exact[has_exact].astype(float)
    wts /= np.maximum(wts.sum(axis=1, keepdims=True), 1e-300)
    moved = np.einsum("nkab,nb->nka", CR[idx], V) + Ct[idx]
    out = np.einsum("nk,nka->na", wts, moved)
    no_anchor = ~valid.any(axis=1)
    out[no_anchor] = V[no_anchor]
    return out


# ------------------------------------------------------------------ g2o I/O


def _info_upper(w_rot, w_trans):
    info = np.diag([w_trans] * 3 + [w_rot] * 3)
    return info[np.triu_indices(6)]


def write_g2o(graph: DeformationGraph, path, estimates=None):
    estimates = estimates or graph.estimates()
    with open(path, "w") as fh:
        for nid in sorted(graph.nodes):
            n = graph.nodes[nid]
            vals = " ".join(f"{v:.12g}" for v in estimates[nid].to_list())
            fh.write(f"# NODE {nid} {n.kind.value} {n.stamp:.6f}\n")
            fh.write(f"VERTEX_SE3:QUAT {nid} {vals}\n")
        for k, e in enumerate(graph.edges):
            fh.write(f"# EDGE {k} {e.kind.value} {int(e.is_outlier)}\n")
            if e.kind == EdgeKind.YY:
                d = e.measurement.translation
                fh.write(f"EDGE_CENTROID {e.i} {e.j} {d[0]:.12g} {d[1]:.12g} {d[2]:.12g} {e.w_trans:.12g}\n")
            else:
                vals = " ".join(f"{v:.12g}" for v in e.measurement.to_list())
                info = " ".join(f"{v:.12g}" for v in _info_upper(e.w_rot, e.w_trans))
                fh.write(f"EDGE_SE3:QUAT {e.i} {e.j} {vals} {info}\n")


def read_g2o(path) -> DeformationGraph:
    g = DeformationGraph()
    node_meta = {}
    edge_meta = None
    iu = np.triu_indices(6)
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "#" and len(tok) >= 2:
                if tok[1] == "NODE":
                    node_meta[int(tok[2])] = (NodeKind(tok[3]), float(tok[4]))
                elif tok[1] == "EDGE":
                    edge_meta = (EdgeKind(tok[3]), bool(int(tok[4])))
                continue
            if tok[0] == "VERTEX_SE3:QUAT":
                nid = int(tok[1])
                kind, stamp = node_meta.get(nid, (NodeKind.ROBOT, 0.0))
                g.nodes[nid] = GraphNode(nid, kind, Pose.from_list(map(float, tok[2:9])), stamp)
                if kind == NodeKind.ROBOT:
                    g.robot_nodes.append((stamp, nid))
                elif kind == NodeKind.CONTROL:
                    g.control_nodes.append(nid)
            elif tok[0] == "EDGE_SE3:QUAT":
                i, j = int(tok[1]), int(tok[2])
                meas = Pose.from_list(map(float, tok[3:10]))
                info = np.zeros((6, 6))
                info[iu] = list(map(float, tok[10:31]))
                kind, outlier = edge_meta or (EdgeKind.XX, False)
                g.edges.append(Edge(i, j, kind, meas, info[3, 3], info[0, 0], outlier))
                edge_meta = None
            elif tok[0] == "EDGE_CENTROID":
                i, j = int(tok[1]), int(tok[2])
                d = list(map(float, tok[3:6]))
                g.edges.append(Edge(i, j, EdgeKind.YY, Pose(np.eye(3), d), 0.0, float(tok[6])))
                edge_meta = None
    g._ids = itertools.count(max(g.nodes) + 1 if g.nodes else 0)
    g.robot_nodes.sort()
    return g
