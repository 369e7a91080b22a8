"""SE(3) pose-graph optimisation and multi-session merging.

An edge ``(i, j, Z)`` measures ``Z ~ T_i^-1 T_j``; its residual is
``log(Z^-1 T_i^-1 T_j)`` and node updates are left increments
``T <- exp(xi) T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .geometry import Pose, adjoint, se3_exp, se3_log, se3_right_jacobian_inv

log = logging.getLogger(__name__)

DENSE_SOLVE_LIMIT = 3000


class GraphError(ValueError):
    pass


class MergeError(GraphError):
    def __init__(self, session: int, message: str | None = None):
        self.session = session
        super().__init__(message or f"session {session + 1} has no loop edge to the merged map")


@dataclass
class Edge:
    from_id: object
    to_id: object
    relative: Pose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    kind: str = "odometry"

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise GraphError("information must be 6x6")
        if not np.allclose(info, info.T, atol=1e-9 * max(1.0, np.abs(info).max())):
            raise GraphError("information must be symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise GraphError("information must be positive definite") from exc
        self.information = info
        if self.kind not in ("odometry", "loop"):
            raise GraphError(f"unknown edge kind {self.kind!r}")


@dataclass
class GraphSolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    costs: list[float] = field(default_factory=list)


class PoseGraph:
    def __init__(self):
        self.nodes: dict[object, tuple[Pose, int]] = {}
        self.edges: list[Edge] = []
        self.anchor: object | None = None

    def add_node(self, node_id, pose: Pose, session: int = 0) -> None:
        self.nodes[node_id] = (pose, session)
        if self.anchor is None:
            self.anchor = node_id

    def add_edge(self, edge: Edge) -> None:
        for nid in (edge.from_id, edge.to_id):
            if nid not in self.nodes:
                raise GraphError(f"edge endpoint {nid!r} is not a node")
        self.edges.append(edge)

    def pose(self, node_id) -> Pose:
        try:
            return self.nodes[node_id][0]
        except KeyError:
            raise GraphError(f"unknown node {node_id!r}") from None

    def set_pose(self, node_id, pose: Pose) -> None:
        self.nodes[node_id] = (pose, self.nodes[node_id][1])

    def components(self) -> list[set]:
        parent = {n: n for n in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            a, b = find(e.from_id), find(e.to_id)
            if a != b:
                parent[a] = b
        groups: dict = {}
        for n in self.nodes:
            groups.setdefault(find(n), set()).add(n)
        return list(groups.values())

    def cost(self) -> float:
        return float(sum(_edge_cost(self, e) for e in self.edges))

    def copy(self) -> PoseGraph:
        g = PoseGraph()
        g.nodes = dict(self.nodes)
        g.edges = list(self.edges)
        g.anchor = self.anchor
        return g


def edge_residual(graph: PoseGraph, edge: Edge) -> np.ndarray:
    a = graph.pose(edge.from_id)
    b = graph.pose(edge.to_id)
    return se3_log(edge.relative.inverse() @ a.inverse() @ b)


def edge_jacobians(graph: PoseGraph, edge: Edge) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual and its Jacobians w.r.t. left increments of both endpoints."""
    b = graph.pose(edge.to_id)
    r = edge_residual(graph, edge)
    Jb = se3_right_jacobian_inv(r) @ adjoint(b.inverse())
    return r, -Jb, Jb


def _edge_cost(graph, edge) -> float:
    r = edge_residual(graph, edge)
    return float(r @ edge.information @ r)


def _cholesky_solve(H: scipy.sparse.csr_matrix, b: np.ndarray) -> np.ndarray | None:
    """Solve an SPD system; ``None`` when the matrix is not positive definite."""
    n = H.shape[0]
    if n <= DENSE_SOLVE_LIMIT:
        try:
            c = scipy.linalg.cho_factor(H.toarray(), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        return scipy.linalg.cho_solve(c, b, check_finite=False)
    # diagonal pivoting only, so the LU pivots are the LDL^T pivots
    try:
        lu = scipy.sparse.linalg.splu(
            H.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError:
        return None
    if np.any(lu.U.diagonal() <= 0):
        return None
    return lu.solve(b)


def _linearize(graph: PoseGraph, index: dict) -> tuple[scipy.sparse.csr_matrix, np.ndarray, float]:
    n = 6 * len(index)
    rows, cols, vals = [], [], []
    g = np.zeros(n)
    cost = 0.0
    for e in graph.edges:
        r, Ja, Jb = edge_jacobians(graph, e)
        W = e.information
        cost += float(r @ W @ r)
        blocks = []
        if e.from_id in index:
            blocks.append((index[e.from_id], Ja))
        if e.to_id in index:
            blocks.append((index[e.to_id], Jb))
        for i, Ji in blocks:
            g[6 * i : 6 * i + 6] += Ji.T @ W @ r
            for j, Jj in blocks:
                blk = Ji.T @ W @ Jj
                ii, jj = np.meshgrid(np.arange(6) + 6 * i, np.arange(6) + 6 * j, indexing="ij")
                rows.append(ii.ravel())
                cols.append(jj.ravel())
                vals.append(blk.ravel())
    if rows:
        H = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
    else:
        H = scipy.sparse.csr_matrix((n, n))
    return H, g, cost


def optimize(
    graph: PoseGraph,
    max_iterations: int = 50,
    lambda_init: float = 0.0,
    relative_tolerance: float = 1e-9,
    step_tolerance: float = 1e-12,
) -> GraphSolveReport:
    """Damped Gauss-Newton on ``graph`` in place; the anchor stays fixed."""
    if graph.anchor is None or graph.anchor not in graph.nodes:
        raise GraphError("graph has no anchor")
    if len(graph.components()) > 1:
        raise GraphError("pose graph is disconnected")
    free = sorted((n for n in graph.nodes if n != graph.anchor), key=_sort_key)
    index = {n: i for i, n in enumerate(free)}
    cost = graph.cost()
    report = GraphSolveReport(cost, cost, 0, False, [cost])
    if not free:
        report.converged = True
        return report
    damping = lambda_init
    for it in range(max_iterations):
        if cost == 0.0:
            report.converged = True
            break
        H, g, _ = _linearize(graph, index)
        diag = H.diagonal()
        accepted = False
        for _attempt in range(11):
            Hd = H + scipy.sparse.diags(damping * diag) if damping > 0 else H
            step = _cholesky_solve(Hd, -g)
            if step is None:
                damping = 1e-4 if damping == 0 else damping * 10
                continue
            trial = {n: se3_exp(step[6 * i : 6 * i + 6]) @ graph.pose(n) for n, i in index.items()}
            old = {n: graph.pose(n) for n in index}
            for n, p in trial.items():
                graph.set_pose(n, p)
            new_cost = graph.cost()
            if new_cost <= cost:
                accepted = True
                damping = damping / 10 if damping > 1e-6 else lambda_init
                break
            for n, p in old.items():
                graph.set_pose(n, p)
            damping = 1e-4 if damping == 0 else damping * 10
        else:
            if step is None:
                raise GraphError("normal equations are not positive definite after damping")
        report.iterations = it + 1
        if not accepted:
            report.converged = True
            break
        decrease = (cost - new_cost) / cost if cost > 0 else 0.0
        cost = new_cost
        report.costs.append(cost)
        # the step floor ends round-off-level iterations on near-zero costs
        if decrease < relative_tolerance or np.abs(step).max() < step_tolerance:
            report.converged = True
            break
    report.final_cost = cost
    return report


def _sort_key(n):
    return (0, n) if isinstance(n, (int, np.integer)) else (1, str(n))


def merge_sessions(graphs: list[PoseGraph], cross_edges: list[Edge], optimize_kwargs: dict | None = None) -> PoseGraph:
    """Merge per-session graphs through loop edges between them.

    Cross-edge endpoints are ``(session_index, node_id)`` pairs. Merged node
    ids are the same pairs. Sessions are attached in input order; each must
    have a cross edge to one of the sessions merged before it.
    """
    merged = PoseGraph()
    if not graphs:
        return merged
    for e in cross_edges:
        for end in (e.from_id, e.to_id):
            s, nid = end
            if not 0 <= s < len(graphs) or nid not in graphs[s].nodes:
                raise GraphError(f"cross edge endpoint {end!r} does not exist")

    def add_session(s: int, T: Pose):
        g = graphs[s]
        order = [g.anchor] + [n for n in g.nodes if n != g.anchor]
        for nid in order:
            merged.add_node((s, nid), T @ g.nodes[nid][0], s)
        for e in g.edges:
            merged.add_edge(Edge((s, e.from_id), (s, e.to_id), e.relative, e.information, e.kind))

    add_session(0, Pose.identity())
    done = {0}
    for s in range(1, len(graphs)):
        links = [
            e for e in cross_edges
            if (e.from_id[0] == s and e.to_id[0] in done) or (e.to_id[0] == s and e.from_id[0] in done)
        ]
        if not links:
            raise MergeError(s)
        e = links[0]
        if e.to_id[0] == s:
            # T_a * Z = T * local_b
            T = merged.pose(e.from_id) @ e.relative @ graphs[s].pose(e.to_id[1]).inverse()
        else:
            # T * local_a * Z = T_b
            T = merged.pose(e.to_id) @ e.relative.inverse() @ graphs[s].pose(e.from_id[1]).inverse()
        add_session(s, T)
        done.add(s)
    for e in cross_edges:
        merged.add_edge(Edge(e.from_id, e.to_id, e.relative, e.information, "loop"))
    merged.anchor = (0, graphs[0].anchor)
    merged.last_report = optimize(merged, **(optimize_kwargs or {}))
    return merged


# ---------------------------------------------------------------------------
# text serialisation
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _pose_fields(p: Pose) -> list[str]:
    w, x, y, z = p.q
    return [_fmt(v) for v in (*p.t, x, y, z, w)]


def dumps_graph(graph: PoseGraph, ids: dict | None = None) -> str:
    """``VERTEX``/``EDGE`` lines; the anchor is written first.

    ``ids`` maps node keys to integers when the keys are not plain ints.
    """
    ids = ids or {n: n for n in graph.nodes}
    lines = []
    order = [graph.anchor] + sorted((n for n in graph.nodes if n != graph.anchor), key=lambda n: ids[n])
    for n in order:
        pose, session = graph.nodes[n]
        lines.append(" ".join(["VERTEX", str(ids[n]), str(session), *_pose_fields(pose)]))
    iu = np.triu_indices(6)
    for e in graph.edges:
        info = [_fmt(v) for v in e.information[iu]]
        lines.append(
            " ".join(["EDGE", str(ids[e.from_id]), str(ids[e.to_id]), e.kind, *_pose_fields(e.relative), *info])
        )
    return "\n".join(lines) + "\n"


def _parse_pose(vals: list[str]) -> Pose:
    tx, ty, tz, qx, qy, qz, qw = map(float, vals)
    return Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


def loads_graph(text: str) -> PoseGraph:
    g = PoseGraph()
    iu = np.triu_indices(6)
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "VERTEX" and len(parts) == 10:
                g.add_node(int(parts[1]), _parse_pose(parts[3:10]), int(parts[2]))
            elif parts[0] == "EDGE" and len(parts) == 4 + 7 + 21:
                info = np.zeros((6, 6))
                info[iu] = list(map(float, parts[11:]))
                info = info + np.triu(info, 1).T
                g.add_edge(Edge(int(parts[1]), int(parts[2]), _parse_pose(parts[4:11]), info, parts[3]))
            else:
                raise ValueError(f"unrecognised record {parts[0]!r}")
        except (ValueError, GraphError) as exc:
            raise GraphError(f"line {lineno}: {exc}") from exc
    return g
