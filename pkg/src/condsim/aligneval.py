"""Condition-embedding alignment and accuracy evaluation.

The protocol: score labeled test triplets with every learned embedding, build
the cost matrix C[k', k] = 1 - (accuracy of embedding k on condition-k'
triplets), align conditions to embeddings either greedily (per-condition best
embedding, not necessarily injective) or through an exact optimal-transport
plan with uniform marginals (one-to-one when the matrix is square), and report
triplet accuracy under each alignment.

The OT solver is an exact transportation simplex (northwest-corner start,
Bland's entering rule, so it cannot cycle even on the heavily degenerate
uniform instances). On square cost matrices with uniform marginals its optimum
is a scaled permutation; the from-scratch Hungarian solver doubles as a
cross-check of that degeneracy.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from condsim.errors import ConfigError, DataError, ParseError
from condsim.model import score_dataset

REPORT_MAGIC = "#condsim-report v1"
_RC_TOL = 1e-12


def fmt17(v):
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# triplet scoring


def predict_valid(model, world, triplet, k):
    """Strict rule: valid under condition k iff the gap is positive (ties are
    invalid), so a triplet and its reversal are never both accepted."""
    from condsim.model import score_diffs

    xs = np.array([triplet.x], dtype=np.intp)
    ys = np.array([triplet.y], dtype=np.intp)
    zs = np.array([triplet.z], dtype=np.intp)
    return bool(score_diffs(model, world, xs, ys, zs)[0, k] > 0.0)


def _labeled_diffs(model, dataset):
    diffs, _, cond = score_dataset(model, dataset)
    if cond is None:
        raise DataError("evaluation requires condition labels on every triplet")
    return diffs, cond


def supervised_accuracy(model, dataset, align_map):
    """Fraction of triplets whose mapped embedding scores them valid."""
    diffs, cond = _labeled_diffs(model, dataset)
    align_map = np.asarray(align_map, dtype=np.intp)
    if cond.max() >= align_map.shape[0]:
        raise DataError(
            f"label {int(cond.max())} has no entry in the alignment map"
        )
    picked = diffs[np.arange(diffs.shape[0]), align_map[cond]]
    return float(np.mean(picked > 0.0))


def cost_matrix(model, dataset):
    """C[k', k] = 1 - accuracy of embedding k on condition-k' triplets.

    Requires every ground-truth condition to contribute the same number of
    triplets, which the samplers guarantee for test splits.
    """
    diffs, cond = _labeled_diffs(model, dataset)
    n_true = dataset.world.n_conditions
    counts = np.bincount(cond, minlength=n_true)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise DataError(f"condition {missing} has no triplets to evaluate")
    if np.any(counts != counts[0]):
        raise DataError(
            f"per-condition triplet counts differ: {counts.tolist()}"
        )
    n_emb = diffs.shape[1]
    cost = np.empty((n_true, n_emb))
    valid = diffs > 0.0
    for kt in range(n_true):
        cost[kt] = 1.0 - valid[cond == kt].mean(axis=0)
    return cost


# ---------------------------------------------------------------------------
# alignment


def greedy_align(cost):
    """Per ground-truth condition, the error-minimizing embedding (row argmin,
    ties to the lowest embedding index). Not necessarily injective."""
    cost = np.asarray(cost, dtype=np.float64)
    return np.argmin(cost, axis=1)


def hungarian(cost):
    """Minimum-cost perfect assignment on a square matrix.

    Returns (perm, total) with perm[row] = column. Classic O(n^3) potential
    method; deterministic tie handling.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ConfigError(f"hungarian needs a square matrix, got {cost.shape}")
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.intp)  # match[j] = row assigned to col j
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.zeros(n, dtype=np.intp)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    total = float(cost[np.arange(n), perm].sum())
    return perm, total


def _northwest_corner(r, c):
    m, n = r.size, c.size
    plan = np.zeros((m, n))
    a = r.copy()
    b = c.copy()
    basis = []
    i = j = 0
    while True:
        q = min(a[i], b[j])
        plan[i, j] = q
        a[i] -= q
        b[j] -= q
        basis.append((i, j))
        if i == m - 1 and j == n - 1:
            break
        if a[i] <= 0.0 and i < m - 1:
            i += 1
        elif b[j] <= 0.0 and j < n - 1:
            j += 1
        elif i < m - 1:
            i += 1
        else:
            j += 1
    return plan, basis


def _tree_duals(cost, basis, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    remaining = list(basis)
    while remaining:
        progressed = False
        keep = []
        for i, j in remaining:
            if not np.isnan(u[i]) and np.isnan(v[j]):
                v[j] = cost[i, j] - u[i]
                progressed = True
            elif not np.isnan(v[j]) and np.isnan(u[i]):
                u[i] = cost[i, j] - v[j]
                progressed = True
            elif np.isnan(u[i]) and np.isnan(v[j]):
                keep.append((i, j))
        remaining = keep
        if remaining and not progressed:
            raise AssertionError("basis does not form a spanning tree")
    return u, v


def _find_cycle(basis, enter):
    """Alternating cycle closed by the entering cell, as a list of cells
    starting with ``enter``; even positions gain, odd positions lose."""
    m_nodes = {}
    for i, j in basis:
        m_nodes.setdefault(("r", i), []).append(("c", j))
        m_nodes.setdefault(("c", j), []).append(("r", i))
    start = ("r", enter[0])
    goal = ("c", enter[1])
    parent = {start: None}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        for nxt in m_nodes.get(node, []):
            if nxt not in parent:
                parent[nxt] = node
                stack.append(nxt)
    if goal not in parent:
        raise AssertionError("entering cell not connected to basis tree")
    path = [goal]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()  # row(enter) ... col(enter)
    cells = [enter]
    for a, b in zip(path[:-1], path[1:]):
        (ta, ia), (tb, ib) = a, b
        cells.append((ia, ib) if ta == "r" else (ib, ia))
    return cells


def _rebuild_plan(basis, r, c):
    """Exact basic solution for a spanning-tree basis via leaf stripping."""
    m, n = r.size, c.size
    plan = np.zeros((m, n))
    rem_r = r.copy()
    rem_c = c.copy()
    edges = set(basis)
    deg = {}
    for i, j in edges:
        deg[("r", i)] = deg.get(("r", i), 0) + 1
        deg[("c", j)] = deg.get(("c", j), 0) + 1
    adj = {}
    for i, j in edges:
        adj.setdefault(("r", i), set()).add(("c", j))
        adj.setdefault(("c", j), set()).add(("r", i))
    leaves = [node for node, d in deg.items() if d == 1]
    while leaves:
        node = leaves.pop()
        if not adj.get(node):
            continue
        other = next(iter(adj[node]))
        if node[0] == "r":
            i, j = node[1], other[1]
            q = rem_r[i]
        else:
            i, j = other[1], node[1]
            q = rem_c[j]
        plan[i, j] = q
        rem_r[i] -= q
        rem_c[j] -= q
        adj[node].remove(other)
        adj[other].remove(node)
        deg[other] -= 1
        deg[node] -= 1
        if deg[other] == 1:
            leaves.append(other)
    return plan


def solve_ot(cost, r, c, max_pivots=100000):
    """Exact optimal transport plan: min <T, C> s.t. T1 = r, T^T 1 = c, T >= 0.

    Transportation simplex with Bland's anti-cycling entering rule and a
    lowest-index leaving rule; the returned plan is a vertex of the
    transportation polytope (for uniform marginals on a square matrix, a
    scaled permutation).
    """
    cost = np.asarray(cost, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if cost.ndim != 2 or r.shape != (cost.shape[0],) or c.shape != (cost.shape[1],):
        raise ConfigError(
            f"marginal shapes {r.shape}/{c.shape} do not match cost {cost.shape}"
        )
    if np.any(r < 0.0) or np.any(c < 0.0):
        raise ConfigError("marginals must be nonnegative")
    total_r, total_c = float(r.sum()), float(c.sum())
    if abs(total_r - total_c) > 1e-12 * max(1.0, abs(total_r)):
        raise ConfigError(
            f"infeasible marginals: sums {total_r} vs {total_c} differ"
        )

    m, n = cost.shape
    plan, basis = _northwest_corner(r, c)
    for _ in range(max_pivots):
        u, v = _tree_duals(cost, basis, m, n)
        reduced = cost - u[:, None] - v[None, :]
        in_basis = np.zeros((m, n), dtype=bool)
        rows, cols = zip(*basis)
        in_basis[list(rows), list(cols)] = True
        candidates = np.flatnonzero(~in_basis.ravel() & (reduced.ravel() < -_RC_TOL))
        if candidates.size == 0:
            break
        enter = divmod(int(candidates[0]), n)  # Bland: lowest linear index
        cells = _find_cycle(basis, enter)
        losing = cells[1::2]
        theta = min(plan[i, j] for i, j in losing)
        leave = min(
            (cell for cell in losing if plan[cell] == theta),
            key=lambda cell: cell[0] * n + cell[1],
        )
        for pos, (i, j) in enumerate(cells):
            plan[i, j] += theta if pos % 2 == 0 else -theta
        basis.remove(leave)
        basis.append(enter)
        plan[leave] = 0.0
    else:
        raise AssertionError("transportation simplex failed to terminate")

    return _rebuild_plan(basis, r, c)


def ot_align(cost):
    """(map, plan) from the uniform-marginal OT plan: each condition takes its
    highest-mass embedding (ties to the lowest index)."""
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    plan = solve_ot(cost, np.full(m, 1.0 / m), np.full(n, 1.0 / n))
    return np.argmax(plan, axis=1), plan


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReversedRates:
    """Fractions of (original, reversed, both-orientation) triplets accepted."""

    orig: float
    rev: float
    both: float


@dataclass
class EvalReport:
    variant: str
    n_conditions: int
    n_embeddings: int
    alignment_source: str
    gr_accuracy: float
    ot_accuracy: float
    greedy_map: np.ndarray
    ot_map: np.ndarray
    per_condition_gr: np.ndarray
    per_condition_ot: np.ndarray
    cost: np.ndarray
    plan: np.ndarray
    weak_rates: Optional[ReversedRates] = None
    aligned_rates: Optional[ReversedRates] = None

    def to_text(self):
        lines = [
            REPORT_MAGIC,
            f"variant={self.variant}",
            f"conditions={self.n_conditions}",
            f"embeddings={self.n_embeddings}",
            f"alignment_source={self.alignment_source}",
            f"gr_accuracy={fmt17(self.gr_accuracy)}",
            f"ot_accuracy={fmt17(self.ot_accuracy)}",
            "greedy_map=" + ",".join(str(int(k)) for k in self.greedy_map),
            "ot_map=" + ",".join(str(int(k)) for k in self.ot_map),
            "per_condition_gr="
            + ",".join(fmt17(a) for a in self.per_condition_gr),
            "per_condition_ot="
            + ",".join(fmt17(a) for a in self.per_condition_ot),
        ]
        for name, rates in (
            ("weak", self.weak_rates),
            ("aligned", self.aligned_rates),
        ):
            if rates is None:
                lines.append(f"{name}_rates=-")
            else:
                lines.append(
                    f"{name}_rates={fmt17(rates.orig)},{fmt17(rates.rev)},"
                    f"{fmt17(rates.both)}"
                )
        for row in self.cost:
            lines.append("C " + " ".join(fmt17(v) for v in row))
        for row in self.plan:
            lines.append("T " + " ".join(fmt17(v) for v in row))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _parse_rates(value):
    if value == "-":
        return None
    parts = value.split(",")
    if len(parts) != 3:
        raise ParseError(f"malformed rates entry: {value!r}")
    return ReversedRates(*(float(p) for p in parts))


def load_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0] != REPORT_MAGIC:
        raise ParseError("line 1: not a condsim report file")
    fields = {}
    cost_rows = []
    plan_rows = []
    for lineno, line in enumerate(raw[1:], start=2):
        if line.startswith("C "):
            cost_rows.append([float(v) for v in line[2:].split()])
        elif line.startswith("T "):
            plan_rows.append([float(v) for v in line[2:].split()])
        elif "=" in line:
            key, _, val = line.partition("=")
            fields[key] = val
        elif line.strip():
            raise ParseError(f"line {lineno}: unrecognized report line")
    try:
        return EvalReport(
            variant=fields["variant"],
            n_conditions=int(fields["conditions"]),
            n_embeddings=int(fields["embeddings"]),
            alignment_source=fields["alignment_source"],
            gr_accuracy=float(fields["gr_accuracy"]),
            ot_accuracy=float(fields["ot_accuracy"]),
            greedy_map=np.array(
                [int(v) for v in fields["greedy_map"].split(",")], dtype=np.intp
            ),
            ot_map=np.array(
                [int(v) for v in fields["ot_map"].split(",")], dtype=np.intp
            ),
            per_condition_gr=np.array(
                [float(v) for v in fields["per_condition_gr"].split(",")]
            ),
            per_condition_ot=np.array(
                [float(v) for v in fields["per_condition_ot"].split(",")]
            ),
            cost=np.array(cost_rows),
            plan=np.array(plan_rows),
            weak_rates=_parse_rates(fields["weak_rates"]),
            aligned_rates=_parse_rates(fields["aligned_rates"]),
        )
    except KeyError as exc:
        raise ParseError(f"report is missing field {exc}") from None


# ---------------------------------------------------------------------------
# evaluation drivers


def reversed_experiment(model, dataset, mode, align_map=None):
    """Acceptance rates for the dataset's triplets and their reversals.

    weak mode: a triplet counts as valid when its fused, condition-free score
    (expected gap under the model's own condition distribution) is positive.
    supervised mode: valid when the gap of the aligned embedding for the
    triplet's own label is positive; the alignment defaults to the OT map
    computed on this dataset.
    """
    from condsim.datagen import TripletDataset, reverse

    rev_ds = TripletDataset(
        world=dataset.world,
        triplets=[reverse(t) for t in dataset.triplets],
        split=dataset.split,
        seed=dataset.seed,
    )
    if mode == "weak":
        if model.encoder is None:
            raise ConfigError(
                "weak-mode prediction needs a condition encoder; "
                f"variant {model.variant!r} has none"
            )
        valid_o = _weak_valid(model, dataset)
        valid_r = _weak_valid(model, rev_ds)
    elif mode == "supervised":
        if align_map is None:
            align_map, _ = ot_align(cost_matrix(model, dataset))
        diffs_o, cond = _labeled_diffs(model, dataset)
        diffs_r, _ = _labeled_diffs(model, rev_ds)
        rows = np.arange(diffs_o.shape[0])
        valid_o = diffs_o[rows, np.asarray(align_map)[cond]] > 0.0
        valid_r = diffs_r[rows, np.asarray(align_map)[cond]] > 0.0
    else:
        raise ConfigError(f"unknown reversed-experiment mode: {mode!r}")
    return ReversedRates(
        orig=float(np.mean(valid_o)),
        rev=float(np.mean(valid_r)),
        both=float(np.mean(valid_o & valid_r)),
    )


def _weak_valid(model, dataset):
    diffs, weights, _ = score_dataset(model, dataset)
    return np.einsum("bk,bk->b", weights, diffs) > 0.0


def evaluate(model, dataset, with_rates=True):
    """Full protocol on one labeled, per-condition-balanced dataset."""
    cost = cost_matrix(model, dataset)
    gmap = greedy_align(cost)
    omap, plan = ot_align(cost)
    gr_acc = supervised_accuracy(model, dataset, gmap)
    ot_acc = supervised_accuracy(model, dataset, omap)
    rows = np.arange(cost.shape[0])
    report = EvalReport(
        variant=model.variant,
        n_conditions=cost.shape[0],
        n_embeddings=cost.shape[1],
        alignment_source="self",
        gr_accuracy=gr_acc,
        ot_accuracy=ot_acc,
        greedy_map=gmap,
        ot_map=omap,
        per_condition_gr=1.0 - cost[rows, gmap],
        per_condition_ot=1.0 - cost[rows, omap],
        cost=cost,
        plan=plan,
    )
    if with_rates:
        if model.encoder is not None:
            report.weak_rates = reversed_experiment(model, dataset, "weak")
        report.aligned_rates = reversed_experiment(
            model, dataset, "supervised", align_map=omap
        )
    return report
