"""Eigenvalues of symmetric-definite pencils by bisection on inertia counts.

``nu(sigma)`` is the number of eigenvalues below sigma, read off the signs
of D in ``A - sigma B = L D L^T``.  All shifts used anywhere are dyadic
points of one global interval, so every estimate is a pure function of the
pencil, the index and the tolerances, independent of how the work is split
between processes.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import logging
import math
import time

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from .arithmetic import ldlt
from .cluster import build_block_tree, build_cluster_tree
from .control import TruncationControl
from .dense import PivotBreakdown
from .h2 import from_sparse, nearfield_blocks

log = logging.getLogger(__name__)

EPS_EV = 1e-5
RETRIES = 5
PERTURBATION = 1e-9


class FactorizationFailed(RuntimeError):
    def __init__(self, sigma, attempts):
        super().__init__(f"LDL^T broke down at sigma={sigma!r} after {attempts} attempts")
        self.sigma = sigma
        self.attempts = attempts


class Pencil:
    """Symmetric matrix A in H^2 form with an optional sparse SPD matrix B.

    B is given in the original ordering; its nonzeros must lie inside
    inadmissible leaves of A's block tree.
    """

    def __init__(self, A, B=None):
        self.A = A
        self.B = None if B is None else sp.csr_matrix(B)
        # dense nearfield pieces of B in the permuted ordering
        self._near = None if B is None else nearfield_blocks(self.B, A.blocks)
        self.scale = A.frobenius_norm() / A.n

    @property
    def n(self):
        return self.A.n

    @property
    def generalized(self):
        return self.B is not None

    def copy(self):
        P = Pencil.__new__(Pencil)
        P.A = self.A.copy()
        P.B = self.B
        P._near = self._near
        P.scale = self.scale
        return P

    @classmethod
    def from_sparse(cls, A, B=None, points=None, leaf_size=32, eta=1.0):
        """Cluster ``points`` (one per row), convert A and attach B."""
        if points is None:
            points = np.arange(A.shape[0], dtype=float)[:, None]
        tree = build_cluster_tree(points, leaf_size)
        blocks = build_block_tree(tree, eta=eta)
        return cls(from_sparse(A, blocks, symmetric=True), B)

    def diagonal_bounds(self):
        """Gershgorin interval of A and bounds for the spectrum of B (``None`` if absent)."""
        N = self.A.N
        bl = self.A.blocks
        lo, hi = np.inf, -np.inf
        radius = np.zeros(self.n)
        diag = np.zeros(self.n)
        for b in bl.inadmissible_leaves:
            blk = N.get(b.id)
            if blk is None:
                continue
            absrow = np.abs(blk).sum(axis=1)
            if b.row is b.col:
                d = np.diagonal(blk)
                diag[b.row.start:b.row.end] += d
                absrow = absrow - np.abs(d)
            radius[b.row.start:b.row.end] += absrow
        lo = float(np.min(diag - radius))
        hi = float(np.max(diag + radius))
        if self.B is None:
            return lo, hi, None
        bd = self.B.diagonal()
        return lo, hi, (float(bd.min()), float(bd.max()))


def shift(P, sigma):
    """Copy of A with ``sigma B`` (or ``sigma I``) subtracted inside the nearfield."""
    M = P.A.copy()
    sigma = float(sigma)
    if sigma == 0.0:
        return M
    bl = M.blocks
    if P._near is None:
        for b in bl.inadmissible_leaves:
            if b.row is b.col and b.id in M.N:
                M.N[b.id][np.diag_indices(b.row.size)] -= sigma
    else:
        for key, blk in P._near.items():
            if key in M.N:
                M.N[key] -= sigma * blk
    return M


@dataclass
class NuRecord:
    count: int
    sigma: float
    attempts: int
    max_rank: int
    seconds: float


def nu_record(P, sigma, control=None):
    """Inertia count at sigma, perturbing the shift when a pivot vanishes."""
    control = control or TruncationControl()
    start = time.perf_counter()
    s = float(sigma)
    for j in range(RETRIES + 1):
        try:
            F = ldlt(shift(P, s), control)
        except PivotBreakdown as exc:
            log.info("pivot breakdown at sigma=%r (position %d), perturbing", s, exc.position)
            s = float(sigma) + (1 + j) * PERTURBATION * P.scale
            continue
        count = int(np.count_nonzero(F.D < 0.0))
        return NuRecord(count, s, j + 1, F.max_rank, time.perf_counter() - start)
    raise FactorizationFailed(float(sigma), RETRIES + 1)


def nu(P, sigma, control=None):
    return nu_record(P, sigma, control).count


def spectrum_bounds(P, control=None):
    """Interval ``[a, b]`` with ``nu(a) = 0`` and ``nu(b) = n``, found by outward doubling."""
    control = control or TruncationControl()
    g = P.A.frobenius_norm()
    if P.generalized:
        g /= max(P.B.diagonal().min(), np.finfo(float).tiny)
    g = max(g, np.finfo(float).tiny)
    a, b = -g, g
    while nu(P, a, control) > 0:
        a *= 2.0
    while nu(P, b, control) < P.n:
        b *= 2.0
    return a, b


@dataclass
class EigenResult:
    index: int
    lower: float
    upper: float
    value: float
    nu_evaluations: int = 0
    wall_time: float = 0.0
    max_rank_seen: int = 0
    error: str = None


@dataclass
class SlicingTask:
    lower: float
    upper: float
    nu_lower: int
    nu_upper: int
    indices: list = field(default_factory=list)
    known: dict = field(default_factory=dict)


class _Counter:
    """nu with a cache of already evaluated shifts and per-run statistics."""

    def __init__(self, P, control, known=None):
        self.P = P
        self.control = control
        self.cache = dict(known or {})
        self.evaluations = 0
        self.max_rank = 0

    def __call__(self, sigma):
        hit = self.cache.get(sigma)
        if hit is not None:
            return hit
        rec = nu_record(self.P, sigma, self.control)
        self.evaluations += 1
        self.max_rank = max(self.max_rank, rec.max_rank)
        self.cache[sigma] = rec.count
        return rec.count


def _bisect(count, m, a, b, eps_ev):
    while b - a >= eps_ev:
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        # nu(mid) >= m means at least m eigenvalues lie below mid
        if count(mid) >= m:
            b = mid
        else:
            a = mid
    return a, b


def slice(P, m, a, b, eps_ev=EPS_EV, control=None, nu_a=None, nu_b=None):
    """Bisect ``[a, b]`` until it is shorter than eps_ev; requires ``nu(a) < m <= nu(b)``."""
    control = control or TruncationControl()
    if not 0.0 < eps_ev:
        raise ValueError("eps_ev must be positive")
    start = time.perf_counter()
    known = {}
    if nu_a is not None:
        known[a] = nu_a
    if nu_b is not None:
        known[b] = nu_b
    count = _Counter(P, control, known)
    if not (count(a) < m <= count(b)):
        raise ValueError(f"[{a}, {b}] does not bracket eigenvalue {m}")
    lo, hi = _bisect(count, m, a, b, eps_ev)
    return EigenResult(m, lo, hi, 0.5 * (lo + hi), count.evaluations,
                       time.perf_counter() - start, count.max_rank)


def run_task(P, task, eps_ev, control):
    """Bisect every index of a task; failures are reported per index."""
    known = dict(task.known)
    known.setdefault(task.lower, task.nu_lower)
    known.setdefault(task.upper, task.nu_upper)
    count = _Counter(P, control, known)
    out = []
    for m in task.indices:
        start = time.perf_counter()
        before = count.evaluations
        try:
            lo, hi = _bisect(count, m, task.lower, task.upper, eps_ev)
            out.append(EigenResult(m, lo, hi, 0.5 * (lo + hi), count.evaluations - before,
                                   time.perf_counter() - start, count.max_rank))
        except FactorizationFailed as exc:
            out.append(EigenResult(m, task.lower, task.upper, math.nan, count.evaluations - before,
                                   time.perf_counter() - start, count.max_rank, error=str(exc)))
    return out


def search_bounds(P, lo, hi, control=None):
    """Interval ``[a, b]`` with ``nu(a) < lo`` and ``nu(b) >= hi``; returns the counts too.

    Starts from Gershgorin-type estimates and doubles outward, so the upper
    end is not pushed to the top of the spectrum when only low indices are
    wanted.
    """
    control = control or TruncationControl()
    glo, ghi, bspec = P.diagonal_bounds()
    if bspec is not None:
        bmin, bmax = bspec
        glo = glo / bmax if glo >= 0 else glo / max(bmin, np.finfo(float).tiny)
        ghi = ghi / max(bmin, np.finfo(float).tiny)
    span = max(ghi - glo, abs(ghi), abs(glo), np.finfo(float).tiny)
    a = glo - 1e-3 * span
    nu_a = nu(P, a, control)
    while nu_a >= lo:
        a -= span
        span *= 2.0
        nu_a = nu(P, a, control)
    if hi >= P.n:
        width = (ghi + 1e-3 * span) - a
    else:
        # a spectrum with evenly spread counts would hold index hi at this fraction
        width = (ghi - a) * min(1.0, 2.0 * hi / P.n)
    width = max(width, np.finfo(float).tiny)
    b = a + width
    nu_b = nu(P, b, control)
    while nu_b < hi:
        width *= 2.0
        b = a + width
        nu_b = nu(P, b, control)
    return a, b, nu_a, nu_b


def plan_tasks(P, lo, hi, a, b, nu_a, nu_b, granularity, eps_ev, control):
    """Split ``[a, b]`` at dyadic midpoints until each piece holds at most ``granularity`` targets."""
    tasks = []
    count = _Counter(P, control, {a: nu_a, b: nu_b})

    def targets(na, nb):
        return [m for m in range(max(na + 1, lo), min(nb, hi) + 1)]

    def split(x, y, nx, ny):
        want = targets(nx, ny)
        if not want:
            return
        if len(want) <= granularity or y - x < eps_ev:
            tasks.append(SlicingTask(x, y, nx, ny, want))
            return
        mid = 0.5 * (x + y)
        try:
            nm = count(mid)
        except FactorizationFailed:
            # leave the piece whole; its workers mark the indices that need mid
            tasks.append(SlicingTask(x, y, nx, ny, want))
            return
        split(x, mid, nx, nm)
        split(mid, y, nm, ny)

    split(a, b, nu_a, nu_b)
    return tasks, count.evaluations


_WORKER = {}


def _init_worker(P, eps_ev, control):
    threadpool_limits(1)
    _WORKER["P"] = P
    _WORKER["eps_ev"] = eps_ev
    _WORKER["control"] = control


def _worker_run(task):
    return run_task(_WORKER["P"], task, _WORKER["eps_ev"], _WORKER["control"])


def default_granularity(lo, hi, workers):
    return max(1, math.ceil((hi - lo + 1) / (4 * workers)))


def compute_eigenvalues(P, index_range, eps_ev=EPS_EV, control=None, workers=1,
                        task_granularity=None, bounds=None):
    """Eigenvalues ``lo..hi`` (1-based, ascending) as a list of EigenResult.

    The master finds a bracketing interval, splits it into tasks and hands
    them to ``workers`` processes holding private copies of the pencil.
    ``bounds=(a, b)`` skips the search; both ends must then bracket the range.
    """
    control = control or TruncationControl()
    lo, hi = index_range
    if not (1 <= lo <= hi <= P.n):
        raise ValueError(f"index range {lo}..{hi} invalid for n={P.n}")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if not 0.0 < eps_ev < 1.0:
        raise ValueError("eps_ev must lie in (0, 1)")
    gran = task_granularity or default_granularity(lo, hi, workers)
    with threadpool_limits(1):
        if bounds is None:
            a, b, nu_a, nu_b = search_bounds(P, lo, hi, control)
        else:
            a, b = (float(v) for v in bounds)
            nu_a, nu_b = nu(P, a, control), nu(P, b, control)
            if not (nu_a < lo and nu_b >= hi):
                raise ValueError(f"[{a}, {b}] does not bracket indices {lo}..{hi}")
        tasks, _ = plan_tasks(P, lo, hi, a, b, nu_a, nu_b, gran, eps_ev, control)
        log.info("%d tasks for indices %d..%d on [%r, %r]", len(tasks), lo, hi, a, b)
        results = []
        if workers == 1 or len(tasks) == 1:
            for task in tasks:
                results.extend(run_task(P, task, eps_ev, control))
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), initializer=_init_worker,
                                     initargs=(P, eps_ev, control)) as pool:
                for chunk in pool.map(_worker_run, tasks):
                    results.extend(chunk)
    results.sort(key=lambda r: r.index)
    return results
