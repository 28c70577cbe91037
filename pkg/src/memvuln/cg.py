"""Conjugate-gradient benchmark on a 3D Poisson 27-point stencil.

The solver follows the classic double-buffered formulation: the residual
is recomputed from scratch every 50 iterations and updated incrementally
otherwise, the two direction buffers swap roles at the end of every
iteration, and all reductions run in a fixed blocked order so fault-free
runs are bit-reproducible.  An optional observer receives every logical
load/store to the nine tracked structures as vectorized event blocks.
"""

from __future__ import annotations

import struct
import time as _time
from dataclasses import dataclass

import numpy as np

from .trace import KIND_LOAD, KIND_STORE, StructureMap, StructureRegion

#: Hard cap on generated rows; beyond this the CSR arrays alone would
#: exceed the 32 GB simulated memory capacity.
MAX_ROWS = 1 << 27

#: Fixed block length for deterministic reductions.
REDUCE_BLOCK = 4096

_PAGE = 4096


class CapacityError(ValueError):
    """Requested problem size does not fit the simulated address space."""


class CgBreakdownError(RuntimeError):
    """<q, d> collapsed to exactly zero (possible only under injected faults)."""


@dataclass
class CsrMatrix:
    n_rows: int
    row_ptr: np.ndarray  # int64, n_rows + 1
    col_idx: np.ndarray  # int64, nnz
    values: np.ndarray  # float64, nnz

    @property
    def nnz(self) -> int:
        return len(self.col_idx)

    def validate(self) -> None:
        if self.row_ptr.dtype != np.int64 or self.col_idx.dtype != np.int64:
            raise ValueError("index arrays must be int64")
        if len(self.row_ptr) != self.n_rows + 1:
            raise ValueError("row_ptr length mismatch")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != self.nnz:
            raise ValueError("row_ptr endpoints invalid")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr not non-decreasing")
        if self.nnz and (
            self.col_idx.min() < 0 or self.col_idx.max() >= self.n_rows
        ):
            raise ValueError("col_idx out of range")

    def copy(self) -> "CsrMatrix":
        return CsrMatrix(
            self.n_rows,
            self.row_ptr.copy(),
            self.col_idx.copy(),
            self.values.copy(),
        )


def generate_poisson27(side: int) -> CsrMatrix:
    """27-point stencil on a side**3 grid: diagonal 26, neighbors -1.

    Boundary rows are truncated (fewer neighbors), which keeps the matrix
    irreducibly diagonally dominant and hence symmetric positive definite.
    """
    if side < 2:
        raise ValueError("side must be at least 2")
    n = side**3
    if n > MAX_ROWS:
        raise CapacityError(f"side={side} yields {n} rows; limit is {MAX_ROWS}")
    idx = np.arange(n, dtype=np.int64)
    z, rem = np.divmod(idx, side * side)
    y, x = np.divmod(rem, side)
    rows_parts = []
    cols_parts = []
    vals_parts = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                nz, ny, nx = z + dz, y + dy, x + dx
                ok = (
                    (0 <= nz)
                    & (nz < side)
                    & (0 <= ny)
                    & (ny < side)
                    & (0 <= nx)
                    & (nx < side)
                )
                rows_parts.append(idx[ok])
                cols_parts.append(((nz * side + ny) * side + nx)[ok])
                weight = 26.0 if (dz, dy, dx) == (0, 0, 0) else -1.0
                vals_parts.append(np.full(int(ok.sum()), weight))
    rows = np.concatenate(rows_parts)
    cols = np.concatenate(cols_parts)
    vals = np.concatenate(vals_parts)
    order = np.lexsort((cols, rows))
    rows = rows[order]
    cols = cols[order]
    vals = vals[order]
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=row_ptr[1:])
    return CsrMatrix(n, row_ptr, cols.astype(np.int64), vals)


def make_diagonal(diag: np.ndarray) -> CsrMatrix:
    """Diagonal CSR matrix (converges in one CG iteration)."""
    diag = np.asarray(diag, dtype=np.float64)
    n = len(diag)
    return CsrMatrix(
        n,
        np.arange(n + 1, dtype=np.int64),
        np.arange(n, dtype=np.int64),
        diag.copy(),
    )


def norm2_blocked(v: np.ndarray, block: int = REDUCE_BLOCK) -> float:
    """Sum of squares in a fixed blocked order (bit-reproducible)."""
    total = 0.0
    for i in range(0, len(v), block):
        seg = v[i : i + block]
        total += float(np.add.reduce(seg * seg))
    return total


def dot_blocked(a: np.ndarray, b: np.ndarray, block: int = REDUCE_BLOCK) -> float:
    total = 0.0
    for i in range(0, len(a), block):
        total += float(np.add.reduce(a[i : i + block] * b[i : i + block]))
    return total


def spmv(A: CsrMatrix, v: np.ndarray, out=None, prod=None) -> np.ndarray:
    """out = A @ v. Rows must be non-empty (true for all generated matrices)."""
    if prod is None:
        prod = A.values * v[A.col_idx]
    else:
        np.take(v, A.col_idx, out=prod[: A.nnz])
        np.multiply(A.values, prod[: A.nnz], out=prod[: A.nnz])
        prod = prod[: A.nnz]
    if out is None:
        out = np.empty(A.n_rows)
    np.add.reduceat(prod, A.row_ptr[:-1], out=out)
    return out


@dataclass
class CgVectors:
    """Working storage for one solve; injection campaigns flip bits here."""

    x: np.ndarray
    g: np.ndarray
    d: np.ndarray
    dp: np.ndarray
    q: np.ndarray

    @classmethod
    def allocate(cls, n: int) -> "CgVectors":
        return cls(*(np.zeros(n) for _ in range(5)))


@dataclass
class SolveRecord:
    iterations: int
    converged: bool
    final_residual_norm_sq: float
    verified: bool
    roi_wall_time: float


def verify(A: CsrMatrix, b: np.ndarray, x: np.ndarray, tol: float) -> bool:
    """Recompute ||b - A x||^2 against the supplied (pristine) inputs."""
    r = b - spmv(A, x)
    return norm2_blocked(r) < tol


def default_tol(b: np.ndarray, factor: float = 1e-8) -> float:
    return factor * norm2_blocked(b)


def solve(
    A: CsrMatrix,
    b: np.ndarray,
    *,
    tol: float,
    t_max: int = 2000,
    vectors: CgVectors | None = None,
    observer=None,
    roi_begin_cb=None,
    roi_end_cb=None,
    verify_with: tuple[CsrMatrix, np.ndarray] | None = None,
) -> SolveRecord:
    """Run the solver loop; see module docstring for the exact recurrence.

    ``iterations`` in the returned record is the loop index at which the
    convergence test fired (the number of completed search steps).  A NaN
    residual never satisfies the test, so poisoned runs fall through to
    t_max and fail verification.  ``verify_with`` supplies pristine copies
    for the final residual check; it defaults to (A, b) themselves.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = A.n_rows
    if len(b) != n:
        raise ValueError("dimension mismatch")
    if np.any(np.diff(A.row_ptr) == 0):
        raise ValueError("matrices with empty rows are not supported")
    v = vectors if vectors is not None else CgVectors.allocate(n)
    v.x[:] = 0.0
    v.g[:] = 0.0
    v.q[:] = 0.0
    v.d[:] = 0.0
    v.dp[:] = 0.0
    prod = np.empty(A.nnz)
    scratch = np.empty(n)

    emitter = _AccessEmitter(A, observer) if observer is not None else None
    if emitter is not None:
        observer.register_structures(emitter.smap)

    eps = float("inf")
    eps_old = float("inf")
    alpha = 0.0
    cur_d, cur_dp = v.d, v.dp
    parity = 0  # 0 while v.d plays the role of d
    iterations = t_max
    converged = False

    t0 = _time.perf_counter()
    if roi_begin_cb is not None:
        roi_begin_cb()
    if emitter is not None:
        observer.roi_begin()
    for t in range(t_max):
        if t % 50 == 0:
            spmv(A, v.x, out=v.g, prod=prod)
            np.subtract(b, v.g, out=v.g)
            if emitter is not None:
                emitter.emit_g_recompute()
        else:
            np.multiply(v.q, alpha, out=scratch)
            np.subtract(v.g, scratch, out=v.g)
            if emitter is not None:
                emitter.emit_g_axpy()
        eps = norm2_blocked(v.g)
        if emitter is not None:
            emitter.emit_eps()
        if eps < tol:
            iterations = t
            converged = True
            break
        beta = eps / eps_old
        np.multiply(cur_dp, beta, out=cur_d)
        cur_d += v.g
        if emitter is not None:
            emitter.emit_d_update(parity)
        spmv(A, cur_d, out=v.q, prod=prod)
        if emitter is not None:
            emitter.emit_q_spmv(parity)
        denom = dot_blocked(v.q, cur_d)
        if emitter is not None:
            emitter.emit_alpha_dot(parity)
        if denom == 0.0:
            raise CgBreakdownError(f"<q,d> = 0 at iteration {t}")
        alpha = eps / denom
        np.multiply(cur_d, alpha, out=scratch)
        v.x += scratch
        if emitter is not None:
            emitter.emit_x_update(parity)
        eps_old = eps
        cur_d, cur_dp = cur_dp, cur_d
        parity ^= 1
    if emitter is not None:
        observer.roi_end()
    if roi_end_cb is not None:
        roi_end_cb()
    wall = _time.perf_counter() - t0

    pv = verify_with if verify_with is not None else (A, b)
    verified = converged and verify(pv[0], pv[1], v.x, tol)
    return SolveRecord(iterations, converged, float(eps), verified, wall)


# ---------------------------------------------------------------------------
# Access observation


def default_structure_map(A: CsrMatrix) -> StructureMap:
    """Page-aligned flat layout of the nine tracked structures."""
    n = A.n_rows
    sizes = {
        "Ar": (n + 1) * 8,
        "Ac": A.nnz * 8,
        "Av": A.nnz * 8,
        "x": n * 8,
        "b": n * 8,
        "g": n * 8,
        "d": n * 8,
        "dp": n * 8,
        "q": n * 8,
    }
    regions = []
    base = 0
    for name in ("Ar", "Ac", "Av", "x", "b", "g", "d", "dp", "q"):
        regions.append(StructureRegion(name, base, sizes[name]))
        base += -(-sizes[name] // _PAGE) * _PAGE
    return StructureMap(regions)


class _AccessEmitter:
    """Builds and replays per-phase access templates.

    Each solver phase touches its operands element-sequentially, so the
    event block of a phase is identical every iteration up to the role of
    the two direction buffers; templates are therefore cached per phase
    and per buffer parity, and streamed to the observer in bounded chunks.
    """

    CHUNK = 1 << 20

    def __init__(self, A: CsrMatrix, observer):
        self.A = A
        self.obs = observer
        self.smap = default_structure_map(A)
        self._base = {r.name: r.base for r in self.smap.regions}
        self._sid = {r.name: self.smap.ordinal_of(r.name) for r in self.smap.regions}
        self._cache: dict = {}

    # -- template helpers ---------------------------------------------------

    def _addr(self, name: str, idx: np.ndarray | int):
        return self._base[name] + 8 * np.asarray(idx, dtype=np.uint64)

    def _elementwise(self, key, ops):
        """ops = list of (name, kind); one event per op per element i."""
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        n = self.A.n_rows
        m = len(ops)
        idx = np.arange(n, dtype=np.uint64)
        kinds = np.empty(m * n, dtype=np.uint8)
        addrs = np.empty(m * n, dtype=np.uint64)
        sids = np.empty(m * n, dtype=np.uint16)
        for k, (name, kind) in enumerate(ops):
            kinds[k::m] = kind
            addrs[k::m] = self._addr(name, idx)
            sids[k::m] = self._sid[name]
        self._cache[key] = (kinds, addrs, sids)
        return self._cache[key]

    def _spmv_like(self, key, src: str, trailer):
        """Row-major sparse sweep: per row, the two row-pointer loads, then
        (column, value, gathered source) triplets, then the trailer ops."""
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        A = self.A
        n, nnz = A.n_rows, A.nnz
        tr = len(trailer)
        total = (2 + tr) * n + 3 * nnz
        kinds = np.empty(total, dtype=np.uint8)
        addrs = np.empty(total, dtype=np.uint64)
        sids = np.empty(total, dtype=np.uint16)
        rows = np.arange(n, dtype=np.int64)
        row_of = np.repeat(rows, np.diff(A.row_ptr))
        start = (2 + tr) * rows + 3 * A.row_ptr[:-1]
        j = np.arange(nnz, dtype=np.int64)
        trip = (2 + tr) * row_of + 2 + 3 * j
        # Row-pointer loads: entries r and r+1 of the row array.
        for k in (0, 1):
            pos = start + k
            kinds[pos] = KIND_LOAD
            addrs[pos] = self._addr("Ar", rows + k)
            sids[pos] = self._sid["Ar"]
        # Column index, value, gathered source element.
        kinds[trip] = KIND_LOAD
        addrs[trip] = self._addr("Ac", j)
        sids[trip] = self._sid["Ac"]
        kinds[trip + 1] = KIND_LOAD
        addrs[trip + 1] = self._addr("Av", j)
        sids[trip + 1] = self._sid["Av"]
        kinds[trip + 2] = KIND_LOAD
        addrs[trip + 2] = self._addr(src, A.col_idx)
        sids[trip + 2] = self._sid[src]
        tpos = (2 + tr) * rows + 3 * A.row_ptr[1:] + 2
        for k, (name, kind) in enumerate(trailer):
            pos = tpos + k
            kinds[pos] = kind
            addrs[pos] = self._addr(name, rows)
            sids[pos] = self._sid[name]
        self._cache[key] = (kinds, addrs, sids)
        return self._cache[key]

    def _emit(self, template) -> None:
        kinds, addrs, sids = template
        for i in range(0, len(kinds), self.CHUNK):
            self.obs.emit(
                kinds[i : i + self.CHUNK],
                addrs[i : i + self.CHUNK],
                sids[i : i + self.CHUNK],
            )

    def _d_name(self, parity: int) -> str:
        return "d" if parity == 0 else "dp"

    def _dp_name(self, parity: int) -> str:
        return "dp" if parity == 0 else "d"

    # -- phases ---------------------------------------------------------------

    def emit_g_recompute(self) -> None:
        self._emit(
            self._spmv_like(
                "grec", "x", [("b", KIND_LOAD), ("g", KIND_STORE)]
            )
        )

    def emit_g_axpy(self) -> None:
        self._emit(
            self._elementwise(
                "gaxpy",
                [("g", KIND_LOAD), ("q", KIND_LOAD), ("g", KIND_STORE)],
            )
        )

    def emit_eps(self) -> None:
        self._emit(self._elementwise("eps", [("g", KIND_LOAD)]))

    def emit_d_update(self, parity: int) -> None:
        self._emit(
            self._elementwise(
                ("dupd", parity),
                [
                    (self._dp_name(parity), KIND_LOAD),
                    ("g", KIND_LOAD),
                    (self._d_name(parity), KIND_STORE),
                ],
            )
        )

    def emit_q_spmv(self, parity: int) -> None:
        self._emit(
            self._spmv_like(
                ("spmv", parity), self._d_name(parity), [("q", KIND_STORE)]
            )
        )

    def emit_alpha_dot(self, parity: int) -> None:
        self._emit(
            self._elementwise(
                ("adot", parity),
                [("q", KIND_LOAD), (self._d_name(parity), KIND_LOAD)],
            )
        )

    def emit_x_update(self, parity: int) -> None:
        self._emit(
            self._elementwise(
                ("xupd", parity),
                [
                    ("x", KIND_LOAD),
                    (self._d_name(parity), KIND_LOAD),
                    ("x", KIND_STORE),
                ],
            )
        )


# ---------------------------------------------------------------------------
# Binary serialization

_MAT_MAGIC = b"MVCM"
_VEC_MAGIC = b"MVVE"
_SER_VERSION = 1


def save_matrix(path, A: CsrMatrix) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHHQQ", _MAT_MAGIC, _SER_VERSION, 0, A.n_rows, A.nnz))
        fh.write(A.row_ptr.astype("<i8").tobytes())
        fh.write(A.col_idx.astype("<i8").tobytes())
        fh.write(A.values.astype("<f8").tobytes())


def load_matrix(path) -> CsrMatrix:
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sHHQQ"))
        magic, version, _, n_rows, nnz = struct.unpack("<4sHHQQ", head)
        if magic != _MAT_MAGIC:
            raise ValueError("not a matrix file")
        if version != _SER_VERSION:
            raise ValueError(f"matrix file version {version} unsupported")
        row_ptr = np.fromfile(fh, dtype="<i8", count=n_rows + 1).astype(np.int64)
        col_idx = np.fromfile(fh, dtype="<i8", count=nnz).astype(np.int64)
        values = np.fromfile(fh, dtype="<f8", count=nnz).astype(np.float64)
    A = CsrMatrix(n_rows, row_ptr, col_idx, values)
    A.validate()
    return A


def save_vector(path, v: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHHQ", _VEC_MAGIC, _SER_VERSION, 0, len(v)))
        fh.write(np.asarray(v, dtype="<f8").tobytes())


def load_vector(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sHHQ"))
        magic, version, _, n = struct.unpack("<4sHHQ", head)
        if magic != _VEC_MAGIC:
            raise ValueError("not a vector file")
        if version != _SER_VERSION:
            raise ValueError(f"vector file version {version} unsupported")
        return np.fromfile(fh, dtype="<f8", count=n).astype(np.float64)
