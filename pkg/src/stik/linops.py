"""Matrix-free linear operators with adjoints and row-block extraction.

All operators are immutable after construction and safe for concurrent
reads. Arithmetic is float64 throughout. Dense matrices are stored
row-major; extracting a contiguous row block of a dense operator copies
nothing.
"""

import numpy as np

from .exceptions import InvalidArgumentError


def _as_vector(x, size, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != size:
        raise InvalidArgumentError(
            f"{what}: expected vector of length {size}, got shape {x.shape}")
    return x


class LinearOperator:
    """Base class: a real linear map with an explicit adjoint.

    Attributes
    ----------
    nrows, ncols : int
        Output and input dimensions.
    kind : str
        One of ``dense``, ``identity``, ``scaled``, ``composed``,
        ``restriction``, ``affine``, ``stacked``.
    """

    kind = "abstract"

    def __init__(self, nrows, ncols):
        self.nrows = int(nrows)
        self.ncols = int(ncols)

    def apply(self, x):
        x = _as_vector(x, self.ncols, f"{type(self).__name__}.apply")
        return self._apply(x)

    def apply_adjoint(self, y):
        y = _as_vector(y, self.nrows, f"{type(self).__name__}.apply_adjoint")
        return self._apply_adjoint(y)

    def _apply(self, x):
        raise NotImplementedError

    def _apply_adjoint(self, y):
        raise NotImplementedError

    def to_dense(self):
        """Materialize as an ndarray by applying to unit vectors.

        Intended for small operators (oracles, direct solvers); matrix-free
        operators at scale should never need this.
        """
        cols = [self.apply(e) for e in np.eye(self.ncols)]
        return np.column_stack(cols)

    def row_block(self, rows):
        return row_block(self, rows)

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    def __repr__(self):
        return f"<{type(self).__name__} {self.nrows}x{self.ncols}>"


class DenseOperator(LinearOperator):
    """Wraps a 2-D ndarray. The array is not copied."""

    kind = "dense"

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise InvalidArgumentError("DenseOperator needs a 2-D array")
        super().__init__(*matrix.shape)
        self.matrix = matrix

    def _apply(self, x):
        return self.matrix @ x

    def _apply_adjoint(self, y):
        return self.matrix.T @ y

    def to_dense(self):
        return self.matrix


class IdentityOperator(LinearOperator):
    kind = "identity"

    def __init__(self, n):
        super().__init__(n, n)

    def _apply(self, x):
        return x.copy()

    def _apply_adjoint(self, y):
        return y.copy()

    def to_dense(self):
        return np.eye(self.nrows)


class ScaledOperator(LinearOperator):
    """alpha * op."""

    kind = "scaled"

    def __init__(self, op, alpha):
        super().__init__(op.nrows, op.ncols)
        self.op = op
        self.alpha = float(alpha)

    def _apply(self, x):
        return self.alpha * self.op.apply(x)

    def _apply_adjoint(self, y):
        return self.alpha * self.op.apply_adjoint(y)


class ComposedOperator(LinearOperator):
    """Composition op1 @ op2 @ ... (rightmost applied first). Factors are
    evaluated in sequence; nothing is materialized."""

    kind = "composed"

    def __init__(self, *ops):
        if not ops:
            raise InvalidArgumentError("ComposedOperator needs >= 1 factor")
        for left, right in zip(ops[:-1], ops[1:]):
            if left.ncols != right.nrows:
                raise InvalidArgumentError(
                    f"composition mismatch: {left.shape} @ {right.shape}")
        super().__init__(ops[0].nrows, ops[-1].ncols)
        self.ops = tuple(ops)

    def _apply(self, x):
        for op in reversed(self.ops):
            x = op.apply(x)
        return x

    def _apply_adjoint(self, y):
        for op in self.ops:
            y = op.apply_adjoint(y)
        return y


class StackedOperator(LinearOperator):
    """Vertical stack [op_1; op_2; ...] over a common domain."""

    kind = "stacked"

    def __init__(self, ops):
        ops = tuple(ops)
        if not ops:
            raise InvalidArgumentError("StackedOperator needs >= 1 block")
        ncols = ops[0].ncols
        for op in ops:
            if op.ncols != ncols:
                raise InvalidArgumentError("stacked blocks disagree on ncols")
        super().__init__(sum(op.nrows for op in ops), ncols)
        self.ops = ops
        self._offsets = np.cumsum([0] + [op.nrows for op in ops])

    def _apply(self, x):
        return np.concatenate([op.apply(x) for op in self.ops])

    def _apply_adjoint(self, y):
        out = np.zeros(self.ncols)
        for op, lo, hi in zip(self.ops, self._offsets[:-1], self._offsets[1:]):
            out += op.apply_adjoint(y[lo:hi])
        return out

    def component_for_rows(self, rows):
        """Return the component operator whose row span is exactly ``rows``
        (in order), or None."""
        lo, hi = rows[0], rows[-1] + 1
        if not np.array_equal(rows, np.arange(lo, hi)):
            return None
        for op, off_lo, off_hi in zip(self.ops, self._offsets[:-1],
                                      self._offsets[1:]):
            if lo == off_lo and hi == off_hi:
                return op
        return None


class RowBlockView(LinearOperator):
    """A block of rows of a parent operator.

    apply(x) is exactly parent.apply(x) restricted to ``rows`` (computed
    through the parent so the equality is bitwise); the adjoint scatters
    into the parent's row space. Use :meth:`dense` or :meth:`operator`
    when a standalone block is needed in an inner loop.
    """

    kind = "row_block"

    def __init__(self, parent, rows):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.ndim != 1 or rows.size == 0:
            raise InvalidArgumentError("rows must be a non-empty 1-D index list")
        if rows.min() < 0 or rows.max() >= parent.nrows:
            raise InvalidArgumentError(
                f"row index out of range [0, {parent.nrows})")
        if np.unique(rows).size != rows.size:
            raise InvalidArgumentError("duplicate row index within a block")
        super().__init__(rows.size, parent.ncols)
        self.parent = parent
        self.rows = rows

    def _apply(self, x):
        return self.parent.apply(x)[self.rows]

    def _apply_adjoint(self, y):
        full = np.zeros(self.parent.nrows)
        full[self.rows] = y
        return self.parent.apply_adjoint(full)

    def dense(self):
        """The block as an ndarray; a no-copy view for a contiguous block
        of a dense parent."""
        if isinstance(self.parent, DenseOperator):
            lo, hi = self.rows[0], self.rows[-1] + 1
            if np.array_equal(self.rows, np.arange(lo, hi)):
                return self.parent.matrix[lo:hi]
            return self.parent.matrix[self.rows]
        return _materialize_rows(self)

    def operator(self):
        """Cheapest standalone operator with this block's action (used to
        assemble stacked least-squares systems)."""
        if isinstance(self.parent, DenseOperator):
            return DenseOperator(self.dense())
        if isinstance(self.parent, StackedOperator):
            comp = self.parent.component_for_rows(self.rows)
            if comp is not None:
                return comp
        return self


def _materialize_rows(block):
    out = np.empty((block.nrows, block.ncols))
    e = np.zeros(block.parent.nrows)
    for i, r in enumerate(block.rows):
        e[r] = 1.0
        out[i] = block.parent.apply_adjoint(e)
        e[r] = 0.0
    return out


def row_block(op, rows):
    """Extract a row block of ``op`` as a :class:`RowBlockView`."""
    return RowBlockView(op, rows)


# ---------------------------------------------------------------------------
# plain-text matrix and vector formats


def save_matrix(path, matrix):
    """Write a dense matrix: first line ``rows cols``, then one
    whitespace-separated row per line."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for row in matrix:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def load_matrix(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise InvalidArgumentError(f"{path}: bad matrix header")
        nrows, ncols = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (nrows, ncols):
        raise InvalidArgumentError(
            f"{path}: header says {(nrows, ncols)}, body is {data.shape}")
    return data


def save_vector(path, vec):
    """Write a vector, one value per line."""
    vec = np.asarray(vec, dtype=np.float64)
    with open(path, "w") as fh:
        for v in vec:
            fh.write(format(v, ".17g") + "\n")


def load_vector(path):
    return np.loadtxt(path, dtype=np.float64, ndmin=1)
