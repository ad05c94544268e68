"""Combining representations in the dual form.

Two kernel matrices over the same documents are fused by elementwise
summation, which is equivalent to concatenating the (implicit) feature
vectors of the two representations.  :func:`linear_gram` provides the
explicit-map side of that equivalence for testing and for any
explicit-feature path.
"""
from __future__ import annotations

import numpy as np

from .errors import KernelMismatchError
from .string_kernel import FeatureMatrix, KernelMatrix


def _first_divergent(a: tuple[str, ...], b: tuple[str, ...]) -> str:
    for x, y in zip(a, b):
        if x != y:
            return f"{x!r} vs {y!r}"
    return f"{a[len(b)]!r} vs <missing>" if len(a) > len(b) else f"<missing> vs {b[len(a)]!r}"


def sum_kernels(k1: KernelMatrix, k2: KernelMatrix) -> KernelMatrix:
    """Elementwise sum of two aligned kernel matrices (kind "fused")."""
    if k1.shape != k2.shape:
        raise KernelMismatchError(f"kernel shapes differ: {k1.shape} vs {k2.shape}")
    if k1.row_ids != k2.row_ids:
        raise KernelMismatchError(
            f"row ids diverge at {_first_divergent(k1.row_ids, k2.row_ids)}"
        )
    if k1.col_ids != k2.col_ids:
        raise KernelMismatchError(
            f"column ids diverge at {_first_divergent(k1.col_ids, k2.col_ids)}"
        )
    diag_rows = diag_cols = None
    if k1.diag_rows is not None and k2.diag_rows is not None:
        diag_rows = k1.diag_rows + k2.diag_rows
    if k1.diag_cols is not None and k2.diag_cols is not None:
        diag_cols = k1.diag_cols + k2.diag_cols
    return KernelMatrix(
        values=k1.values + k2.values,
        row_ids=k1.row_ids,
        col_ids=k1.col_ids,
        kind="fused",
        diag_rows=diag_rows,
        diag_cols=diag_cols,
    )


def linear_gram(x: FeatureMatrix, y: FeatureMatrix | None = None) -> KernelMatrix:
    """Inner-product matrix between explicit feature rows."""
    y_eff = x if y is None else y
    if x.cols != y_eff.cols:
        raise KernelMismatchError(f"feature counts differ: {x.cols} vs {y_eff.cols}")
    return KernelMatrix(
        values=x.values @ y_eff.values.T,
        row_ids=x.ids,
        col_ids=y_eff.ids,
        kind="linear",
        diag_rows=np.einsum("ij,ij->i", x.values, x.values),
        diag_cols=np.einsum("ij,ij->i", y_eff.values, y_eff.values),
    )


def concat_features(x1: FeatureMatrix, x2: FeatureMatrix) -> FeatureMatrix:
    """Column-concatenate two feature matrices over the same documents."""
    if x1.ids != x2.ids:
        raise KernelMismatchError(f"document ids diverge at {_first_divergent(x1.ids, x2.ids)}")
    return FeatureMatrix(ids=x1.ids, values=np.hstack([x1.values, x2.values]))
