import numpy as np
import pytest

from tilttransport import CovariateSchema, ObservationTable
from tilttransport.data import MISSING


def build_table(schema: CovariateSchema, source_rows, target_rows
                ) -> ObservationTable:
    """Assemble a table from explicit rows.

    ``source_rows``: (level_tuple_over_all_covariates, a, y) triples.
    ``target_rows``: level tuples over the shared covariates.
    """
    cols = schema.source_covariates
    shared = schema.shared_covariates
    n = len(source_rows) + len(target_rows)
    codes = np.full((n, len(cols)), MISSING, dtype=np.int32)
    role = np.zeros(n, dtype=np.int8)
    a = np.full(n, MISSING, dtype=np.int8)
    y = np.full(n, np.nan)
    for i, (levels, ai, yi) in enumerate(source_rows):
        role[i] = 1
        for j, name in enumerate(cols):
            codes[i, j] = schema.level_code(name, levels[j])
        a[i] = ai
        y[i] = yi
    for k, levels in enumerate(target_rows):
        i = len(source_rows) + k
        for name, token in zip(shared, levels):
            codes[i, schema.column_position(name)] = schema.level_code(name, token)
    return ObservationTable(schema, role, codes, a, y)


@pytest.fixture
def gender_schema() -> CovariateSchema:
    return CovariateSchema(
        source_covariates=("gender",),
        levels={"gender": ("female", "other")},
        shared_covariates=("gender",),
    )


@pytest.fixture
def two_column_schema() -> CovariateSchema:
    return CovariateSchema(
        source_covariates=("gender", "age"),
        levels={"gender": ("female", "other"), "age": ("young", "old")},
        shared_covariates=("gender",),
    )
