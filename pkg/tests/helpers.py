import numpy as np

from malmas.data import NUMERIC, ColumnSchema, Table


def make_table(columns: dict, target: str, task: str, kinds: dict | None = None) -> Table:
    """Build a Table from plain arrays; kinds default to numeric."""
    kinds = kinds or {}
    schema = []
    arrays = {}
    n = len(next(iter(columns.values())))
    for name, values in columns.items():
        first = values[0]
        values = np.asarray(values, dtype=object if isinstance(first, str) or first is None else float)
        kind = kinds.get(name, NUMERIC)
        if values.dtype == object:
            missing = sum(1 for v in values if v is None)
            distinct = len({v for v in values if v is not None})
        else:
            missing = int(np.isnan(values).sum())
            distinct = len(set(values[~np.isnan(values)].tolist()))
        schema.append(ColumnSchema(name, kind, distinct, missing))
        arrays[name] = values
    return Table(tuple(schema), arrays, n, target, task)
