"""Pure numpy versions of the kernels in ``_hamming.pyx``."""
import numpy as np

_POPCOUNT8 = np.array([bin(v).count("1") for v in range(256)], dtype=np.int32)

if hasattr(np, "bitwise_count"):

    def _popcount(x):
        return np.bitwise_count(x).astype(np.int32)

else:  # numpy < 2.0

    def _popcount(x):
        return _POPCOUNT8[x]


def hamming_scan(db, query):
    db = np.ascontiguousarray(db, dtype=np.uint8)
    query = np.ascontiguousarray(query, dtype=np.uint8)
    if db.ndim != 2 or query.shape != (db.shape[1],):
        raise ValueError(f"query has {query.shape} bytes, database rows have {db.shape[1:]}")
    return _popcount(db ^ query).sum(axis=1, dtype=np.int32)


def hamming_matrix(queries, db):
    queries = np.ascontiguousarray(queries, dtype=np.uint8)
    db = np.ascontiguousarray(db, dtype=np.uint8)
    if queries.shape[1:] != db.shape[1:]:
        raise ValueError(f"queries have {queries.shape[1:]} bytes, database rows have {db.shape[1:]}")
    return _popcount(queries[:, None, :] ^ db[None, :, :]).sum(axis=2, dtype=np.int32)
