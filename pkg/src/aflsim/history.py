"""Server-side memory: global model log, client records, Lipschitz log, diff buffers."""

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numkit import as_vector

CHECKPOINT_SCHEMA = 1


def _check_finite(v, what):
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite {what}")
    return v


@dataclass
class ClientRecord:
    client_id: int
    last_update: np.ndarray = None
    last_base_round: int = -1
    ever_seen: bool = False


@dataclass
class LbfgsBuffers:
    """Per-client paired ring buffers of (model diff, update diff) entries.

    Each client's buffer pairs the model differences with that client's update
    differences so their inner products line up round by round; capacity is the
    limited-memory window size.
    """

    capacity: int
    _rings: dict = field(default_factory=dict)

    def push(self, client_id, dw, dg):
        dw, dg = as_vector(dw), as_vector(dg)
        if dw.shape != dg.shape:
            raise ValueError("model diff and update diff lengths differ")
        ring = self._rings.setdefault(client_id, deque(maxlen=self.capacity))
        ring.append((dw, dg))

    def pairs(self, client_id):
        """Aligned (model diffs, update diffs) lists, oldest first."""
        ring = self._rings.get(client_id, ())
        return [p[0] for p in ring], [p[1] for p in ring]

    def size(self, client_id):
        return len(self._rings.get(client_id, ()))


class HistoryStore:
    """Everything the server remembers across rounds.

    Global models are retained for every round (the staleness protocol samples
    from the full past); the Lipschitz log is append-only.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.models = []                      # index == round
        self.records = {}                     # client_id -> ClientRecord
        self.lipschitz_log = []               # append-only scalars
        self.buffers = LbfgsBuffers(capacity)

    # -- global model log ---------------------------------------------------

    def record_global(self, t, w):
        if t != len(self.models):
            raise ValueError(f"round {t} breaks the contiguous log (next is {len(self.models)})")
        self.models.append(_check_finite(as_vector(w), "global model").copy())

    def model(self, t):
        if not 0 <= t < len(self.models):
            raise ValueError(f"round {t} not recorded")
        return self.models[t]

    @property
    def latest_round(self):
        return len(self.models) - 1

    def delta_w(self, t, v):
        if v > t:
            raise ValueError("v must not exceed t")
        return self.model(t) - self.model(v)

    # -- client records -----------------------------------------------------

    def client_record(self, client_id):
        if client_id not in self.records:
            self.records[client_id] = ClientRecord(client_id)
        return self.records[client_id]

    def update_client_record(self, client_id, g, base_round):
        rec = self.client_record(client_id)
        rec.last_update = _check_finite(as_vector(g), "client update").copy()
        rec.last_base_round = int(base_round)
        rec.ever_seen = True

    def seen_clients(self):
        return sorted(k for k, rec in self.records.items() if rec.ever_seen)

    # -- lipschitz log ------------------------------------------------------

    def append_lipschitz(self, lam):
        if not (lam >= 0):
            raise ValueError("lipschitz factor must be >= 0")
        self.lipschitz_log.append(float(lam))

    def push_diffs(self, client_id, dw, dg):
        self.buffers.push(client_id, dw, dg)

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, path):
        state = {
            "schema": CHECKPOINT_SCHEMA,
            "capacity": self.buffers.capacity,
            "models": [m.tolist() for m in self.models],
            "records": {
                str(k): {
                    "last_update": None if rec.last_update is None else rec.last_update.tolist(),
                    "last_base_round": rec.last_base_round,
                    "ever_seen": rec.ever_seen,
                }
                for k, rec in self.records.items()
            },
            "lipschitz_log": self.lipschitz_log,
            "buffers": {
                str(k): [[dw.tolist(), dg.tolist()] for dw, dg in ring]
                for k, ring in self.buffers._rings.items()
            },
        }
        with open(path, "w") as fh:
            json.dump(state, fh)

    @classmethod
    def load_checkpoint(cls, path):
        with open(path) as fh:
            state = json.load(fh)
        if state.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {state.get('schema')}")
        hist = cls(state["capacity"])
        for t, m in enumerate(state["models"]):
            hist.record_global(t, np.asarray(m))
        for k, rec in state["records"].items():
            if rec["ever_seen"]:
                hist.update_client_record(int(k), np.asarray(rec["last_update"]),
                                          rec["last_base_round"])
            else:
                hist.client_record(int(k))
        for lam in state["lipschitz_log"]:
            hist.append_lipschitz(lam)
        for k, ring in state["buffers"].items():
            for dw, dg in ring:
                hist.push_diffs(int(k), np.asarray(dw), np.asarray(dg))
        return hist
