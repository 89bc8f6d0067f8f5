"""Parameter storage, initialisation, AdamW and checkpoint I/O."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .tensor import ContractError, Tensor

CKPT_MAGIC = "cgf-ckpt-v1"


class CheckpointError(RuntimeError):
    pass


def kaiming_uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(shape, -bound, bound)


class ParamStore:
    """Insertion-ordered name -> Tensor map with AdamW moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def n_scalars(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter set mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise CheckpointError(f"shape mismatch for {k}: checkpoint {state[k].shape} vs model {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)


def adamw_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0, allow_missing: bool = False):
    """One decoupled-weight-decay Adam update over every parameter in ``store``.

    Parameters whose gradient is absent raise unless ``allow_missing`` is set,
    in which case they are treated as having zero gradient.
    """
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            if not allow_missing:
                raise ContractError(f"missing gradient for parameter {name!r}")
            g = np.zeros_like(p.data)
        if name not in store.m:
            store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        m = store.m[name] = b1 * store.m[name] + (1.0 - b1) * g
        v = store.v[name] = b2 * store.v[name] + (1.0 - b2) * g * g
        data = p.data * (1.0 - lr * weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---- checkpoint container -------------------------------------------------
# Layout: ASCII header lines, terminated by "end\n", then the little-endian
# float64 payload. Offsets in the header are byte offsets into the payload.
#   cgf-ckpt-v1
#   meta <key> <value>
#   param <name> <d0xd1x...> <offset>
#   end

def save_checkpoint(path, store: ParamStore, meta: dict[str, str] | None = None):
    lines = [CKPT_MAGIC]
    for k, v in (meta or {}).items():
        if "\n" in str(v) or " " in k:
            raise CheckpointError(f"meta entry {k!r} is not single-line")
        lines.append(f"meta {k} {v}")
    chunks, offset = [], 0
    for name, t in store.params.items():
        shape = "x".join(str(d) for d in t.shape) or "scalar"
        lines.append(f"param {name} {shape} {offset}")
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        chunks.append(buf)
        offset += len(buf)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for buf in chunks:
            fh.write(buf)


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(CKPT_MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a {CKPT_MAGIC} checkpoint")
    header = raw[:end].decode("ascii").split("\n")
    payload = raw[end + len(b"\nend\n"):]
    meta, state = {}, {}
    for line in header[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif kind == "param":
            name, shape_s, off_s = rest.split(" ")
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            n = int(np.prod(shape)) if shape else 1
            off = int(off_s)
            state[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        else:
            raise CheckpointError(f"{path}: unknown header record {kind!r}")
    return meta, state
