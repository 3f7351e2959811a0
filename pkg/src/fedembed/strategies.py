"""Item embedding composition: frozen full table plus a trainable compressed
adapter (low-rank, hashed shared table with optional squeeze-excitation
reweighting, or residual-quantized codebooks).

Every adapter exposes the same surface: ``compose`` builds final embeddings
for a batch of item ids and returns a cache, ``grads`` turns an upstream
embedding gradient into parameter gradients aligned with ``trainable()``,
and ``serialize_upload`` produces the exact little-endian float32 byte
payload a client would transmit. ``comm_cost`` predicts that payload size
without building anything.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import check_finite, init_layer_weight, init_uniform
from .rng import RngStream

STRATEGY_KINDS = ("full", "lora", "hash", "rqvae")


@dataclass
class FullEmbeddingTable:
    """The n x k base item embeddings; bit-frozen once the warm-up ends."""

    table: np.ndarray
    frozen: bool = False

    @property
    def n_items(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def freeze(self) -> None:
        self.frozen = True
        self.table.setflags(write=False)


def _as_items(items) -> np.ndarray:
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    return items


def _check_range(items: np.ndarray, n: int) -> None:
    if items.size and (items.min() < 0 or items.max() >= n):
        raise IndexError(f"item id out of range [0, {n})")


@dataclass
class FullAdapter:
    """Warm-up / baseline strategy: the trainable table is the embedding."""

    table: np.ndarray
    kind: str = "full"

    @property
    def n_items(self) -> int:
        return self.table.shape[0]

    def compose(self, base: np.ndarray | None, items) -> tuple[np.ndarray, dict]:
        items = _as_items(items)
        _check_range(items, self.n_items)
        return self.table[items].copy(), {"items": items}

    def grads(self, cache: dict, g: np.ndarray) -> list[np.ndarray]:
        d = np.zeros_like(self.table)
        np.add.at(d, cache["items"], g)
        return [d]

    def trainable(self) -> list[np.ndarray]:
        return [self.table]

    def set_trainable(self, tensors: list[np.ndarray]) -> None:
        (self.table,) = _match(self.trainable(), tensors)

    def copy(self) -> "FullAdapter":
        return FullAdapter(self.table.copy())


@dataclass
class LoraAdapter:
    """Low-rank correction: per-item vector a_i projected up by shared B.

    B starts exactly zero, so the composed embedding initially equals the
    frozen base bit-for-bit.
    """

    a: np.ndarray   # (n, rank)
    b: np.ndarray   # (k, rank)
    kind: str = "lora"

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def n_items(self) -> int:
        return self.a.shape[0]

    def compose(self, base: np.ndarray, items) -> tuple[np.ndarray, dict]:
        items = _as_items(items)
        _check_range(items, self.n_items)
        a_rows = self.a[items]
        out = base[items] + a_rows @ self.b.T
        return out, {"items": items, "a_rows": a_rows}

    def grads(self, cache: dict, g: np.ndarray) -> list[np.ndarray]:
        da = np.zeros_like(self.a)
        np.add.at(da, cache["items"], g @ self.b)
        db = g.T @ cache["a_rows"]
        return [da, db.astype(self.b.dtype, copy=False)]

    def trainable(self) -> list[np.ndarray]:
        return [self.a, self.b]

    def set_trainable(self, tensors: list[np.ndarray]) -> None:
        self.a, self.b = _match(self.trainable(), tensors)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy())


def hash_index(item_ids, a: int, b: int, p: int, d_h: int) -> np.ndarray:
    """Universal hash ((a*id + b) mod p) mod d_h; pure and in-range."""
    ids = np.asarray(item_ids, dtype=np.int64)
    return ((a * ids + b) % p) % d_h


def senet_weights(vectors: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Squeeze (mean over the embedding axis) then excite through the
    two-layer ReLU/sigmoid net; returns per-vector weights in (0, 1)."""
    v = np.asarray(vectors)
    if v.ndim != 2 or v.shape[0] != w1.shape[1]:
        raise ValueError(f"expected ({w1.shape[1]}, k) hash vectors, got {v.shape}")
    s = v.mean(axis=1)
    hidden = np.maximum(w1 @ s, 0)
    return 1.0 / (1.0 + np.exp(-(w2 @ hidden)))


@dataclass
class HashAdapter:
    """Shared d_H x k table addressed through h universal hash functions.

    Variant "mean" averages the h hashed vectors; variant "senet" reweights
    them with dynamic weights from a small squeeze-excitation net (w1, w2).
    Hash parameters are fixed at construction and never trained.
    """

    table: np.ndarray                  # (d_H, k)
    hash_a: np.ndarray                 # (h,)
    hash_b: np.ndarray                 # (h,)
    p: int
    w1: np.ndarray | None = None       # (h1, h)
    w2: np.ndarray | None = None       # (h, h1)
    kind: str = "hash"

    def __post_init__(self):
        if np.any(self.hash_a == 0):
            raise ValueError("hash parameter a must be nonzero")
        if np.any(self.hash_a == self.hash_b):
            raise ValueError("hash parameters must satisfy a != b")
        if self.p < self.table.shape[0]:
            raise ValueError("p must be >= table size d_H")
        if (self.w1 is None) != (self.w2 is None):
            raise ValueError("senet needs both w1 and w2")

    @property
    def senet(self) -> bool:
        return self.w1 is not None

    @property
    def n_hashes(self) -> int:
        return len(self.hash_a)

    @property
    def d_h(self) -> int:
        return self.table.shape[0]

    def indices(self, items: np.ndarray) -> np.ndarray:
        return ((self.hash_a[None, :] * items[:, None] + self.hash_b[None, :])
                % self.p) % self.d_h

    def compose(self, base: np.ndarray, items) -> tuple[np.ndarray, dict]:
        items = _as_items(items)
        _check_range(items, base.shape[0])
        idx = self.indices(items)
        v = self.table[idx]                      # (B, h, k)
        cache: dict = {"items": items, "idx": idx, "v": v}
        if not self.senet:
            out = base[items] + v.mean(axis=1)
            return out, cache
        s = v.mean(axis=2)                       # (B, h)
        hidden = np.maximum(s @ self.w1.T, 0)    # (B, h1)
        w = 1.0 / (1.0 + np.exp(-(hidden @ self.w2.T)))   # (B, h)
        out = base[items] + np.einsum("bh,bhk->bk", w, v)
        cache.update({"s": s, "hidden": hidden, "w": w})
        return out, cache

    def grads(self, cache: dict, g: np.ndarray) -> list[np.ndarray]:
        idx, v = cache["idx"], cache["v"]
        dtable = np.zeros_like(self.table)
        if not self.senet:
            dv = np.broadcast_to(g[:, None, :] / self.n_hashes, v.shape)
            np.add.at(dtable, idx, dv)
            return [dtable]
        w, hidden, s = cache["w"], cache["hidden"], cache["s"]
        k = v.shape[2]
        dw = np.einsum("bk,bhk->bh", g, v)            # dL/dw
        dv = w[:, :, None] * g[:, None, :]            # direct path
        dpre2 = dw * w * (1.0 - w)
        dw2 = dpre2.T @ hidden
        dhidden = dpre2 @ self.w2
        dpre1 = dhidden * (hidden > 0)
        dw1 = dpre1.T @ s
        ds = dpre1 @ self.w1
        dv = dv + ds[:, :, None] / k                  # squeeze path
        np.add.at(dtable, idx, dv)
        return [dtable, dw1.astype(self.w1.dtype, copy=False),
                dw2.astype(self.w2.dtype, copy=False)]

    def trainable(self) -> list[np.ndarray]:
        if self.senet:
            return [self.table, self.w1, self.w2]
        return [self.table]

    def set_trainable(self, tensors: list[np.ndarray]) -> None:
        if self.senet:
            self.table, self.w1, self.w2 = _match(self.trainable(), tensors)
        else:
            (self.table,) = _match(self.trainable(), tensors)

    def copy(self) -> "HashAdapter":
        return HashAdapter(self.table.copy(), self.hash_a.copy(), self.hash_b.copy(),
                           self.p,
                           None if self.w1 is None else self.w1.copy(),
                           None if self.w2 is None else self.w2.copy())


@dataclass
class RqVaeAdapter:
    """Multi-level codebooks plus frozen per-item semantic codes."""

    codebooks: np.ndarray    # (l, d_R, k)
    codes: np.ndarray        # (n, l) int, immutable during federation
    kind: str = "rqvae"

    def __post_init__(self):
        levels, d_r, _ = self.codebooks.shape
        if self.codes.shape[1] != levels:
            raise ValueError("codes length must equal number of codebook levels")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= d_r):
            raise ValueError(f"semantic codes out of range [0, {d_r})")
        self.codes.setflags(write=False)

    @property
    def levels(self) -> int:
        return self.codebooks.shape[0]

    @property
    def d_r(self) -> int:
        return self.codebooks.shape[1]

    @property
    def n_items(self) -> int:
        return self.codes.shape[0]

    def compose(self, base: np.ndarray, items) -> tuple[np.ndarray, dict]:
        items = _as_items(items)
        _check_range(items, self.n_items)
        item_codes = self.codes[items]          # (B, l)
        out = base[items].copy()
        for j in range(self.levels):
            out = out + self.codebooks[j][item_codes[:, j]]
        return out, {"items": items, "item_codes": item_codes}

    def grads(self, cache: dict, g: np.ndarray) -> list[np.ndarray]:
        d = np.zeros_like(self.codebooks)
        item_codes = cache["item_codes"]
        for j in range(self.levels):
            np.add.at(d[j], item_codes[:, j], g)
        return [d]

    def trainable(self) -> list[np.ndarray]:
        return [self.codebooks]

    def set_trainable(self, tensors: list[np.ndarray]) -> None:
        (self.codebooks,) = _match(self.trainable(), tensors)

    def copy(self) -> "RqVaeAdapter":
        return RqVaeAdapter(self.codebooks.copy(), self.codes)


Adapter = FullAdapter | LoraAdapter | HashAdapter | RqVaeAdapter


def _match(current: list[np.ndarray], new: list[np.ndarray]) -> list[np.ndarray]:
    if len(current) != len(new):
        raise ValueError("tensor count mismatch")
    out = []
    for c, t in zip(current, new):
        t = np.asarray(t, dtype=c.dtype)
        if t.shape != c.shape:
            raise ValueError(f"tensor shape {t.shape} != expected {c.shape}")
        out.append(t)
    return out


def draw_hash_params(rng: np.random.Generator, h: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """h (a, b) pairs with a in [1, p), b in [0, p), a != b."""
    a = np.empty(h, dtype=np.int64)
    b = np.empty(h, dtype=np.int64)
    for j in range(h):
        while True:
            aj = int(rng.integers(1, p))
            bj = int(rng.integers(0, p))
            if aj != bj:
                a[j], b[j] = aj, bj
                break
    return a, b


def make_adapter(kind: str, n_items: int, k: int, streams: RngStream, *,
                 rank: int = 4, d_h: int = 512, n_hashes: int = 2, p: int = 4096,
                 senet: bool = False, expansion: int = 16,
                 levels: int = 4, d_r: int = 256, codes: np.ndarray | None = None,
                 init: str = "zero", dtype=np.float32) -> Adapter:
    """Construct a freshly initialized adapter.

    init="zero" zero-fills the shared hash table / codebooks so composition
    starts as an exact identity over the frozen base; init="base_distribution"
    uses the same small-uniform distribution as the full embedding instead.
    """
    if init not in ("zero", "base_distribution"):
        raise ValueError(f"unknown init {init!r}")
    maybe_zero = (lambda shape, rng: np.zeros(shape, dtype=dtype)) if init == "zero" \
        else (lambda shape, rng: init_uniform(rng, shape, dtype=dtype))

    if kind == "full":
        return FullAdapter(init_uniform(streams.generator("init_full"), (n_items, k), dtype=dtype))
    if kind == "lora":
        a = init_uniform(streams.generator("init_lora_a"), (n_items, rank), dtype=dtype)
        b = np.zeros((k, rank), dtype=dtype)
        return LoraAdapter(a, b)
    if kind == "hash":
        ha, hb = draw_hash_params(streams.generator("init_hash_fns"), n_hashes, p)
        table = maybe_zero((d_h, k), streams.generator("init_hash_table"))
        w1 = w2 = None
        if senet:
            h1 = expansion * n_hashes
            w1 = init_layer_weight(streams.generator("init_senet_w1"), h1, n_hashes, dtype)
            w2 = init_layer_weight(streams.generator("init_senet_w2"), n_hashes, h1, dtype)
        return HashAdapter(table, ha, hb, p, w1, w2)
    if kind == "rqvae":
        if codes is None:
            raise ValueError("rqvae adapter requires pre-trained semantic codes")
        codes = np.array(codes, dtype=np.int64)
        books = maybe_zero((levels, d_r, k), streams.generator("init_codebooks"))
        return RqVaeAdapter(books, codes)
    raise ValueError(f"unknown strategy kind {kind!r}")


def serialize_upload(adapter: Adapter) -> bytes:
    """Little-endian float32 bytes of all trainable parameters, in the fixed
    per-strategy tensor order."""
    parts = []
    for t in adapter.trainable():
        check_finite(t, "upload tensor")
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_upload(adapter: Adapter, payload: bytes) -> list[np.ndarray]:
    """Inverse of serialize_upload given the adapter's shapes."""
    tensors = []
    offset = 0
    for t in adapter.trainable():
        nbytes = t.size * 4
        if offset + nbytes > len(payload):
            raise ValueError("payload too short for adapter shapes")
        flat = np.frombuffer(payload, dtype="<f4", count=t.size, offset=offset)
        tensors.append(flat.reshape(t.shape).astype(t.dtype))
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"payload has {len(payload) - offset} trailing bytes")
    return tensors


def comm_cost(kind: str, n_items: int, k: int, *, rank: int = 4, d_h: int = 512,
              n_hashes: int = 2, senet: bool = False, expansion: int = 16,
              levels: int = 4, d_r: int = 256) -> int:
    """Exact upload bytes for one client under a strategy config."""
    if kind == "full":
        return n_items * k * 4
    if kind == "lora":
        return rank * (n_items + k) * 4
    if kind == "hash":
        cost = d_h * k * 4
        if senet:
            h1 = expansion * n_hashes
            cost += 2 * h1 * n_hashes * 4
        return cost
    if kind == "rqvae":
        return levels * d_r * k * 4
    raise ValueError(f"unknown strategy kind {kind!r}")


def representation_capacity(kind: str, n_items: int, *, d_h: int = 512,
                            n_hashes: int = 2, levels: int = 4, d_r: int = 256) -> int:
    """How many distinct item representations the strategy can express."""
    if kind in ("full", "lora"):
        return n_items
    if kind == "rqvae":
        return d_r ** levels
    if kind == "hash":
        return math.comb(d_h + n_hashes - 1, n_hashes)
    raise ValueError(f"unknown strategy kind {kind!r}")


# Checkpoint layout: magic FPEB, version u16, strategy tag u8, u32 dims,
# integer state (hash params / semantic codes), base table payload, then the
# adapter's trainable payload, all little-endian.

_MAGIC = b"FPEB"
_VERSION = 1
_TAGS = {"full": 0, "lora": 1, "hash": 2, "hash_senet": 3, "rqvae": 4}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


def _tag_of(adapter: Adapter) -> int:
    if isinstance(adapter, HashAdapter):
        return _TAGS["hash_senet"] if adapter.senet else _TAGS["hash"]
    return _TAGS[adapter.kind]


def save_checkpoint(path: str | Path, base: FullEmbeddingTable, adapter: Adapter) -> None:
    n, k = base.table.shape
    tag = _tag_of(adapter)
    out = [_MAGIC, struct.pack("<HB", _VERSION, tag), struct.pack("<II", n, k)]
    if isinstance(adapter, LoraAdapter):
        out.append(struct.pack("<I", adapter.rank))
    elif isinstance(adapter, HashAdapter):
        h1 = 0 if adapter.w1 is None else adapter.w1.shape[0]
        out.append(struct.pack("<IIII", adapter.d_h, adapter.n_hashes, adapter.p, h1))
        out.append(np.ascontiguousarray(adapter.hash_a, dtype="<u4").tobytes())
        out.append(np.ascontiguousarray(adapter.hash_b, dtype="<u4").tobytes())
    elif isinstance(adapter, RqVaeAdapter):
        out.append(struct.pack("<II", adapter.levels, adapter.d_r))
        out.append(np.ascontiguousarray(adapter.codes, dtype="<u4").tobytes())
    out.append(np.ascontiguousarray(base.table, dtype="<f4").tobytes())
    if not isinstance(adapter, FullAdapter):
        out.append(serialize_upload(adapter))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path) -> tuple[FullEmbeddingTable, Adapter]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError("not an embedding checkpoint (bad magic)")
    version, tag = struct.unpack_from("<HB", buf, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    name = _TAG_NAMES.get(tag)
    if name is None:
        raise ValueError(f"unknown strategy tag {tag}")
    off = 7
    n, k = struct.unpack_from("<II", buf, off)
    off += 8

    def take_f4(count: int, shape) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += count * 4
        return arr

    if name == "full":
        base = FullEmbeddingTable(take_f4(n * k, (n, k)))
        return base, FullAdapter(base.table)
    if name == "lora":
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        table = take_f4(n * k, (n, k))
        a = take_f4(n * rank, (n, rank))
        b = take_f4(k * rank, (k, rank))
        return FullEmbeddingTable(table), LoraAdapter(a, b)
    if name in ("hash", "hash_senet"):
        d_h, h, p, h1 = struct.unpack_from("<IIII", buf, off)
        off += 16
        ha = np.frombuffer(buf, dtype="<u4", count=h, offset=off).astype(np.int64)
        off += h * 4
        hb = np.frombuffer(buf, dtype="<u4", count=h, offset=off).astype(np.int64)
        off += h * 4
        table = take_f4(n * k, (n, k))
        htable = take_f4(d_h * k, (d_h, k))
        w1 = w2 = None
        if name == "hash_senet":
            w1 = take_f4(h1 * h, (h1, h))
            w2 = take_f4(h * h1, (h, h1))
        return FullEmbeddingTable(table), HashAdapter(htable, ha, hb, int(p), w1, w2)
    # rqvae
    levels, d_r = struct.unpack_from("<II", buf, off)
    off += 8
    codes = np.frombuffer(buf, dtype="<u4", count=n * levels, offset=off)
    codes = codes.reshape(n, levels).astype(np.int64)
    off += n * levels * 4
    table = take_f4(n * k, (n, k))
    books = take_f4(levels * d_r * k, (levels, d_r, k))
    return FullEmbeddingTable(table), RqVaeAdapter(books, codes)
