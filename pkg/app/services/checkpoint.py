"""
Binary artifacts: model checkpoints (CGRD), sealed keys (CGKY), traces (CGTR),
plus JSON reports and CSV tables.

All integers are little-endian fixed width; tensors are row-major '<f4'.
Byte layouts are documented in README.md.
"""
import csv
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import (
    CheckpointError, ConfigError, CoreGuardError, KeyFileError, KeyMismatchError,
)
from app.services.attacks import TraceSet
from app.services.linalg import DTYPE, PermutationKey
from app.services.locking import AUTH_TENSORS, AuthBlockPublic, LockedModel, LockKeys
from app.services.transformer import LAYER_TENSORS, Model, ModelConfig, TransformerLayerWeights

logger = logging.getLogger(__name__)

VERSION = 1
CHECKPOINT_MAGIC = b"CGRD"
KEY_MAGIC = b"CGKY"
TRACE_MAGIC = b"CGTR"

KIND_PLAIN = 0
KIND_LOCKED = 1

PREAMBLE = struct.Struct("<4sHH")       # magic, version, kind
CONFIG_BLOCK = struct.Struct("<IIIIIIBI")  # L, d, h, d_ffn, l, vocab, causal, L0
COUNT = struct.Struct("<I")
NAME_LEN = struct.Struct("<H")
RANK = struct.Struct("<B")
DIM = struct.Struct("<I")
SPAN = struct.Struct("<QQ")             # absolute offset, nbytes
KEY_HEADER = struct.Struct("<4sHII")    # magic, version, d, d_ffn
SEED = struct.Struct("<Q")

TRACE_CUTS = ("encrypt", "unit")

PathLike = Union[str, Path]


# ---------- tensor directory ----------

def _encode_directory(tensors: Dict[str, np.ndarray], start: int) -> bytes:
    """Directory entries followed by the payload; `start` is the absolute offset of the count field."""
    if not tensors:
        raise CheckpointError("refusing to write an empty tensor directory")
    entries = []
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        entries.append((raw, t.shape))
    dir_size = COUNT.size + sum(
        NAME_LEN.size + len(raw) + RANK.size + DIM.size * len(shape) + SPAN.size for raw, shape in entries
    )
    offset = start + dir_size
    head = [COUNT.pack(len(entries))]
    payload = []
    for (raw, shape), t in zip(entries, tensors.values()):
        data = np.ascontiguousarray(t, dtype="<f4").tobytes()
        head.append(NAME_LEN.pack(len(raw)) + raw + RANK.pack(len(shape)))
        head.extend(DIM.pack(n) for n in shape)
        head.append(SPAN.pack(offset, len(data)))
        payload.append(data)
        offset += len(data)
    return b"".join(head) + b"".join(payload)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated {self.what}: need {n} bytes", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct) -> tuple:
        return st.unpack(self.take(st.size))


def _decode_directory(r: _Reader) -> Dict[str, np.ndarray]:
    (count,) = r.unpack(COUNT)
    if count == 0:
        raise CheckpointError("empty tensor directory", offset=r.pos - COUNT.size)
    entries = []
    for _ in range(count):
        entry_at = r.pos
        (n,) = r.unpack(NAME_LEN)
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("tensor name is not utf-8", offset=entry_at) from e
        (rank,) = r.unpack(RANK)
        shape = tuple(r.unpack(DIM)[0] for _ in range(rank))
        offset, nbytes = r.unpack(SPAN)
        entries.append((name, shape, offset, nbytes, entry_at))

    payload_start = r.pos
    size = len(r.data)
    tensors: Dict[str, np.ndarray] = {}
    spans: List[Tuple[int, int]] = []
    for name, shape, offset, nbytes, entry_at in entries:
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}", offset=entry_at)
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"tensor {name!r}: {nbytes} bytes do not fit shape {shape}", offset=entry_at)
        if offset < payload_start or offset + nbytes > size:
            if offset + nbytes > size and offset >= payload_start:
                raise CheckpointError(f"truncated payload for tensor {name!r}", offset=size)
            raise CheckpointError(f"tensor {name!r} spans outside the payload", offset=entry_at)
        spans.append((offset, offset + nbytes))
        t = np.frombuffer(r.data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(DTYPE)
        if not np.all(np.isfinite(t)):
            raise CheckpointError(f"tensor {name!r} holds non-finite values", offset=offset)
        tensors[name] = t
    spans.sort()
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError("tensor payloads overlap", offset=b0)
    return tensors


def _read_preamble(r: _Reader, magic: bytes) -> int:
    got, version, kind = r.unpack(PREAMBLE)
    if got != magic:
        raise CheckpointError(f"bad magic {got!r}, expected {magic!r}", offset=0)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (this build reads {VERSION})", offset=4)
    return kind


# ---------- checkpoints ----------

def _layer_tensors(prefix: str, w: TransformerLayerWeights) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{name}": t for name, t in w.tensors().items()}


def _take_layer(tensors: Dict[str, np.ndarray], prefix: str) -> TransformerLayerWeights:
    try:
        return TransformerLayerWeights(**{name: tensors.pop(f"{prefix}.{name}") for name in LAYER_TENSORS})
    except KeyError as e:
        raise CheckpointError(f"missing tensor {e.args[0]}") from e


def save_checkpoint(path: PathLike, model: Union[Model, LockedModel]) -> None:
    cfg = model.config
    if isinstance(model, LockedModel):
        kind, l0 = KIND_LOCKED, model.auth_position
        tensors = {"embedding": model.embedding}
        for i, w in enumerate(model.front_layers):
            tensors.update(_layer_tensors(f"front.{i}", w))
        tensors.update({f"auth.{name}": t for name, t in model.auth_block.tensors().items()})
        for i, w in enumerate(model.rear_layers):
            tensors.update(_layer_tensors(f"rear.{l0 + i}", w))
    else:
        kind, l0 = KIND_PLAIN, cfg.auth_position or 0
        tensors = {"embedding": model.embedding}
        for i, w in enumerate(model.layers):
            tensors.update(_layer_tensors(f"layers.{i}", w))
    tensors["output_head"] = model.output_head

    head = PREAMBLE.pack(CHECKPOINT_MAGIC, VERSION, kind) + CONFIG_BLOCK.pack(
        cfg.num_layers, cfg.d_model, cfg.num_heads, cfg.d_ffn, cfg.seq_len, cfg.vocab_size,
        1 if cfg.causal else 0, l0,
    )
    Path(path).write_bytes(head + _encode_directory(tensors, len(head)))
    logger.info("Wrote %s checkpoint %s (%s tensors)", "locked" if kind else "plain", path, len(tensors))


def load_checkpoint(path: PathLike) -> Union[Model, LockedModel]:
    r = _Reader(Path(path).read_bytes(), "checkpoint")
    kind = _read_preamble(r, CHECKPOINT_MAGIC)
    if kind not in (KIND_PLAIN, KIND_LOCKED):
        raise CheckpointError(f"unknown checkpoint kind {kind}", offset=6)
    block_at = r.pos
    L, d, h, d_ffn, l, vocab, causal, l0 = r.unpack(CONFIG_BLOCK)
    if causal not in (0, 1):
        raise CheckpointError(f"causal flag must be 0 or 1, got {causal}", offset=block_at + 24)
    tensors = _decode_directory(r)
    try:
        cfg = ModelConfig(
            num_layers=L, d_model=d, num_heads=h, d_ffn=d_ffn, seq_len=l, vocab_size=vocab,
            causal=bool(causal), auth_position=l0 or None,
        )
        if kind == KIND_PLAIN:
            layers = tuple(_take_layer(tensors, f"layers.{i}") for i in range(L))
            model = Model(config=cfg, embedding=tensors.pop("embedding"), layers=layers,
                          output_head=tensors.pop("output_head"))
        else:
            if not l0:
                raise CheckpointError("locked checkpoint without an auth position", offset=block_at + 25)
            front = tuple(_take_layer(tensors, f"front.{i}") for i in range(l0 - 1))
            auth = AuthBlockPublic(**{name: tensors.pop(f"auth.{name}") for name in AUTH_TENSORS})
            rear = tuple(_take_layer(tensors, f"rear.{i}") for i in range(l0, L))
            model = LockedModel(config=cfg, embedding=tensors.pop("embedding"), front_layers=front,
                                auth_block=auth, rear_layers=rear, output_head=tensors.pop("output_head"))
    except KeyError as e:
        raise CheckpointError(f"missing tensor {e.args[0]}") from e
    except CheckpointError:
        raise
    except CoreGuardError as e:
        raise CheckpointError(f"inconsistent checkpoint: {e}") from e
    if tensors:
        raise CheckpointError(f"unexpected tensors: {sorted(tensors)[:4]}")
    logger.info("Loaded %s checkpoint %s", "locked" if kind else "plain", path)
    return model


# ---------- sealed keys ----------

def save_key(path: PathLike, keys: LockKeys, pad_seed: int) -> None:
    if not 0 <= pad_seed < 2 ** 64:
        raise KeyFileError("pad seed must fit in 64 unsigned bits")
    blob = b"".join((
        KEY_HEADER.pack(KEY_MAGIC, VERSION, keys.d_model, keys.d_ffn),
        keys.pi.forward.astype("<u4").tobytes(),
        keys.pi_enc.forward.astype("<u4").tobytes(),
        SEED.pack(pad_seed),
    ))
    Path(path).write_bytes(blob)
    logger.info("Sealed key written to %s", path)


def load_key(path: PathLike) -> Tuple[LockKeys, int]:
    data = Path(path).read_bytes()
    if len(data) < KEY_HEADER.size:
        raise KeyFileError(f"truncated key file ({len(data)} bytes)")
    magic, version, d, d_ffn = KEY_HEADER.unpack_from(data)
    if magic != KEY_MAGIC:
        raise KeyFileError(f"bad key magic {magic!r}")
    if version != VERSION:
        raise KeyFileError(f"unsupported key version {version}")
    expected = KEY_HEADER.size + 4 * (d + d_ffn) + SEED.size
    if len(data) != expected:
        raise KeyFileError(f"key file is {len(data)} bytes, header implies {expected}")
    pi = np.frombuffer(data, dtype="<u4", count=d, offset=KEY_HEADER.size)
    pi_enc = np.frombuffer(data, dtype="<u4", count=d_ffn, offset=KEY_HEADER.size + 4 * d)
    (pad_seed,) = SEED.unpack_from(data, expected - SEED.size)
    try:
        keys = LockKeys(pi=PermutationKey.from_forward(pi), pi_enc=PermutationKey.from_forward(pi_enc))
    except CoreGuardError as e:
        raise KeyFileError(f"sealed key rejected: {e}") from e
    return keys, int(pad_seed)


def load_pair(checkpoint_path: PathLike, key_path: PathLike):
    """Checkpoint plus its sealed key, cross-checked for dimensions."""
    model = load_checkpoint(checkpoint_path)
    keys, pad_seed = load_key(key_path)
    cfg = model.config
    if keys.d_model != cfg.d_model or keys.d_ffn != cfg.d_ffn:
        raise KeyMismatchError(
            f"key sized d={keys.d_model}, d_ffn={keys.d_ffn} does not match checkpoint "
            f"d={cfg.d_model}, d_ffn={cfg.d_ffn}"
        )
    return model, keys, pad_seed


def check_key_separation(checkpoint_path: PathLike, key_path: PathLike) -> None:
    """Sealed keys never share a path or a directory with a checkpoint."""
    ckpt = Path(checkpoint_path).resolve()
    key = Path(key_path).resolve()
    if ckpt == key:
        raise KeyFileError("key output path equals the checkpoint path")
    if ckpt.parent == key.parent:
        raise KeyFileError(f"key output must not be written next to the checkpoint ({ckpt.parent})")


# ---------- traces ----------

def save_traces(path: PathLike, traces: TraceSet) -> None:
    head = PREAMBLE.pack(TRACE_MAGIC, VERSION, TRACE_CUTS.index(traces.cut))
    body = _encode_directory({"inputs": traces.inputs, "outputs": traces.outputs}, len(head))
    Path(path).write_bytes(head + body)


def load_traces(path: PathLike) -> TraceSet:
    r = _Reader(Path(path).read_bytes(), "trace file")
    cut = _read_preamble(r, TRACE_MAGIC)
    if cut >= len(TRACE_CUTS):
        raise CheckpointError(f"unknown trace cut {cut}", offset=6)
    tensors = _decode_directory(r)
    try:
        return TraceSet(tensors["inputs"], tensors["outputs"], TRACE_CUTS[cut])
    except KeyError as e:
        raise CheckpointError(f"missing tensor {e.args[0]}") from e
    except CoreGuardError as e:
        raise CheckpointError(f"inconsistent trace file: {e}") from e


# ---------- reports ----------

def save_report(path: PathLike, fmt: str, document: dict) -> None:
    doc = {"format": fmt, "version": VERSION}
    doc.update(document)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    logger.info("Report written to %s", path)


def load_report(path: PathLike, fmt: Optional[str] = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"report is not JSON: {e.msg}", offset=e.pos) from e
    if not isinstance(doc, dict) or "format" not in doc or "version" not in doc:
        raise CheckpointError("report carries no format/version header")
    if doc["version"] != VERSION or (fmt is not None and doc["format"] != fmt):
        raise CheckpointError(f"unexpected report {doc['format']!r} v{doc['version']}")
    return doc


def save_table(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence], seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    logger.info("Table written to %s", path)


def load_model_config(path: PathLike) -> ModelConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e.msg})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return ModelConfig.from_dict(data)


def load_bench_configs(path: PathLike) -> Dict[str, ModelConfig]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e.msg})") from e
    models = data.get("models") if isinstance(data, dict) else None
    if not isinstance(models, dict) or not models:
        raise ConfigError(f"{path}: expected {{\"models\": {{name: config}}}}")
    return {name: ModelConfig.from_dict(cfg) for name, cfg in models.items()}
