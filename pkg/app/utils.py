import hashlib
import re
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from app.errors import InputError

def human_readable_kib(size_bytes) -> str:
    """Bytes as KiB in the 2.05E+04 style of overhead tables."""
    try:
        size_bytes = int(size_bytes)
    except (TypeError, ValueError):
        return "Unknown"
    if size_bytes < 0:
        return "Unknown"
    return sci(size_bytes / 1024.0)

def sci(value) -> str:
    return f"{float(value):.2E}"

def percent(fraction: float) -> str:
    return f"{100.0 * fraction:.2e}%"

def logits_digest(logits: np.ndarray) -> str:
    data = np.ascontiguousarray(logits, dtype="<f4").tobytes()
    return hashlib.sha256(data).hexdigest()

def parse_tokens(text: str) -> np.ndarray:
    """One sequence per non-empty line; ids separated by commas or whitespace. '#' starts a comment."""
    rows: List[List[int]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([int(t) for t in re.split(r"[,\s]+", line) if t])
        except ValueError as e:
            raise InputError(f"line {lineno}: token ids must be integers") from e
    if not rows:
        raise InputError("token file holds no sequences")
    if len({len(r) for r in rows}) != 1:
        raise InputError("all sequences in a token file must have the same length")
    arr = np.asarray(rows, dtype=np.int64)
    return arr[0] if len(rows) == 1 else arr

def read_tokens(path) -> np.ndarray:
    return parse_tokens(Path(path).read_text(encoding="utf-8"))

def random_tokens(seed: int, count: int, seq_len: int, vocab: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, vocab, size=(count, seq_len), dtype=np.int64)

def parse_positions(text: str) -> List[int]:
    """'2,4,6' or '1-7'."""
    out: List[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        try:
            out.extend(range(int(m.group(1)), int(m.group(2)) + 1) if m else [int(part)])
        except ValueError as e:
            raise InputError(f"bad position {part!r}") from e
    if not out:
        raise InputError("no positions given")
    return out

def format_table(headers: Sequence[str], rows: Iterable[Sequence], widths: Optional[Sequence[int]] = None) -> str:
    rows = [[str(c) for c in r] for r in rows]
    if widths is None:
        widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(headers)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(headers)] + [line(r) for r in rows])
