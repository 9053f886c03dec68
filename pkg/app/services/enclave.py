"""
Simulated trusted world.

The enclave owns pi, pi_enc, the pad stream and the plain W_n of the
authorization layer. The untrusted side talks to it through exactly two calls:
encrypt_step (m -> m') and decrypt_authorize (n', y -> z pi). Every tensor that
crosses the boundary goes through the ledger.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, List, Optional, Tuple

import numpy as np

from app.config import PAD_BATCH
from app.errors import KeyMismatchError, PadExhaustedError, ProtocolError, SizeError
from app.services.linalg import DTYPE, layer_norm, matmul, permute_cols, permute_rows
from app.services.locking import LockedModel, LockKeys
from app.services.transformer import Model

logger = logging.getLogger(__name__)

BYTES_PER_ELEMENT = 4
PAD_LOW, PAD_HIGH = -1.0, 1.0

# tap(label, direction, tensor); the tensor is a private copy
Tap = Callable[[str, str, np.ndarray], None]


@dataclass(frozen=True)
class Crossing:
    label: str
    direction: str
    nbytes: int


@dataclass
class BoundaryLedger:
    rounds: int = 0
    bytes: int = 0
    tee_flops: int = 0
    crossings: List[Crossing] = field(default_factory=list)
    taps: List[Tap] = field(default_factory=list, repr=False)

    def cross(self, label: str, direction: str, tensor: np.ndarray) -> None:
        nbytes = int(tensor.size) * BYTES_PER_ELEMENT
        self.rounds += 1
        self.bytes += nbytes
        self.crossings.append(Crossing(label, direction, nbytes))
        logger.debug("boundary %s %s %s bytes", direction, label, nbytes)
        for tap in self.taps:
            tap(label, direction, np.array(tensor, copy=True))

    def add_flops(self, n: int) -> None:
        self.tee_flops += int(n)

    def add_tap(self, tap: Tap) -> None:
        self.taps.append(tap)

    def remove_tap(self, tap: Tap) -> None:
        self.taps.remove(tap)

    def reset(self) -> None:
        """Zero the counters; taps stay attached."""
        self.rounds = 0
        self.bytes = 0
        self.tee_flops = 0
        self.crossings = []

    def snapshot(self) -> "BoundaryLedger":
        return BoundaryLedger(
            rounds=self.rounds, bytes=self.bytes, tee_flops=self.tee_flops,
            crossings=list(self.crossings),
        )


def derive_pad_seed(seed: int) -> int:
    """Pad stream seed paired with a key seed; distinct from the two key streams."""
    return int(np.random.SeedSequence(seed).generate_state(3)[2])


class EnclaveState:
    """Single-owner: calls mutate the pad queue and the ledger and must be serial."""

    def __init__(self, keys: LockKeys, w_n: np.ndarray, gamma2: np.ndarray, beta2: np.ndarray,
                 seq_len: int, pad_seed: int, otp: bool = True,
                 ledger: Optional[BoundaryLedger] = None):
        d_ffn, d = w_n.shape
        if keys.pi.size != d or keys.pi_enc.size != d_ffn:
            raise KeyMismatchError(
                f"keys sized ({keys.pi.size}, {keys.pi_enc.size}) do not fit W_n of shape {w_n.shape}"
            )
        if gamma2.shape != (d,) or beta2.shape != (d,):
            raise SizeError("add-norm parameters must have length d_model")
        self._keys = keys
        self._w_n = np.array(w_n, dtype=DTYPE)
        self._auth_norm = (np.array(gamma2, dtype=DTYPE), np.array(beta2, dtype=DTYPE))
        self._pad_rng = np.random.default_rng(pad_seed)
        self._pads: Deque[Tuple[np.ndarray, np.ndarray]] = deque()
        self._in_flight: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self._otp = otp
        self.seq_len = seq_len
        self.d_model = d
        self.d_ffn = d_ffn
        self.ledger = ledger if ledger is not None else BoundaryLedger()
        if not otp:
            logger.warning("Enclave provisioned with one-time pads disabled (ablation build)")

    # ---------- provisioning ----------

    @classmethod
    def provision(cls, model: Model, keys: LockKeys, auth_position: int, pad_seed: int,
                  pad_count: int = PAD_BATCH, otp: bool = True) -> "EnclaveState":
        """Model-provider path: the plain authorization layer is at hand."""
        auth = model.layers[auth_position - 1]
        enclave = cls(keys, auth.w_n, auth.gamma2, auth.beta2, model.config.seq_len, pad_seed, otp)
        enclave.precompute_pads(pad_count)
        return enclave

    @classmethod
    def from_sealed(cls, locked: LockedModel, keys: LockKeys, pad_seed: int,
                    pad_count: int = PAD_BATCH, otp: bool = True) -> "EnclaveState":
        """Deployment path: W_n is recovered from the shipped W'_n with the sealed pi_enc."""
        block = locked.auth_block
        if keys.pi_enc.size != block.w_n_enc.shape[0] or keys.pi.size != locked.config.d_model:
            raise KeyMismatchError("sealed key does not match the locked model's dimensions")
        w_n = permute_rows(block.w_n_enc, keys.pi_enc.invert())
        enclave = cls(keys, w_n, block.gamma2, block.beta2, locked.config.seq_len, pad_seed, otp)
        enclave.precompute_pads(pad_count)
        return enclave

    # ---------- offline phase ----------

    @property
    def pads_available(self) -> int:
        return len(self._pads)

    @property
    def otp_enabled(self) -> bool:
        return self._otp

    def precompute_pads(self, count: int) -> None:
        if count < 0:
            raise SizeError("pad count must be >= 0")
        shape = (self.seq_len, self.d_ffn)
        for _ in range(count):
            if self._otp:
                p = self._pad_rng.uniform(PAD_LOW, PAD_HIGH, size=shape).astype(DTYPE)
            else:
                p = np.zeros(shape, dtype=DTYPE)
            self._pads.append((p, matmul(p, self._w_n)))
        if count:
            logger.info("Precomputed %s pads (%s queued)", count, len(self._pads))

    # ---------- online phase ----------

    def encrypt_step(self, m: np.ndarray) -> np.ndarray:
        if m.shape != (self.seq_len, self.d_ffn):
            raise SizeError(f"encrypt_step: feature shape {m.shape} != {(self.seq_len, self.d_ffn)}")
        if self._in_flight is not None:
            raise ProtocolError("a pad is already in flight; decrypt_authorize must run first")
        if not self._pads:
            raise PadExhaustedError("pad queue is empty; precompute pads before inference")
        self.ledger.cross("m", "in", m)
        self._in_flight = self._pads.popleft()
        p, _ = self._in_flight
        m_enc = permute_cols(m + p, self._keys.pi_enc)
        self.ledger.add_flops(2 * m.size)
        self.ledger.cross("m'", "out", m_enc)
        return m_enc

    def _remove_pad(self, n_prime: np.ndarray) -> np.ndarray:
        _, pwn = self._in_flight
        return n_prime - pwn

    def decrypt_authorize(self, n_prime: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self._in_flight is None:
            raise ProtocolError("decrypt_authorize called without a matching encrypt_step")
        expected = (self.seq_len, self.d_model)
        if n_prime.shape != expected or y.shape != expected:
            raise SizeError(f"decrypt_authorize: shapes {n_prime.shape}, {y.shape} != {expected}")
        self.ledger.cross("n'", "in", n_prime)
        self.ledger.cross("y", "in", y)
        n = self._remove_pad(n_prime)
        self._in_flight = None
        gamma2, beta2 = self._auth_norm
        z_pi = permute_cols(layer_norm(y + n, gamma2, beta2), self._keys.pi)
        # pad subtraction and output permutation; the add-norm exists in the plain model too
        self.ledger.add_flops(2 * n.size)
        self.ledger.cross("z'", "out", z_pi)
        return z_pi
