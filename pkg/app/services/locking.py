"""
Model locking.

Protection protocol: input-processing weights are row-permuted (pi^T W) so
they only compute correctly on column-permuted inputs x pi. Propagation
protocol: output-processing weights and the add-norm affines are
column-permuted (W pi) so every locked layer emits z pi, which is exactly the
authorized input of the next locked layer. A single enclave authorization at
layer L0 - 1 therefore unlocks every layer >= L0.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.errors import LockError, SizeError, VerificationError
from app.services.linalg import (
    DTYPE, PermutationKey, permute_cols, permute_rows, random_permutation, relative_error,
)
from app.services.transformer import (
    Model, ModelConfig, TransformerLayerWeights, layer_shapes, layer_trace, matmul,
)

logger = logging.getLogger(__name__)

VERIFY_TOLERANCE = 1e-4

AUTH_TENSORS = (
    "w_q", "w_k", "w_v", "w_o", "gamma1", "beta1",
    "w_m", "b_m", "w_n_enc", "b_n", "gamma2", "beta2",
)

# line label, trace field, whether the locked value carries pi
EQUIVALENCE_LINES = (
    ("Q'", "q", False),
    ("K'", "k", False),
    ("V'", "v", False),
    ("o'", "o", True),
    ("y'", "y", True),
    ("m'", "m", False),
    ("n'", "n", True),
    ("z'", "z", True),
)


@dataclass(frozen=True)
class LockKeys:
    pi: PermutationKey
    pi_enc: PermutationKey

    @property
    def d_model(self) -> int:
        return self.pi.size

    @property
    def d_ffn(self) -> int:
        return self.pi_enc.size

    def inverted(self) -> "LockKeys":
        return LockKeys(pi=self.pi.invert(), pi_enc=self.pi_enc.invert())

    @classmethod
    def identity(cls, d_model: int, d_ffn: int) -> "LockKeys":
        return cls(pi=PermutationKey.identity(d_model), pi_enc=PermutationKey.identity(d_ffn))


def generate_keys(cfg: ModelConfig, seed: int) -> LockKeys:
    """Independent pi (size d) and pi_enc (size d_ffn) from one seed."""
    pi_seed, enc_seed = np.random.SeedSequence(seed).generate_state(2)
    return LockKeys(
        pi=random_permutation(int(pi_seed), cfg.d_model),
        pi_enc=random_permutation(int(enc_seed), cfg.d_ffn),
    )


@dataclass(frozen=True)
class AuthBlockPublic:
    """Layer L0 - 1 as shipped: attention sublayer, W_m/b_m, W'_n = pi_enc^T W_n, b_n, add-norm affine."""
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    w_m: np.ndarray
    b_m: np.ndarray
    w_n_enc: np.ndarray
    b_n: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in AUTH_TENSORS}

    def attention_weights(self) -> TransformerLayerWeights:
        """The block viewed as a layer whose FFN output linear is the encrypted-path W'_n."""
        return TransformerLayerWeights(
            w_q=self.w_q, w_k=self.w_k, w_v=self.w_v, w_o=self.w_o,
            gamma1=self.gamma1, beta1=self.beta1, w_m=self.w_m, b_m=self.b_m,
            w_n=self.w_n_enc, b_n=self.b_n, gamma2=self.gamma2, beta2=self.beta2,
        )


def auth_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = dict(layer_shapes(cfg))
    shapes["w_n_enc"] = shapes.pop("w_n")
    return {name: shapes[name] for name in AUTH_TENSORS}


@dataclass(frozen=True)
class LockedModel:
    config: ModelConfig
    embedding: np.ndarray
    front_layers: Tuple[TransformerLayerWeights, ...]
    auth_block: AuthBlockPublic
    rear_layers: Tuple[TransformerLayerWeights, ...]
    output_head: np.ndarray

    def __post_init__(self):
        cfg = self.config
        l0 = cfg.auth_position
        if l0 is None:
            raise LockError("locked model config must carry its auth_position")
        if len(self.front_layers) != l0 - 1 or len(self.rear_layers) != cfg.num_layers - l0:
            raise LockError(
                f"layer split {len(self.front_layers)}/1/{len(self.rear_layers)} "
                f"does not match L={cfg.num_layers}, L0={l0}"
            )
        object.__setattr__(self, "front_layers", tuple(self.front_layers))
        object.__setattr__(self, "rear_layers", tuple(self.rear_layers))
        for i, w in enumerate(self.front_layers):
            w.validate(cfg, where=f"front.{i}")
        for i, w in enumerate(self.rear_layers):
            w.validate(cfg, where=f"rear.{l0 + i}")
        for name, shape in auth_shapes(cfg).items():
            t = getattr(self.auth_block, name)
            if t.shape != shape:
                raise SizeError(f"auth.{name}: shape {t.shape} != expected {shape}")
        if self.embedding.shape != (cfg.vocab_size, cfg.d_model):
            raise SizeError(f"embedding shape {self.embedding.shape} is wrong")
        if self.output_head.shape != (cfg.d_model, cfg.vocab_size):
            raise SizeError(f"output_head shape {self.output_head.shape} is wrong")

    @property
    def auth_position(self) -> int:
        return self.config.auth_position


# ---------- locking ----------

def lock_layer(w: TransformerLayerWeights, pi: PermutationKey) -> TransformerLayerWeights:
    d = w.w_q.shape[0]
    if pi.size != d:
        raise LockError(f"key size {pi.size} != d_model {d}")
    return TransformerLayerWeights(
        # protection
        w_q=permute_rows(w.w_q, pi),
        w_k=permute_rows(w.w_k, pi),
        w_v=permute_rows(w.w_v, pi),
        w_m=permute_rows(w.w_m, pi),
        b_m=w.b_m,
        # propagation
        w_o=permute_cols(w.w_o, pi),
        gamma1=permute_cols(w.gamma1, pi),
        beta1=permute_cols(w.beta1, pi),
        w_n=permute_cols(w.w_n, pi),
        b_n=permute_cols(w.b_n, pi),
        gamma2=permute_cols(w.gamma2, pi),
        beta2=permute_cols(w.beta2, pi),
    )


def _check_keys(cfg: ModelConfig, keys: LockKeys) -> None:
    if keys.pi.size != cfg.d_model:
        raise LockError(f"pi has size {keys.pi.size}, model d_model is {cfg.d_model}")
    if keys.pi_enc.size != cfg.d_ffn:
        raise LockError(f"pi_enc has size {keys.pi_enc.size}, model d_ffn is {cfg.d_ffn}")


def lock_model(m: Model, keys: LockKeys, auth_position: Optional[int] = None) -> LockedModel:
    cfg = m.config
    l0 = auth_position if auth_position is not None else cfg.resolved_auth_position()
    if not 1 <= l0 <= cfg.num_layers - 1:
        raise LockError(f"auth position {l0} outside [1, {cfg.num_layers - 1}]")
    _check_keys(cfg, keys)

    auth = m.layers[l0 - 1]
    block = AuthBlockPublic(
        w_q=auth.w_q, w_k=auth.w_k, w_v=auth.w_v, w_o=auth.w_o,
        gamma1=auth.gamma1, beta1=auth.beta1, w_m=auth.w_m, b_m=auth.b_m,
        w_n_enc=permute_rows(auth.w_n, keys.pi_enc), b_n=auth.b_n,
        gamma2=auth.gamma2, beta2=auth.beta2,
    )
    locked = LockedModel(
        config=replace(cfg, auth_position=l0),
        embedding=m.embedding,
        front_layers=m.layers[: l0 - 1],
        auth_block=block,
        rear_layers=tuple(lock_layer(w, keys.pi) for w in m.layers[l0:]),
        output_head=permute_rows(m.output_head, keys.pi),
    )
    logger.info(
        "Locked model at L0=%s: %s rear layers permuted, %.2f%% of parameters",
        l0, cfg.num_layers - l0, 100.0 * locked_fraction(cfg, l0),
    )
    return locked


def permuted_parameter_count(cfg: ModelConfig, auth_position: int) -> int:
    return (cfg.num_layers - auth_position) * cfg.layer_parameter_count() + cfg.d_model * cfg.vocab_size


def locked_fraction(cfg: ModelConfig, auth_position: int) -> float:
    return permuted_parameter_count(cfg, auth_position) / cfg.parameter_count()


def original_auth_weights(locked: LockedModel, keys: LockKeys) -> np.ndarray:
    """Recovers the plain W_n of layer L0 - 1 from the shipped W'_n; needs pi_enc."""
    return permute_rows(locked.auth_block.w_n_enc, keys.pi_enc.invert())


# ---------- verification ----------

@dataclass(frozen=True)
class VerificationLine:
    layer: str
    line: str
    error: float
    ok: bool


@dataclass
class VerificationReport:
    lines: List[VerificationLine]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(line.ok for line in self.lines)

    def max_errors(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for line in self.lines:
            out[line.line] = max(out.get(line.line, 0.0), line.error)
        return out

    def first_failure(self) -> Optional[VerificationLine]:
        return next((line for line in self.lines if not line.ok), None)


def verify_lock(original: Model, locked: LockedModel, keys: LockKeys,
                probes: int = 2, seed: int = 0, tolerance: float = VERIFY_TOLERANCE,
                raise_on_failure: bool = True) -> VerificationReport:
    cfg = original.config
    if locked.config.d_model != cfg.d_model or locked.config.num_layers != cfg.num_layers:
        raise SizeError("original and locked model shapes differ")
    _check_keys(cfg, keys)
    l0 = locked.auth_position
    pi = keys.pi
    rng = np.random.default_rng(seed)
    lines: List[VerificationLine] = []

    def record(layer: str, line: str, error: float, ok: Optional[bool] = None):
        lines.append(VerificationLine(layer, line, error, error <= tolerance if ok is None else ok))

    for i, w in enumerate(locked.front_layers):
        same = all(np.array_equal(a, b) for a, b in zip(w.tensors().values(), original.layers[i].tensors().values()))
        record(f"front.{i}", "bitwise", 0.0 if same else float("inf"), same)

    auth = original.layers[l0 - 1]
    record(f"auth.{l0 - 1}", "W'_n", relative_error(locked.auth_block.w_n_enc, permute_rows(auth.w_n, keys.pi_enc)))

    x = rng.normal(size=(probes, cfg.seq_len, cfg.d_model)).astype(DTYPE)
    for offset, w_locked in enumerate(locked.rear_layers):
        idx = l0 + offset
        plain = layer_trace(original.layers[idx], x, cfg, idx)
        permuted = layer_trace(w_locked, permute_cols(x, pi), cfg, idx)
        for label, name, carries_pi in EQUIVALENCE_LINES:
            expected = getattr(plain, name)
            if carries_pi:
                expected = permute_cols(expected, pi)
            record(f"rear.{idx}", label, relative_error(getattr(permuted, name), expected))

    z = rng.normal(size=(probes, cfg.seq_len, cfg.d_model)).astype(DTYPE)
    record("head", "logits", relative_error(matmul(permute_cols(z, pi), locked.output_head),
                                            matmul(z, original.output_head)))

    report = VerificationReport(lines=lines, tolerance=tolerance)
    failure = report.first_failure()
    if failure is not None:
        logger.warning("Lock verification failed at %s %s (%.3e)", failure.layer, failure.line, failure.error)
        if raise_on_failure:
            raise VerificationError(failure.layer, failure.line, failure.error, report)
    return report
