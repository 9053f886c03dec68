"""
Partitioned inference and overhead accounting.

The untrusted side runs every matmul; the enclave runs the authorization
once per sequence. The overhead models
are closed forms for CoreGuard and the baseline schemes it is compared with.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.config import MEASURE_LIMIT, SOTER_SEEDS, THREADS
from app.errors import ConfigError
from app.services.enclave import BYTES_PER_ELEMENT, BoundaryLedger, EnclaveState, derive_pad_seed
from app.services.linalg import add_bias, matmul
from app.services.locking import AuthBlockPublic, LockedModel, generate_keys, lock_model
from app.services.transformer import (
    ModelConfig, attention_block, check_tokens, count_flops, embed, ffn_input, init_model,
    layer_forward, run_layers,
)

logger = logging.getLogger(__name__)

SCHEMES = ("noshield", "blackbox", "coreguard", "dte", "serdab", "darknetz", "soter", "shadownet", "tlg")

SCHEME_PARAMS = {
    "dte": {"auth_position": int},
    "soter": {"fraction": float, "seed": int},
}

SOTER_FRACTION = 0.20

# ShadowNet offloads seven linear layers per block: q, k, v, o and a gated FFN's three projections
SHADOWNET_LINEAR_LAYERS = 7


# ---------- partitioned inference ----------

def encrypted_linear(block: AuthBlockPublic, m_prime: np.ndarray) -> np.ndarray:
    """The only work done on m' outside the enclave; affine, so the pad returns as p W_n."""
    return add_bias(matmul(m_prime, block.w_n_enc), block.b_n)


def _authorize_sequence(locked: LockedModel, e: EnclaveState, x: np.ndarray) -> np.ndarray:
    cfg = locked.config
    l0 = locked.auth_position
    block = locked.auth_block
    x = run_layers(locked.front_layers, x, cfg, offset=0)
    _, _, _, _, y = attention_block(block.attention_weights(), x, cfg, layer_index=l0 - 1)
    m = ffn_input(block.w_m, block.b_m, y)
    n_prime = encrypted_linear(block, e.encrypt_step(m))
    z_pi = e.decrypt_authorize(n_prime, y)
    return run_layers(locked.rear_layers, z_pi, cfg, offset=l0)


def run_authorized(locked: LockedModel, e: EnclaveState, tokens) -> Tuple[np.ndarray, BoundaryLedger]:
    """
    Logits of the locked model with one enclave authorization per sequence.
    A 2-D batch is authorized sequence by sequence; the returned ledger covers the whole call.
    """
    toks = check_tokens(tokens, locked.config)
    e.ledger.reset()
    x = embed(locked.embedding, toks)
    if toks.ndim == 1:
        h = _authorize_sequence(locked, e, x)
    else:
        h = np.stack([_authorize_sequence(locked, e, row) for row in x])
    return matmul(h, locked.output_head), e.ledger.snapshot()


def run_unauthorized(locked: LockedModel, tokens) -> np.ndarray:
    """Plain forward through the shipped weights; rear layers see un-permuted features."""
    cfg = locked.config
    toks = check_tokens(tokens, cfg)
    l0 = locked.auth_position
    logger.warning("Running locked model without authorization; logits will be scrambled")
    x = run_layers(locked.front_layers, embed(locked.embedding, toks), cfg)
    x = layer_forward(locked.auth_block.attention_weights(), x, cfg, layer_index=l0 - 1)
    x = run_layers(locked.rear_layers, x, cfg, offset=l0)
    return matmul(x, locked.output_head)


# ---------- schemes ----------

@dataclass(frozen=True)
class SchemeDescriptor:
    name: str
    params: Tuple[Tuple[str, object], ...] = ()

    def __post_init__(self):
        if self.name not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.name!r}; expected one of {', '.join(SCHEMES)}")
        allowed = SCHEME_PARAMS.get(self.name, {})
        for key, value in self.params:
            if key not in allowed:
                raise ConfigError(f"scheme {self.name} takes no parameter {key!r}")
        p = dict(self.params)
        if "fraction" in p and not 0.0 < p["fraction"] <= 1.0:
            raise ConfigError(f"soter fraction must be in (0, 1], got {p['fraction']}")
        if "auth_position" in p and p["auth_position"] < 1:
            raise ConfigError("dte auth_position must be >= 1")

    def param(self, key: str, default=None):
        return dict(self.params).get(key, default)

    @property
    def label(self) -> str:
        if not self.params:
            return self.name
        return self.name + ":" + ",".join(f"{k}={v}" for k, v in self.params)

    @classmethod
    def parse(cls, text: str) -> "SchemeDescriptor":
        """'coreguard', 'soter:fraction=0.2,seed=3', 'dte:auth_position=4'."""
        name, _, rest = text.strip().partition(":")
        name = name.strip().lower()
        casts = SCHEME_PARAMS.get(name, {})
        params = []
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, sep, raw = item.partition("=")
            key = key.strip()
            if not sep or key not in casts:
                raise ConfigError(f"bad scheme parameter {item!r} for {name}")
            try:
                params.append((key, casts[key](raw.strip())))
            except ValueError as e:
                raise ConfigError(f"bad value for {name}.{key}: {raw!r}") from e
        return cls(name=name, params=tuple(params))


def parse_schemes(text: str) -> List[SchemeDescriptor]:
    """Semicolon- or space-separated list; a bare comma list works when no scheme has parameters."""
    text = text.strip()
    if not text:
        return []
    if ";" in text or ":" in text:
        parts = [p for p in text.replace(" ", ";").split(";") if p.strip()]
    else:
        parts = [p for p in text.replace(" ", ",").split(",") if p.strip()]
    return [SchemeDescriptor.parse(p) for p in parts]


# ---------- overhead models ----------

@dataclass
class OverheadReport:
    model: str
    scheme: str
    tee_flops: int
    tee_flops_fraction: float
    transfer_bytes: int
    transfer_rounds: int
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def transfer_kib(self) -> float:
        return self.transfer_bytes / 1024.0

    def to_dict(self) -> dict:
        out = {
            "tee_flops": self.tee_flops,
            "tee_flops_fraction": self.tee_flops_fraction,
            "transfer_bytes": self.transfer_bytes,
            "transfer_kib": self.transfer_kib,
            "transfer_rounds": self.transfer_rounds,
        }
        out.update(self.extra)
        return out


def coreguard_tee_flops(cfg: ModelConfig) -> int:
    return cfg.seq_len * (2 * cfg.d_ffn + 2 * cfg.d_model)


def coreguard_bytes(cfg: ModelConfig) -> int:
    return BYTES_PER_ELEMENT * cfg.seq_len * (2 * cfg.d_ffn + 3 * cfg.d_model)


def soter_layers(num_layers: int, fraction: float, seed: int) -> List[int]:
    k = max(1, int(round(fraction * num_layers)))
    if fraction * num_layers < 0.5:
        logger.warning("SOTER fraction %.2f of %s layers rounds to zero; enclosing one layer", fraction, num_layers)
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(num_layers, size=min(k, num_layers), replace=False))


def contiguous_segments(indices: Sequence[int]) -> int:
    if not indices:
        return 0
    return 1 + sum(1 for a, b in zip(indices, indices[1:]) if b != a + 1)


def _feature_bytes(cfg: ModelConfig) -> int:
    return BYTES_PER_ELEMENT * cfg.seq_len * cfg.d_model


def estimate_overhead(scheme: SchemeDescriptor, cfg: ModelConfig, model_name: str = "model") -> OverheadReport:
    fl = count_flops(cfg)
    l, d, f, L, p = cfg.seq_len, cfg.d_model, cfg.d_ffn, cfg.num_layers, cfg.ffn_projections
    extra: Dict[str, float] = {}
    name = scheme.name

    if name == "noshield":
        tee, rounds, nbytes = 0, 0, 0
    elif name == "blackbox":
        # token ids in, token ids out
        tee, rounds, nbytes = fl.total, 2, 2 * BYTES_PER_ELEMENT * l
    elif name == "coreguard":
        tee, rounds, nbytes = coreguard_tee_flops(cfg), 5, coreguard_bytes(cfg)
    elif name == "dte":
        l0 = scheme.param("auth_position", cfg.resolved_auth_position())
        if l0 > L:
            raise ConfigError(f"dte auth_position {l0} exceeds {L} layers")
        tee, rounds, nbytes = (L - l0) * fl.per_layer, 2, 2 * _feature_bytes(cfg)
    elif name == "serdab":
        tee, rounds, nbytes = fl.per_layer, 2, 2 * _feature_bytes(cfg)
    elif name == "darknetz":
        # feature in, token ids out
        tee, rounds, nbytes = fl.per_layer + fl.head, 2, _feature_bytes(cfg) + BYTES_PER_ELEMENT * l
    elif name == "soter":
        fraction = scheme.param("fraction", SOTER_FRACTION)
        chosen = soter_layers(L, fraction, scheme.param("seed", 0))
        segments = contiguous_segments(chosen)
        tee, rounds, nbytes = len(chosen) * fl.per_layer, 2 * segments, segments * 2 * _feature_bytes(cfg)
        extra["soter_layers"] = len(chosen)
        extra["soter_segments"] = segments
    elif name == "shadownet":
        # q, k, v, o are d->d; the FFN has p-1 projections d->d_ffn and one d_ffn->d
        fan_sum = 4 * 2 * d + (p - 1) * (d + f) + (f + d)
        outputs = 4 * d + (p - 1) * f + d
        tee = L * (fl.attention + fl.elementwise + l * outputs)
        rounds = 2 * SHADOWNET_LINEAR_LAYERS * L
        nbytes = L * BYTES_PER_ELEMENT * l * fan_sum
        extra["linear_layers_per_block"] = SHADOWNET_LINEAR_LAYERS
    elif name == "tlg":
        tee = L * coreguard_tee_flops(cfg)
        rounds = 5 * (L - 1)
        nbytes = (L - 1) * coreguard_bytes(cfg)
    else:
        raise ConfigError(f"unknown scheme {name!r}")

    return OverheadReport(
        model=model_name, scheme=scheme.label, tee_flops=int(tee),
        tee_flops_fraction=tee / fl.total, transfer_bytes=int(nbytes),
        transfer_rounds=int(rounds), extra=extra,
    )


def soter_statistics(cfg: ModelConfig, fraction: float = SOTER_FRACTION, seed: int = 0,
                     seeds: int = SOTER_SEEDS) -> Dict[str, float]:
    """Mean and sample sd of SOTER's rounds/bytes/FLOPs over consecutive seeds."""
    reports = [
        estimate_overhead(SchemeDescriptor("soter", (("fraction", fraction), ("seed", seed + i))), cfg)
        for i in range(seeds)
    ]
    out: Dict[str, float] = {"soter_seeds": seeds}
    for key, values in (
        ("rounds", [r.transfer_rounds for r in reports]),
        ("bytes", [r.transfer_bytes for r in reports]),
        ("tee_flops", [r.tee_flops for r in reports]),
    ):
        arr = np.asarray(values, dtype=np.float64)
        out[f"{key}_mean"] = float(arr.mean())
        out[f"{key}_sd"] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return out


# ---------- live measurement ----------

@dataclass
class Measurement:
    measured_on: str
    config: ModelConfig
    rounds: int
    bytes: int
    tee_flops: int
    expected_rounds: int
    expected_bytes: int
    expected_tee_flops: int

    @property
    def matches(self) -> bool:
        return (self.rounds, self.bytes, self.tee_flops) == (
            self.expected_rounds, self.expected_bytes, self.expected_tee_flops
        )

    def to_dict(self) -> dict:
        return {
            "measured_on": self.measured_on,
            "rounds": self.rounds,
            "bytes": self.bytes,
            "tee_flops": self.tee_flops,
            "matches_closed_form": self.matches,
        }


def downscaled(cfg: ModelConfig) -> ModelConfig:
    """Small sibling with the same d_ffn/d ratio class, runnable by the forward engine."""
    d = 16
    ratio = max(1, int(round(cfg.d_ffn / cfg.d_model)))
    return ModelConfig(
        num_layers=2, d_model=d, num_heads=2 if cfg.num_heads > 1 else 1, d_ffn=d * ratio,
        seq_len=min(cfg.seq_len, 16), vocab_size=min(cfg.vocab_size, 64), causal=cfg.causal,
        auth_position=1,
    )


def measure_coreguard(name: str, cfg: ModelConfig, seed: int,
                      measure_limit: int = MEASURE_LIMIT) -> Measurement:
    if cfg.parameter_count() <= measure_limit and cfg.num_layers >= 2:
        live, measured_on = cfg.with_overrides(ffn_projections=2), name
    else:
        live = downscaled(cfg)
        measured_on = f"{name}-downscaled(L={live.num_layers},d={live.d_model},d_ffn={live.d_ffn},l={live.seq_len})"
        logger.warning("Config %s too large for a live ledger; measuring %s", name, measured_on)
    model = init_model(live, seed)
    keys = generate_keys(live, seed)
    l0 = live.resolved_auth_position()
    locked = lock_model(model, keys, l0)
    enclave = EnclaveState.provision(model, keys, l0, derive_pad_seed(seed), pad_count=1)
    tokens = np.random.default_rng(seed).integers(0, live.vocab_size, size=live.seq_len)
    _, ledger = run_authorized(locked, enclave, tokens)
    expected = estimate_overhead(SchemeDescriptor("coreguard"), live)
    return Measurement(
        measured_on=measured_on, config=live, rounds=ledger.rounds, bytes=ledger.bytes,
        tee_flops=ledger.tee_flops, expected_rounds=expected.transfer_rounds,
        expected_bytes=expected.transfer_bytes, expected_tee_flops=expected.tee_flops,
    )


# ---------- bench ----------

@dataclass
class BenchReport:
    seed: int
    configs: Dict[str, ModelConfig]
    rows: List[OverheadReport]
    measurements: Dict[str, Measurement]

    COLUMNS = ("model", "scheme", "tee_flops", "fraction", "bytes", "rounds")

    def table_rows(self) -> List[Tuple]:
        return [
            (r.model, r.scheme, r.tee_flops, r.tee_flops_fraction, r.transfer_bytes, r.transfer_rounds)
            for r in self.rows
        ]

    def to_document(self) -> dict:
        models = {}
        for name, cfg in self.configs.items():
            entry = {
                "config": cfg.to_dict(),
                "original_flops": count_flops(cfg).total,
                "schemes": {r.scheme: r.to_dict() for r in self.rows if r.model == name},
            }
            if name in self.measurements:
                entry["measured"] = self.measurements[name].to_dict()
            models[name] = entry
        return {"seed": self.seed, "models": models}


def bench_report(cfgs: Dict[str, ModelConfig], schemes: Sequence[SchemeDescriptor], seed: int = 0,
                 threads: int = THREADS, measure: bool = True,
                 measure_limit: int = MEASURE_LIMIT) -> BenchReport:
    rows: List[OverheadReport] = []
    for name, cfg in cfgs.items():
        for scheme in schemes:
            if scheme.name == "soter" and scheme.param("seed") is None:
                report = estimate_overhead(
                    SchemeDescriptor("soter", tuple(scheme.params) + (("seed", seed),)), cfg, name
                )
                report.scheme = scheme.label
                report.extra.update(soter_statistics(cfg, scheme.param("fraction", SOTER_FRACTION), seed))
            else:
                report = estimate_overhead(scheme, cfg, name)
            rows.append(report)

    measurements: Dict[str, Measurement] = {}
    if measure and any(s.name == "coreguard" for s in schemes):
        names = list(cfgs)
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            results = list(pool.map(lambda n: measure_coreguard(n, cfgs[n], seed, measure_limit), names))
        measurements = dict(zip(names, results))
        for name, m in measurements.items():
            if not m.matches:
                logger.warning("Measured ledger for %s differs from the closed form", name)

    logger.info("Bench: %s configs x %s schemes", len(cfgs), len(schemes))
    return BenchReport(seed=seed, configs=dict(cfgs), rows=rows, measurements=measurements)
