"""
Adversary harness.

Everything here works from what an attacker on the untrusted side can see:
the shipped LockedModel, an oracle for the original model where the threat
model grants one, and tensors recorded off the boundary ledger through taps.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from app.config import THREADS
from app.errors import ConfigError, InsufficientTracesError, SizeError
from app.services.enclave import BoundaryLedger, EnclaveState
from app.services.linalg import DTYPE, PermutationKey, permute_cols, relative_error
from app.services.locking import LockedModel, LockKeys, lock_model, locked_fraction
from app.services.runtime import run_authorized, run_unauthorized
from app.services.transformer import (
    Model, argmax_agreement, attention_block, check_tokens, embed, hidden_states, matmul,
    model_forward, run_layers,
)

logger = logging.getLogger(__name__)

RIDGE_EPS = 1e-6

# cut name -> (input label, output label) on the ledger
CUTS = {
    "encrypt": ("m", "m'"),
    "unit": ("y", "z'"),
}


@dataclass
class TraceSet:
    inputs: np.ndarray
    outputs: np.ndarray
    cut: str

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.outputs.ndim != 3:
            raise SizeError("traces are stacks of (seq_len, width) matrices")
        if self.inputs.shape[:2] != self.outputs.shape[:2]:
            raise SizeError(f"trace stacks disagree: {self.inputs.shape} vs {self.outputs.shape}")

    @property
    def count(self) -> int:
        return int(self.inputs.shape[0])


class TraceRecorder:
    """Ledger tap pairing each input crossing with the next output crossing of a cut."""

    def __init__(self, cut: str):
        if cut not in CUTS:
            raise ConfigError(f"unknown cut {cut!r}; expected one of {sorted(CUTS)}")
        self.cut = cut
        self.in_label, self.out_label = CUTS[cut]
        self._inputs: List[np.ndarray] = []
        self._outputs: List[np.ndarray] = []

    def __call__(self, label: str, direction: str, tensor: np.ndarray) -> None:
        if label == self.in_label and direction == "in":
            self._inputs.append(tensor)
        elif label == self.out_label and direction == "out":
            self._outputs.append(tensor)

    def attach(self, ledger: BoundaryLedger) -> "TraceRecorder":
        ledger.add_tap(self)
        return self

    def traces(self) -> TraceSet:
        n = min(len(self._inputs), len(self._outputs))
        if n == 0:
            raise InsufficientTracesError(f"no complete {self.cut} crossings recorded")
        return TraceSet(np.stack(self._inputs[:n]), np.stack(self._outputs[:n]), self.cut)


def collect_traces(locked: LockedModel, enclave: EnclaveState, tokens, cut: str = "unit") -> TraceSet:
    """Runs authorized inference on every sequence and records the cut off the boundary."""
    toks = check_tokens(tokens, locked.config)
    if toks.ndim == 1:
        toks = toks[None, :]
    missing = toks.shape[0] - enclave.pads_available
    if missing > 0:
        enclave.precompute_pads(missing)
    recorder = TraceRecorder(cut).attach(enclave.ledger)
    try:
        run_authorized(locked, enclave, toks)
    finally:
        enclave.ledger.remove_tap(recorder)
    traces = recorder.traces()
    logger.info("Recorded %s traces at the %s cut", traces.count, cut)
    return traces


@dataclass
class AttackReport:
    attack: str
    recovered_key: Optional[PermutationKey] = None
    key_accuracy: Optional[float] = None
    downstream_agreement: Optional[float] = None
    fit_residual: Optional[float] = None
    chance: float = 0.0
    details: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "attack": self.attack,
            "recovered_key": None if self.recovered_key is None else self.recovered_key.forward.tolist(),
            "key_accuracy": self.key_accuracy,
            "downstream_agreement": self.downstream_agreement,
            "fit_residual": self.fit_residual,
            "chance": self.chance,
            "details": self.details,
        }


def key_accuracy(recovered: PermutationKey, true_key: PermutationKey) -> float:
    if recovered.size != true_key.size:
        raise SizeError("recovered and true keys differ in size")
    return float(np.mean(recovered.forward == true_key.forward))


# ---------- differencing ----------

def _correlation_scores(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """S[i, j]: correlation of input column i and output column j over traces, averaged over rows."""
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    nx = np.sqrt(np.sum(xc * xc, axis=0))
    ny = np.sqrt(np.sum(yc * yc, axis=0))
    # series that do not move across traces carry no signal
    nx[nx <= 1e-9 * (np.abs(x).max(axis=0) + 1e-30) * math.sqrt(x.shape[0])] = 0.0
    ny[ny <= 1e-9 * (np.abs(y).max(axis=0) + 1e-30) * math.sqrt(y.shape[0])] = 0.0
    num = np.einsum("nri,nrj->rij", xc, yc)
    den = nx[:, :, None] * ny[:, None, :]
    corr = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return corr.mean(axis=0)


def _exact_scores(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """S[i, j]: share of (trace, row) cells where output column j equals input column i."""
    n, r, w = x.shape
    xs = x.reshape(n * r, w)
    ys = y.reshape(n * r, w)
    return np.mean(xs[:, :, None] == ys[:, None, :], axis=0)


def greedy_assignment(scores: np.ndarray) -> np.ndarray:
    """Highest remaining score first; ties resolve to the lowest flat index."""
    w = scores.shape[0]
    forward = np.full(w, -1, dtype=np.int64)
    used_cols = np.zeros(w, dtype=bool)
    left = w
    for flat in np.argsort(-scores, axis=None, kind="stable"):
        i, j = divmod(int(flat), w)
        if forward[i] < 0 and not used_cols[j]:
            forward[i] = j
            used_cols[j] = True
            left -= 1
            if not left:
                break
    return forward


def optimal_assignment(scores: np.ndarray) -> np.ndarray:
    rows, cols = linear_sum_assignment(scores, maximize=True)
    forward = np.empty(scores.shape[0], dtype=np.int64)
    forward[rows] = cols
    return forward


def differencing_attack(traces: TraceSet, otp_enabled: bool, true_key: Optional[PermutationKey] = None,
                        assignment: str = "greedy") -> AttackReport:
    """
    Matches columns of m' back to columns of m. Without pads the columns are
    plain copies and value equality recovers the key; with pads the attacker
    falls back to correlation across traces.
    """
    if traces.cut != "encrypt":
        raise ConfigError("differencing needs traces recorded at the encrypt cut (m vs m')")
    x = traces.inputs.astype(np.float64)
    y = traces.outputs.astype(np.float64)
    if otp_enabled:
        if traces.count < 2:
            raise InsufficientTracesError("correlation matching needs at least 2 traces")
        scores = _correlation_scores(x, y)
    else:
        scores = _exact_scores(x, y)
    if assignment == "greedy":
        forward = greedy_assignment(scores)
    elif assignment == "optimal":
        forward = optimal_assignment(scores)
    else:
        raise ConfigError(f"unknown assignment {assignment!r}")
    recovered = PermutationKey.from_forward(forward)
    width = recovered.size
    report = AttackReport(
        attack="differencing", recovered_key=recovered, chance=1.0 / width,
        details={"otp": otp_enabled, "traces": traces.count, "assignment": assignment,
                 "mode": "correlation" if otp_enabled else "exact"},
    )
    if true_key is not None:
        report.key_accuracy = key_accuracy(recovered, true_key)
    return report


# ---------- authorization simulation ----------

@dataclass(frozen=True)
class AffineFit:
    a: np.ndarray
    b: np.ndarray
    residual: float
    ridge: bool


def design_rank(design: np.ndarray) -> int:
    """Numerical rank at float32 resolution; traces are float32 even when fitted in float64."""
    s = np.linalg.svd(design, compute_uv=False)
    if not s.size or s[0] == 0.0:
        return 0
    tol = s[0] * max(design.shape) * np.finfo(np.float32).eps
    return int(np.sum(s > tol))


def fit_affine(inputs: np.ndarray, targets: np.ndarray, eps: float = RIDGE_EPS) -> AffineFit:
    """
    Least squares for inputs A + b ~ targets in float64; ridge when the design is rank deficient.

    Layer-normed inputs satisfy sum((y - beta) / gamma) = 0 per row, so [y, 1] is singular up
    to float32 rounding. An unregularized solve would put an arbitrary coefficient on that
    direction; the rank test runs at float32 resolution so the ridge damps it.
    """
    x = inputs.reshape(-1, inputs.shape[-1]).astype(np.float64)
    t = targets.reshape(-1, targets.shape[-1]).astype(np.float64)
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    ridge = design_rank(design) < design.shape[1]
    if ridge:
        logger.warning("Trace matrix is rank deficient; using ridge fit (eps=%g)", eps)
        gram = design.T @ design + eps * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ t)
    else:
        coef, *_ = np.linalg.lstsq(design, t, rcond=None)
    residual = relative_error(design @ coef, t)
    return AffineFit(a=coef[:-1], b=coef[-1], residual=residual, ridge=bool(ridge))


def run_spliced(locked: LockedModel, tokens, fit: AffineFit) -> np.ndarray:
    """Locked pipeline with the enclave replaced by the fitted map y -> y A + b."""
    cfg = locked.config
    toks = check_tokens(tokens, cfg)
    l0 = locked.auth_position
    x = run_layers(locked.front_layers, embed(locked.embedding, toks), cfg)
    _, _, _, _, y = attention_block(locked.auth_block.attention_weights(), x, cfg, layer_index=l0 - 1)
    z = (y.astype(np.float64) @ fit.a + fit.b).astype(DTYPE)
    x = run_layers(locked.rear_layers, z, cfg, offset=l0)
    return matmul(x, locked.output_head)


def simulate_authorization_unit(traces: TraceSet, locked: LockedModel, oracle: Model, eval_tokens,
                                authorized_error: Optional[float] = None) -> AttackReport:
    if traces.cut != "unit":
        raise ConfigError("authorization simulation needs traces recorded at the unit cut (y vs z pi)")
    d = locked.config.d_model
    if traces.count < 2 * d:
        raise InsufficientTracesError(f"need at least {2 * d} traces for a well-posed fit, got {traces.count}")
    fit = fit_affine(traces.inputs, traces.outputs)
    reference = model_forward(oracle, eval_tokens)
    agreement = argmax_agreement(run_spliced(locked, eval_tokens, fit), reference)
    details: Dict[str, object] = {"traces": traces.count, "ridge": fit.ridge}
    if authorized_error is not None:
        details["authorized_error"] = authorized_error
        details["residual_ratio"] = fit.residual / max(authorized_error, 1e-12)
    return AttackReport(
        attack="simulate", downstream_agreement=agreement, fit_residual=fit.residual,
        chance=1.0 / locked.config.vocab_size, details=details,
    )


def affine_control(model: Model, auth_position: int) -> Model:
    """
    Ablation whose authorization unit is affine in y: W_n and b_n are zeroed and
    the first add-norm is the bare normalisation, so z = LN(y) is an affine image of y.
    """
    cfg = model.config
    i = auth_position - 1
    w = model.layers[i]
    d, f = cfg.d_model, cfg.d_ffn
    control = w.replace(
        w_n=np.zeros((f, d), dtype=DTYPE), b_n=np.zeros(d, dtype=DTYPE),
        gamma1=np.ones(d, dtype=DTYPE), beta1=np.zeros(d, dtype=DTYPE),
    )
    layers = list(model.layers)
    layers[i] = control
    return replace(model, layers=tuple(layers))


# ---------- key guessing ----------

def _candidate_keys(d: int, budget: int, rng: np.random.Generator):
    if d <= 8 and budget >= math.factorial(d):
        for perm in itertools.permutations(range(d)):
            yield PermutationKey.from_forward(perm)
        return
    for _ in range(budget):
        yield PermutationKey.from_forward(rng.permutation(d))


def permutation_guess_attack(locked: LockedModel, budget: int, oracle: Model, eval_tokens, seed: int = 0,
                             true_key: Optional[PermutationKey] = None) -> AttackReport:
    """
    Splices guessed keys at the strongest position: the plain boundary feature
    z from the oracle's first L0 layers, permuted by the guess, into the locked rear.
    """
    if budget < 1:
        raise ConfigError("guess budget must be >= 1")
    cfg = locked.config
    l0 = locked.auth_position
    d = cfg.d_model
    reference = model_forward(oracle, eval_tokens)
    z = hidden_states(oracle, eval_tokens, upto=l0)
    rng = np.random.default_rng(seed)

    best_key, best, evaluated, full = None, -1.0, 0, 0
    for guess in _candidate_keys(d, budget, rng):
        logits = matmul(run_layers(locked.rear_layers, permute_cols(z, guess), cfg, offset=l0), locked.output_head)
        agreement = argmax_agreement(logits, reference)
        evaluated += 1
        if agreement == 1.0:
            full += 1
        if agreement > best:
            best_key, best = guess, agreement
    exhaustive = d <= 8 and budget >= math.factorial(d)
    logger.info("Guess attack: %s keys, best agreement %.4f", evaluated, best)
    report = AttackReport(
        attack="guess", recovered_key=best_key, downstream_agreement=best, chance=1.0 / cfg.vocab_size,
        details={"budget": budget, "evaluated": evaluated, "exhaustive": exhaustive, "full_agreement_keys": full},
    )
    if true_key is not None:
        report.key_accuracy = key_accuracy(best_key, true_key)
    return report


# ---------- authorization position sweep ----------

@dataclass(frozen=True)
class SweepRow:
    auth_position: int
    locked_fraction: float
    simulation_agreement: float
    fit_residual: float
    unauthorized_agreement: float

    COLUMNS = ("auth_position", "locked_fraction", "simulation_agreement", "fit_residual",
               "unauthorized_agreement")

    def as_tuple(self) -> Tuple:
        return (self.auth_position, self.locked_fraction, self.simulation_agreement, self.fit_residual,
                self.unauthorized_agreement)


def _sweep_one(model: Model, keys: LockKeys, l0: int, eval_tokens, trace_tokens, pad_seed: int) -> SweepRow:
    locked = lock_model(model, keys, l0)
    enclave = EnclaveState.provision(model, keys, l0, pad_seed, pad_count=0)
    traces = collect_traces(locked, enclave, trace_tokens, cut="unit")
    sim = simulate_authorization_unit(traces, locked, model, eval_tokens)
    reference = model_forward(model, eval_tokens)
    unauth = argmax_agreement(run_unauthorized(locked, eval_tokens), reference)
    return SweepRow(
        auth_position=l0, locked_fraction=locked_fraction(model.config, l0),
        simulation_agreement=sim.downstream_agreement, fit_residual=sim.fit_residual,
        unauthorized_agreement=unauth,
    )


def sweep_auth_position(model: Model, keys: LockKeys, positions: Sequence[int], eval_tokens, trace_tokens,
                        pad_seed: int = 0, threads: int = THREADS) -> List[SweepRow]:
    L = model.config.num_layers
    for l0 in positions:
        if not 1 <= l0 <= L - 1:
            raise ConfigError(f"auth position {l0} outside [1, {L - 1}]")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(
            lambda l0: _sweep_one(model, keys, l0, eval_tokens, trace_tokens, pad_seed), positions
        ))
    logger.info("Swept %s authorization positions", len(rows))
    return rows
