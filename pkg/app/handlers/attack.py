import logging

import numpy as np

from app.config import EVAL_SEQUENCES
from app.errors import LockError
from app.services.attacks import (
    affine_control, collect_traces, differencing_attack, permutation_guess_attack,
    simulate_authorization_unit,
)
from app.services.checkpoint import load_checkpoint, load_pair, save_report, save_traces
from app.services.enclave import EnclaveState
from app.services.linalg import relative_error
from app.services.locking import LockedModel, LockKeys, lock_model
from app.services.runtime import run_authorized
from app.services.transformer import Model, model_forward
from app.utils import random_tokens

logger = logging.getLogger(__name__)

REPORT_FORMAT = "coreguard-attack"

def register(sub, common):
    p = sub.add_parser("attack", parents=[common], help="run one adversary against a locked model")
    p.add_argument("--kind", required=True, choices=("differencing", "simulate", "guess"))
    p.add_argument("--original", required=True, help="plain checkpoint (oracle and scoring)")
    p.add_argument("--locked", required=True, help="locked checkpoint")
    p.add_argument("--key", required=True, help="sealed key (provisions the enclave; scoring only)")
    p.add_argument("--traces", type=int, default=100, help="authorized queries observed")
    p.add_argument("--eval", type=int, default=EVAL_SEQUENCES, help="evaluation sequences")
    p.add_argument("--budget", type=int, default=1000, help="guess attack: keys tried")
    p.add_argument("--no-otp", action="store_true", help="differencing: ablation enclave without pads")
    p.add_argument("--replay", action="store_true", help="differencing: repeat one query for every trace")
    p.add_argument("--assignment", choices=("greedy", "optimal"), default="greedy")
    p.add_argument("--control", action="store_true",
                   help="simulate: affine authorization unit with identity keys (positive control)")
    p.add_argument("--out", help="JSON attack report")
    p.add_argument("--traces-out", help="write the recorded traces (CGTR)")
    p.set_defaults(func=attack_cmd)

def _load(args):
    original = load_checkpoint(args.original)
    locked, keys, pad_seed = load_pair(args.locked, args.key)
    if not isinstance(original, Model) or not isinstance(locked, LockedModel):
        raise LockError("attack needs a plain --original and a locked --locked checkpoint")
    return original, locked, keys, pad_seed

def _differencing(args, original, locked, keys, pad_seed):
    cfg = locked.config
    enclave = EnclaveState.from_sealed(locked, keys, pad_seed, pad_count=0, otp=not args.no_otp)
    if args.replay:
        one = random_tokens(args.seed, 1, cfg.seq_len, cfg.vocab_size)
        tokens = np.repeat(one, args.traces, axis=0)
    else:
        tokens = random_tokens(args.seed, args.traces, cfg.seq_len, cfg.vocab_size)
    traces = collect_traces(locked, enclave, tokens, cut="encrypt")
    report = differencing_attack(traces, otp_enabled=not args.no_otp, true_key=keys.pi_enc,
                                 assignment=args.assignment)
    report.details["replay"] = args.replay
    return report, traces

def _simulate(args, original, locked, keys, pad_seed):
    if args.control:
        l0 = locked.auth_position
        original = affine_control(original, l0)
        keys = LockKeys.identity(original.config.d_model, original.config.d_ffn)
        locked = lock_model(original, keys, l0)
        enclave = EnclaveState.provision(original, keys, l0, pad_seed, pad_count=0)
    else:
        enclave = EnclaveState.from_sealed(locked, keys, pad_seed, pad_count=0)
    cfg = locked.config
    count = max(args.traces, 2 * cfg.d_model)
    traces = collect_traces(locked, enclave, random_tokens(args.seed, count, cfg.seq_len, cfg.vocab_size), "unit")
    eval_tokens = random_tokens(args.seed + 1, args.eval, cfg.seq_len, cfg.vocab_size)
    enclave.precompute_pads(args.eval)
    authorized, _ = run_authorized(locked, enclave, eval_tokens)
    error = relative_error(authorized, model_forward(original, eval_tokens))
    report = simulate_authorization_unit(traces, locked, original, eval_tokens, authorized_error=error)
    report.details["control"] = args.control
    return report, traces

def _guess(args, original, locked, keys, pad_seed):
    cfg = locked.config
    eval_tokens = random_tokens(args.seed + 1, args.eval, cfg.seq_len, cfg.vocab_size)
    report = permutation_guess_attack(locked, args.budget, original, eval_tokens, seed=args.seed, true_key=keys.pi)
    return report, None

# attack --kind {differencing|simulate|guess} --original <ckpt> --locked <ckpt> --key <key>
def attack_cmd(args) -> int:
    original, locked, keys, pad_seed = _load(args)
    runner = {"differencing": _differencing, "simulate": _simulate, "guess": _guess}[args.kind]
    report, traces = runner(args, original, locked, keys, pad_seed)
    logger.info("Attack %s finished on %s", args.kind, args.locked)
    if args.out:
        save_report(args.out, REPORT_FORMAT, {"seed": args.seed, **report.to_dict()})
    if args.traces_out and traces is not None:
        save_traces(args.traces_out, traces)
    print(f"attack={report.attack}")
    for name in ("key_accuracy", "downstream_agreement", "fit_residual"):
        value = getattr(report, name)
        if value is not None:
            print(f"{name}={value:.6f}")
    print(f"chance={report.chance:.6f}")
    for name, value in report.details.items():
        print(f"{name}={value}")
    return 0
