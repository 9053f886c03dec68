import logging

import numpy as np

from app.config import PAD_BATCH
from app.errors import LockError
from app.services.checkpoint import load_checkpoint, load_pair
from app.services.enclave import EnclaveState
from app.services.locking import LockedModel
from app.services.runtime import run_authorized, run_unauthorized
from app.utils import logits_digest, read_tokens

logger = logging.getLogger(__name__)

def register(sub, common):
    p = sub.add_parser("run", parents=[common], help="inference on a locked model")
    p.add_argument("--model", required=True, help="locked checkpoint")
    p.add_argument("--key", help="sealed key; without it the run is unauthorized")
    p.add_argument("--input", required=True, help="token file, one sequence per line")
    p.set_defaults(func=run_cmd)

# run --model <locked.ckpt> [--key <sealed.key>] --input <token file>
def run_cmd(args) -> int:
    tokens = read_tokens(args.input)
    sequences = 1 if tokens.ndim == 1 else tokens.shape[0]
    if args.key:
        locked, keys, pad_seed = load_pair(args.model, args.key)
        if not isinstance(locked, LockedModel):
            raise LockError(f"{args.model} is not a locked checkpoint")
        enclave = EnclaveState.from_sealed(locked, keys, pad_seed, pad_count=max(PAD_BATCH, sequences))
        logits, ledger = run_authorized(locked, enclave, tokens)
        rounds, nbytes = ledger.rounds, ledger.bytes
    else:
        locked = load_checkpoint(args.model)
        if not isinstance(locked, LockedModel):
            raise LockError(f"{args.model} is not a locked checkpoint")
        logger.warning("Running %s without a key", args.model)
        print("warning: no key given; running unauthorized, logits are scrambled")
        logits = run_unauthorized(locked, tokens)
        rounds, nbytes = 0, 0
    print(f"sequences={sequences}")
    print(f"logits_sha256={logits_digest(logits)}")
    print(f"argmax={' '.join(str(int(i)) for i in np.argmax(logits, axis=-1).ravel())}")
    print(f"rounds={rounds} bytes={nbytes}")
    return 0
