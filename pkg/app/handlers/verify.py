import logging

from app.errors import LockError
from app.services.checkpoint import load_checkpoint, load_pair
from app.services.locking import LockedModel, verify_lock
from app.services.transformer import Model

logger = logging.getLogger(__name__)

def register(sub, common):
    p = sub.add_parser("verify", parents=[common], help="check the permuted-layer identities line by line")
    p.add_argument("--original", required=True, help="plain checkpoint")
    p.add_argument("--locked", required=True, help="locked checkpoint")
    p.add_argument("--key", required=True, help="sealed key")
    p.add_argument("--probes", type=int, default=2, help="random probe sequences per layer")
    p.set_defaults(func=verify_cmd)

# verify --original <ckpt> --locked <ckpt> --key <key>
def verify_cmd(args) -> int:
    original = load_checkpoint(args.original)
    locked, keys, _ = load_pair(args.locked, args.key)
    if not isinstance(original, Model) or not isinstance(locked, LockedModel):
        raise LockError("verify needs a plain --original and a locked --locked checkpoint")
    report = verify_lock(original, locked, keys, probes=args.probes, seed=args.seed)
    logger.info("Verified %s against %s", args.locked, args.original)
    for line, err in report.max_errors().items():
        print(f"line={line} max_rel_err={err:.3e}")
    print(f"status=ok tolerance={report.tolerance:g}")
    return 0
