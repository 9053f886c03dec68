import logging

from app.errors import LockError
from app.services.checkpoint import check_key_separation, load_checkpoint, save_checkpoint, save_key
from app.services.enclave import derive_pad_seed
from app.services.linalg import keyspace_bits
from app.services.locking import LockedModel, generate_keys, lock_model, locked_fraction

logger = logging.getLogger(__name__)

def register(sub, common):
    p = sub.add_parser("lock", parents=[common], help="permute the rear layers and seal the key")
    p.add_argument("--in", required=True, dest="src", help="plain checkpoint")
    p.add_argument("--auth-pos", type=int, help="authorization position L0 (default: config, else middle)")
    p.add_argument("--out", required=True, help="locked checkpoint to write")
    p.add_argument("--key-out", required=True, help="sealed key file; must live outside the checkpoint's directory")
    p.set_defaults(func=lock_cmd)

# lock --in <ckpt> --auth-pos <L0> --seed <n> --out <locked.ckpt> --key-out <sealed.key>
def lock_cmd(args) -> int:
    check_key_separation(args.out, args.key_out)
    model = load_checkpoint(args.src)
    if isinstance(model, LockedModel):
        raise LockError(f"{args.src} is already locked")
    cfg = model.config
    l0 = args.auth_pos if args.auth_pos is not None else cfg.resolved_auth_position()
    keys = generate_keys(cfg, args.seed)
    locked = lock_model(model, keys, l0)
    logger.info("Locked %s at auth position %s", args.src, l0)
    save_checkpoint(args.out, locked)
    save_key(args.key_out, keys, derive_pad_seed(args.seed))
    print(f"locked={args.out} key={args.key_out}")
    print(f"auth_position={l0}")
    print(f"locked_fraction={locked_fraction(cfg, l0):.6f}")
    print(f"keyspace_bits={keyspace_bits(cfg.d_model):.3f}")
    return 0
