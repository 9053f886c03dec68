import logging

from app.config import EVAL_SEQUENCES
from app.errors import LockError
from app.services.attacks import SweepRow, sweep_auth_position
from app.services.checkpoint import load_checkpoint, load_key, save_table
from app.services.transformer import Model
from app.utils import format_table, parse_positions, random_tokens

logger = logging.getLogger(__name__)

def register(sub, common):
    p = sub.add_parser("sweep", parents=[common], help="security proxies across authorization positions")
    p.add_argument("--original", required=True, help="plain checkpoint")
    p.add_argument("--key", required=True, help="sealed key used for every position")
    p.add_argument("--positions", required=True, help="e.g. 1,2,3 or 1-7")
    p.add_argument("--traces", type=int, default=0, help="authorized queries per position (default 2*d)")
    p.add_argument("--eval", type=int, default=EVAL_SEQUENCES, help="evaluation sequences")
    p.add_argument("--out", required=True, help="CSV table")
    p.set_defaults(func=sweep_cmd)

# sweep --original <ckpt> --key <key> --positions <list> --out <csv>
def sweep_cmd(args) -> int:
    model = load_checkpoint(args.original)
    if not isinstance(model, Model):
        raise LockError("sweep needs the plain model")
    keys, pad_seed = load_key(args.key)
    cfg = model.config
    count = max(args.traces, 2 * cfg.d_model)
    rows = sweep_auth_position(
        model, keys, parse_positions(args.positions),
        eval_tokens=random_tokens(args.seed + 1, args.eval, cfg.seq_len, cfg.vocab_size),
        trace_tokens=random_tokens(args.seed, count, cfg.seq_len, cfg.vocab_size),
        pad_seed=pad_seed, threads=args.threads,
    )
    logger.info("Sweep over %s positions done", len(rows))
    save_table(args.out, SweepRow.COLUMNS, [r.as_tuple() for r in rows], args.seed)
    print(format_table(SweepRow.COLUMNS, [
        (r.auth_position, f"{r.locked_fraction:.4f}", f"{r.simulation_agreement:.4f}",
         f"{r.fit_residual:.4f}", f"{r.unauthorized_agreement:.4f}") for r in rows
    ]))
    print(f"table={args.out}")
    return 0
