import logging

from app.services.checkpoint import load_model_config, save_checkpoint
from app.services.transformer import init_model

logger = logging.getLogger(__name__)

def register(sub, common):
    p = sub.add_parser("gen", parents=[common], help="generate a random tiny model")
    p.add_argument("--config", required=True, help="JSON model config")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--layers", type=int, dest="num_layers")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--heads", type=int, dest="num_heads")
    p.add_argument("--d-ffn", type=int, dest="d_ffn")
    p.add_argument("--seq-len", type=int, dest="seq_len")
    p.add_argument("--vocab", type=int, dest="vocab_size")
    p.add_argument("--auth-pos", type=int, dest="auth_position")
    p.set_defaults(func=gen_cmd)

# gen --config <file> --seed <n> --out <ckpt>
def gen_cmd(args) -> int:
    cfg = load_model_config(args.config).with_overrides(
        num_layers=args.num_layers, d_model=args.d_model, num_heads=args.num_heads,
        d_ffn=args.d_ffn, seq_len=args.seq_len, vocab_size=args.vocab_size,
        auth_position=args.auth_position,
    )
    model = init_model(cfg, args.seed)
    logger.info("Generated %s-layer model (seed=%s)", cfg.num_layers, args.seed)
    save_checkpoint(args.out, model)
    print(f"model={args.out}")
    print(f"layers={cfg.num_layers} d_model={cfg.d_model} heads={cfg.num_heads} d_ffn={cfg.d_ffn} "
          f"seq_len={cfg.seq_len} vocab={cfg.vocab_size}")
    print(f"parameters={cfg.parameter_count()}")
    return 0
