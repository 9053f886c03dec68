import os

# Logging
LOG_LEVEL = os.getenv("COREGUARD_LOG_LEVEL", "INFO").strip().upper() or "INFO"

# Parallelism (bench / sweep fan-out)
THREADS = int(os.getenv("COREGUARD_THREADS", "1") or "1")

# Enclave: pads precomputed each time an enclave is provisioned
PAD_BATCH = int(os.getenv("COREGUARD_PAD_BATCH", "8") or "8")

# Bench: largest parameter count measured live; bigger configs use a downscaled sibling
MEASURE_LIMIT = int(os.getenv("COREGUARD_MEASURE_LIMIT", "4000000") or "4000000")

# SOTER layer draws summarised per config
SOTER_SEEDS = int(os.getenv("COREGUARD_SOTER_SEEDS", "100") or "100")

# Attacks / sweeps: evaluation sequences per experiment
EVAL_SEQUENCES = int(os.getenv("COREGUARD_EVAL_SEQUENCES", "200") or "200")
