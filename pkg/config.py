import os
from dotenv import load_dotenv

load_dotenv()

# Logging
LOG_LEVEL = os.getenv('EFSL_LOG_LEVEL', 'INFO')
TRACE_LOG_NAME = os.getenv('EFSL_TRACE_LOG_NAME', 'run_trace.log')

# Numerics
CHECK_FINITE = os.getenv('EFSL_CHECK_FINITE', '0') == '1'  # assert finiteness after every op

# Evaluation fan-out and backbone micro-batching
WORKERS = int(os.getenv('EFSL_WORKERS', '1'))
MICRO_BATCH = int(os.getenv('EFSL_MICRO_BATCH', '64'))

# Run ledger (sqlite file created inside the output directory)
LEDGER_NAME = os.getenv('EFSL_LEDGER_NAME', 'runs.db')
