"""Constants used throughout the application."""

from enum import Enum, IntEnum


# Process exit codes
class ExitCode(IntEnum):
    SUCCESS = 0
    VALIDATION = 1
    VERIFICATION = 2
    NUMERICAL = 3


# CLI subcommands
class Command(str, Enum):
    GEN = "gen"
    TRAIN = "train"
    VERIFY = "verify"
    VALUE_CURVE = "value-curve"
    BENCH = "bench"
    SAMPLE = "sample"


# Run directory layout
CONFIG_ECHO_FILE = "config.env"
RECORDS_DB_FILE = "records.db"
CORPUS_FILE = "corpus.jsonl"
CHECKPOINT_FILE = "checkpoint.npz"
VALUE_CURVE_CSV = "value_curve.csv"
VALUE_CURVE_SVG = "value_curve.svg"
BENCH_CSV = "bench.csv"
BENCH_SVG = "bench.svg"
LOSS_CSV = "loss_history.csv"
VERIFY_CSV = "verify_report.csv"
MASK_DUMP_FILE = "mask_dump.txt"
SAMPLE_CSV = "sample.csv"
RUN_DIR_FORMAT = "%Y%m%d-%H%M%S"

# File format versions
CORPUS_FORMAT = "crl-corpus"
CORPUS_VERSION = 1
CHECKPOINT_FORMAT = "crl-checkpoint"
CHECKPOINT_VERSION = 1


# Error messages
class ErrorMsg:
    UNKNOWN_KEY = "Unknown config key"
    BAD_VALUE = "Cannot parse config value"
    BAD_OVERRIDE = "Overrides must look like key=value"
    CORPUS_REQUIRED = "A corpus file is required (--corpus)"
    CHECKPOINT_REQUIRED = "A checkpoint file is required (--checkpoint)"
    BAD_CORPUS_FILE = "Not a corpus file"
    BAD_CHECKPOINT_FILE = "Not a checkpoint file"
    NO_FLOW_HEAD = "Checkpoint has no flow head; train with flow_enabled=true"
    TRAJECTORY_OR_START = "Give either --trajectory or --start"
    VERIFICATION_FAILED = "Verification failed"
