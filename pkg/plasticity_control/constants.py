NUMPY = "numpy"
RANDOM = "random"
SEED = "seed"
RUN_ID = "run_id"
LOG_FILE_NAME = "experiment.log"
LOG_FORMAT = "%(asctime)s  %(name)8s  %(levelname)5s  %(message)s"
CHECKPOINT_PATH = "checkpoint_path"
LOGFILE_PATH = "logfile_path"
SINGLE = "single"
CONFIG_CHANGES_JSON = "config_changes.json"
SERIAL = "serial"
PARALLEL = "parallel"
MULTI = "multi"
XLABEL = "xlabel"
SMOOTHING = "smoothing"
DATA_LOGGER_FILE_NAME = "data_logger.csv"

# config sections
DATA = "data"
MODEL = "model"
TRAINING = "training"
NPC_SECTION = "npc"
PENALTY = "penalty"
ANALYSIS = "analysis"
LOGGING = "logging"

# config fields
DATASET = "dataset"
DATA_DIR = "data_dir"
NUM_TASKS = "num_tasks"
MAX_TASKS = "max_tasks"
CLASS_ORDER = "class_order"
SAMPLES_PER_CLASS = "samples_per_class"
PAD_TO = "pad_to"
CONV_CHANNELS = "conv_channels"
KERNEL_SIZE = "kernel_size"
DENSE_WIDTHS = "dense_widths"
DROPOUT_RATE = "dropout_rate"
PRECISION = "precision"
STRATEGY = "strategy"
EPOCHS = "epochs"
BATCH_SIZE = "batch_size"
LEARNING_RATE = "learning_rate"
TOTAL_TRAIN_COUNT = "total_train_count"
IMPORTANCE_SAMPLES = "importance_samples"
LOG_WALL_TIME = "log_wall_time"
ALPHA = "alpha"
BETA = "beta"
ETA_MAX = "eta_max"
DELTA = "delta"
SWAP_DELTA = "swap_delta"
EWC_LAMBDA = "ewc_lambda"
MAS_LAMBDA = "mas_lambda"
SI_LAMBDA = "si_lambda"
SI_DAMPING = "si_damping"
PROBE_SAMPLES = "probe_samples"

# datasets
MNIST = "mnist"
CIFAR100 = "cifar100"
DATASETS = [MNIST, CIFAR100]
DATA_DIR_ENV = "NPC_DATA_DIR"

# strategies
NPC = "npc"
CPC = "cpc"
EWC = "ewc"
MAS = "mas"
SI = "si"
FINETUNE = "finetune"
STRATEGIES = [NPC, CPC, EWC, MAS, SI, FINETUNE]

# precisions
FLOAT32 = "float32"
FLOAT64 = "float64"

# profiles
FULL = "full"
DESK = "desk"
PROFILES = [FULL, DESK]

# model taps
SECOND_TOP = "second_top"
LOGITS = "logits"
OUTPUT = "output"

# trace events
IMPORTANCE_EVENT = "importance"
UPDATE_EVENT = "update"

# run outputs
METRICS_CSV = "metrics.csv"
SUMMARY_CSV = "summary.csv"
ACTIVATION_CHANGE_CSV = "activation_change.csv"
ACTIVATION_SUMMARY_CSV = "activation_change_summary.csv"
IMPORTANCE_CSV = "importance.csv"
EVAL_CSV = "eval.csv"
FINAL_CHECKPOINT = "final.npc"
TASK_CHECKPOINT_FORMAT = "task_{}.npc"

METRICS_COLUMNS = [
    "run_id",
    "seed",
    "strategy",
    "task",
    "epoch",
    "eval_task",
    "accuracy",
    "avg_accuracy",
    "wall_ms",
]

# data logger tags
LOSS = "loss"
AVERAGE_ACCURACY = "average_accuracy"
MEAN_LEARNING_RATE = "mean_learning_rate"
MEAN_IMPORTANCE = "mean_importance"

# exit codes
EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
