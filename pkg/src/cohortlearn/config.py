"""Run configuration: dotted-key text files and the resolved RunConfig.

Config files are plain text: one `dotted.key = value` per line, `#` comments,
blank lines ignored. Values parse as int, float, bool (true/false), or string
(optionally quoted); comma-separated values parse as lists. Unknown keys are
rejected so typos fail loudly at startup.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict

from .errors import ConfigError

METHODS = (
    "core", "knn", "kmeans", "grasp_lite",
    "mc_gender", "mc_age", "mc_gender_age", "backbone_only",
)
SWEEPABLE = ("n_cohorts", "gamma", "K", "S", "lambda_pre", "method")


def _parse_scalar(text: str):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        return text[1:-1]
    lowered = text.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_value(text: str):
    if "," in text:
        return [_parse_scalar(part) for part in text.split(",")]
    return _parse_scalar(text)


def load_config_file(path) -> dict:
    """Parse a dotted-key config file into {dotted key: value}."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}: line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(value)
    return values


@dataclass
class RunConfig:
    """Fully-resolved settings for one training/evaluation run."""

    method: str = "core"
    backbone: str = "code_mlp"
    d: int = 64
    n_cohorts: int = 8
    gamma: float = 0.9
    intra_k: int = 10          # config key: K
    inter_degree: int = 2      # config key: S
    lambda_pre: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    warmup_epochs: int = 5
    seed: int = 0
    out_dir: str = "runs/out"
    threshold: float = 0.5
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    pos_k: int = 5
    neg_k: int = 5
    use_tanh: bool = False
    gcn_init_zero: bool = False
    visit_level_cohorts: bool = False
    node_dim: int = 16
    word_dim: int = 16
    # Data source: either file paths...
    patients_path: str = ""
    ontology_path: str = ""
    # ...or synthetic generation.
    synthetic: bool = False
    syn_n_patients: int = 200
    syn_n_cohorts: int = 4
    syn_codes_per_cohort: int = 3
    syn_noise_rate: float = 0.1
    syn_base_rate: float = 0.25
    syn_shift: float = 0.0
    syn_visits_mean: float = 1.4
    syn_block_size: int = 0    # 0 -> generator default
    checkpoint_path: str = ""  # eval subcommand input
    sweep_grid: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; known: {', '.join(METHODS)}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.n_cohorts < 2:
            raise ConfigError(f"n_cohorts must be >= 2, got {self.n_cohorts}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.intra_k < 0:
            raise ConfigError(f"K must be >= 0, got {self.intra_k}")
        if self.inter_degree < 0:
            raise ConfigError(f"S must be >= 0, got {self.inter_degree}")
        if self.lambda_pre < 0:
            raise ConfigError(f"lambda_pre must be >= 0, got {self.lambda_pre}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        for name in ("split_train", "split_val", "split_test"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if abs(self.split_train + self.split_val + self.split_test - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")
        if self.pos_k < 1 or self.neg_k < 1:
            raise ConfigError("pos_k and neg_k must be >= 1")
        if self.node_dim < 2 or self.word_dim < 2:
            raise ConfigError("node_dim and word_dim must be >= 2")
        if not self.synthetic and not self.patients_path:
            raise ConfigError("either data.patients or data.synthetic = true is required")
        for param, grid in self.sweep_grid.items():
            if param not in SWEEPABLE:
                raise ConfigError(
                    f"sweep.{param} is not sweepable; allowed: {', '.join(SWEEPABLE)}"
                )
            if not grid:
                raise ConfigError(f"sweep.{param} has an empty value list")
        return self

    def hash_payload(self) -> dict:
        """The settings that define a model, for checkpoint/report hashing
        (output paths and sweep grids excluded)."""
        payload = asdict(self)
        payload.pop("out_dir")
        payload.pop("checkpoint_path")
        payload.pop("sweep_grid")
        return payload

    def config_hash(self) -> str:
        canonical = json.dumps(self.hash_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# dotted config key -> (RunConfig field, expected python type)
_KEY_MAP = {
    "method": ("method", str),
    "backbone": ("backbone", str),
    "d": ("d", int),
    "n_cohorts": ("n_cohorts", int),
    "gamma": ("gamma", float),
    "K": ("intra_k", int),
    "S": ("inter_degree", int),
    "lambda_pre": ("lambda_pre", float),
    "learning_rate": ("learning_rate", float),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "warmup_epochs": ("warmup_epochs", int),
    "seed": ("seed", int),
    "out": ("out_dir", str),
    "eval.threshold": ("threshold", float),
    "eval.checkpoint": ("checkpoint_path", str),
    "split.train": ("split_train", float),
    "split.val": ("split_val", float),
    "split.test": ("split_test", float),
    "precontext.pos_k": ("pos_k", int),
    "precontext.neg_k": ("neg_k", int),
    "model.use_tanh": ("use_tanh", bool),
    "model.gcn_init_zero": ("gcn_init_zero", bool),
    "model.visit_level_cohorts": ("visit_level_cohorts", bool),
    "model.node_dim": ("node_dim", int),
    "model.word_dim": ("word_dim", int),
    "data.patients": ("patients_path", str),
    "data.ontology": ("ontology_path", str),
    "data.synthetic": ("synthetic", bool),
    "data.syn.n_patients": ("syn_n_patients", int),
    "data.syn.n_cohorts": ("syn_n_cohorts", int),
    "data.syn.codes_per_cohort": ("syn_codes_per_cohort", int),
    "data.syn.noise_rate": ("syn_noise_rate", float),
    "data.syn.base_rate": ("syn_base_rate", float),
    "data.syn.shift": ("syn_shift", float),
    "data.syn.visits_mean": ("syn_visits_mean", float),
    "data.syn.block_size": ("syn_block_size", int),
}


def _coerce(key: str, value, expected: type):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if not isinstance(value, expected) or isinstance(value, bool) and expected is not bool:
        raise ConfigError(f"{key}: expected {expected.__name__}, got {value!r}")
    return value


def build_run_config(values: dict, seed=None, out=None) -> RunConfig:
    """Resolve dotted-key values (plus CLI overrides) into a validated RunConfig."""
    config = RunConfig()
    for key, value in values.items():
        if key.startswith("sweep."):
            param = key[len("sweep."):]
            grid = value if isinstance(value, list) else [value]
            config.sweep_grid[param] = grid
            continue
        if key not in _KEY_MAP:
            raise ConfigError(f"unknown config key {key!r}")
        attr, expected = _KEY_MAP[key]
        setattr(config, attr, _coerce(key, value, expected))
    if seed is not None:
        config.seed = int(seed)
    if out is not None:
        config.out_dir = str(out)
    return config.validate()


def load_run_config(path, seed=None, out=None) -> RunConfig:
    return build_run_config(load_config_file(path), seed=seed, out=out)
