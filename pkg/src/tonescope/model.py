"""The conv-blocks -> flatten -> linear-blocks -> softmax classifier.

Conv blocks are conv3x3(stride 1, pad 1) -> ReLU -> MaxPool2d(2); linear
blocks are Linear -> ReLU -> Dropout; the head is Linear(., 2) followed by a
softmax over {benign, malignant}.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from tonescope.engine import Tensor, conv2d, dropout, flatten, linear, maxpool2d, relu, softmax
from tonescope.engine.optim import OPTIMIZERS

BENIGN, MALIGNANT = 0, 1

CONV_BLOCK_RANGE = (2, 6)
LINEAR_BLOCK_RANGE = (2, 6)
UNIT_RANGE = (16, 256)
DROPOUT_RANGE = (0.2, 0.5)
LR_RANGE = (1e-5, 0.1)
KERNEL = 3
# output head bound relative to the hidden-layer bound; keeps fresh logits
# within ~0.2 of each other so initial predictions sit near 0.5
HEAD_INIT_SCALE = 0.02


class ConfigError(ValueError):
    """A ModelConfig violates one or more constraints; ``problems`` lists them."""

    def __init__(self, problems: list[str]) -> None:
        self.problems = problems
        super().__init__("invalid model config: " + "; ".join(problems))


@dataclass(frozen=True)
class ConvBlock:
    out_features: int


@dataclass(frozen=True)
class LinearBlock:
    units: int
    dropout_p: float = 0.25


def _default_conv():
    return [ConvBlock(32), ConvBlock(64), ConvBlock(128)]


def _default_linear():
    return [LinearBlock(128), LinearBlock(64)]


@dataclass
class ModelConfig:
    conv_blocks: list[ConvBlock] = field(default_factory=_default_conv)
    linear_blocks: list[LinearBlock] = field(default_factory=_default_linear)
    input_size: tuple[int, int, int] = (224, 224, 3)
    learning_rate: float = 1e-5
    optimizer: str = "adam"

    def problems(self) -> list[str]:
        out = []
        nc, nl = len(self.conv_blocks), len(self.linear_blocks)
        if not CONV_BLOCK_RANGE[0] <= nc <= CONV_BLOCK_RANGE[1]:
            out.append(f"conv block count {nc} outside {list(CONV_BLOCK_RANGE)}")
        if not LINEAR_BLOCK_RANGE[0] <= nl <= LINEAR_BLOCK_RANGE[1]:
            out.append(f"linear block count {nl} outside {list(LINEAR_BLOCK_RANGE)}")
        for i, b in enumerate(self.conv_blocks):
            if not UNIT_RANGE[0] <= b.out_features <= UNIT_RANGE[1]:
                out.append(f"conv block {i} features {b.out_features} outside {list(UNIT_RANGE)}")
        for i, b in enumerate(self.linear_blocks):
            if not UNIT_RANGE[0] <= b.units <= UNIT_RANGE[1]:
                out.append(f"linear block {i} units {b.units} outside {list(UNIT_RANGE)}")
            if not DROPOUT_RANGE[0] <= b.dropout_p <= DROPOUT_RANGE[1]:
                out.append(f"linear block {i} dropout {b.dropout_p} outside {list(DROPOUT_RANGE)}")
        if not LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1]:
            out.append(f"learning rate {self.learning_rate} outside {list(LR_RANGE)}")
        if self.optimizer not in OPTIMIZERS:
            out.append(f"optimizer {self.optimizer!r} not in {sorted(OPTIMIZERS)}")
        h, w, c = self.input_size
        step = 2**nc
        if h < 1 or w < 1 or c < 1:
            out.append(f"input size {self.input_size} must be positive")
        elif h % step or w % step:
            out.append(f"input {h}x{w} not divisible by 2^{nc} = {step}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def with_input_side(self, side: int) -> "ModelConfig":
        return ModelConfig(
            list(self.conv_blocks), list(self.linear_blocks), (side, side, self.input_size[2]),
            self.learning_rate, self.optimizer,
        )

    @property
    def feature_side(self) -> tuple[int, int]:
        k = 2 ** len(self.conv_blocks)
        return self.input_size[0] // k, self.input_size[1] // k

    def parameter_count(self) -> int:
        total, ch = 0, self.input_size[2]
        for b in self.conv_blocks:
            total += b.out_features * (ch * KERNEL * KERNEL + 1)
            ch = b.out_features
        fh, fw = self.feature_side
        d = ch * fh * fw
        for b in self.linear_blocks:
            total += b.units * (d + 1)
            d = b.units
        return total + 2 * (d + 1)

    # key = value text, one [model] section

    def to_text(self) -> str:
        lines = [
            "[model]",
            "conv_features = " + ",".join(str(b.out_features) for b in self.conv_blocks),
            "linear_units = " + ",".join(str(b.units) for b in self.linear_blocks),
            "dropout = " + ",".join(repr(b.dropout_p) for b in self.linear_blocks),
            "input_height = %d" % self.input_size[0],
            "input_width = %d" % self.input_size[1],
            "input_channels = %d" % self.input_size[2],
            "learning_rate = " + repr(self.learning_rate),
            "optimizer = " + self.optimizer,
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        if not parser.has_section("model"):
            return cls()
        sec = parser["model"]
        default = cls()
        feats = _ints(sec.get("conv_features")) or [b.out_features for b in default.conv_blocks]
        units = _ints(sec.get("linear_units")) or [b.units for b in default.linear_blocks]
        drops = _floats(sec.get("dropout")) or [LinearBlock(1).dropout_p] * len(units)
        if len(drops) == 1:
            drops = drops * len(units)
        if len(drops) != len(units):
            raise ConfigError([f"{len(drops)} dropout values for {len(units)} linear blocks"])
        return cls(
            [ConvBlock(f) for f in feats],
            [LinearBlock(u, d) for u, d in zip(units, drops)],
            (
                sec.getint("input_height", default.input_size[0]),
                sec.getint("input_width", default.input_size[1]),
                sec.getint("input_channels", default.input_size[2]),
            ),
            sec.getfloat("learning_rate", default.learning_rate),
            sec.get("optimizer", default.optimizer).strip().lower(),
        )

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def as_dict(self) -> dict:
        return asdict(self)


def _ints(s: Optional[str]) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()] if s else []


def _floats(s: Optional[str]) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()] if s else []


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]) -> None:
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def features(self, x: Tensor, blocks: Optional[int] = None) -> Tensor:
        """Output of the first ``blocks`` conv blocks (all of them by default)."""
        cfg = self.config
        h, w, c = cfg.input_size
        if x.data.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ValueError(f"batch shape {x.shape} does not match model input (N, {c}, {h}, {w})")
        p = self.params
        n = len(cfg.conv_blocks) if blocks is None else blocks
        for i in range(n):
            x = maxpool2d(relu(conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], 1, KERNEL // 2)), 2)
        return x

    def logits(self, x: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg, p = self.config, self.params
        x = flatten(self.features(x))
        for i, blk in enumerate(cfg.linear_blocks):
            x = relu(linear(x, p[f"fc{i}.weight"], p[f"fc{i}.bias"]))
            x = dropout(x, blk.dropout_p, train=train, rng=rng)
        return linear(x, p["out.weight"], p["out.bias"])

    def forward(self, batch, train: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Class probabilities ``[N, 2]`` for a ``[N, C, H, W]`` batch."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        return softmax(self.logits(x, train, rng).data)

    def predict(self, batch) -> np.ndarray:
        return predict_from_probs(self.forward(batch, train=False))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def predict_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax over {benign, malignant}; an exact tie goes to benign."""
    probs = np.asarray(probs)
    return (probs[:, MALIGNANT] > probs[:, BENIGN]).astype(np.int64)


def _uniform(rng, shape, fan_in, dtype, scale=1.0):
    bound = scale * math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate parameters for ``config``.

    Weights are uniform in ``±sqrt(6/fan_in)`` (the head additionally scaled
    by ``HEAD_INIT_SCALE``), biases zero.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    ch = config.input_size[2]
    for i, blk in enumerate(config.conv_blocks):
        f = blk.out_features
        params[f"conv{i}.weight"] = _uniform(rng, (f, ch, KERNEL, KERNEL), ch * KERNEL * KERNEL, dtype)
        params[f"conv{i}.bias"] = Tensor(np.zeros(f, dtype=dtype), requires_grad=True)
        ch = f
    fh, fw = config.feature_side
    d = ch * fh * fw
    for i, blk in enumerate(config.linear_blocks):
        params[f"fc{i}.weight"] = _uniform(rng, (d, blk.units), d, dtype)
        params[f"fc{i}.bias"] = Tensor(np.zeros(blk.units, dtype=dtype), requires_grad=True)
        d = blk.units
    params["out.weight"] = _uniform(rng, (d, 2), d, dtype, HEAD_INIT_SCALE)
    params["out.bias"] = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)
    for name, t in params.items():
        t.name = name
    return Model(config, params)


def forward(model: Model, batch, mode: str = "eval", rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(batch, train=mode == "train", rng=rng)


def predict(model: Model, batch) -> np.ndarray:
    return model.predict(batch)


# hyperparameter search


@dataclass(frozen=True)
class SearchSpace:
    """Ranges to sample from; defaults are the full tuned ranges."""

    conv_blocks: tuple[int, int] = CONV_BLOCK_RANGE
    linear_blocks: tuple[int, int] = LINEAR_BLOCK_RANGE
    units: tuple[int, int] = UNIT_RANGE
    dropout: tuple[float, float] = DROPOUT_RANGE
    learning_rate: tuple[float, float] = LR_RANGE
    optimizers: tuple[str, ...] = ("adam", "sgd", "rmsprop")
    input_size: tuple[int, int, int] = (64, 64, 3)

    def sample(self, rng: np.random.Generator) -> ModelConfig:
        # cap conv depth so the input stays divisible after every halving
        h, w, _ = self.input_size
        depth_cap = min(_twos(h), _twos(w))
        hi = min(self.conv_blocks[1], depth_cap)
        if hi < self.conv_blocks[0]:
            raise ConfigError([f"input {h}x{w} cannot support {self.conv_blocks[0]} conv blocks"])
        nc = int(rng.integers(self.conv_blocks[0], hi + 1))
        nl = int(rng.integers(self.linear_blocks[0], self.linear_blocks[1] + 1))
        lo_u, hi_u = self.units
        conv = [ConvBlock(int(rng.integers(lo_u, hi_u + 1))) for _ in range(nc)]
        lin = [
            LinearBlock(int(rng.integers(lo_u, hi_u + 1)), float(rng.uniform(*self.dropout)))
            for _ in range(nl)
        ]
        lo_lr, hi_lr = self.learning_rate
        lr = float(math.exp(rng.uniform(math.log(lo_lr), math.log(hi_lr))))
        opt = self.optimizers[int(rng.integers(len(self.optimizers)))]
        return ModelConfig(conv, lin, self.input_size, lr, opt).validate()


def _twos(n: int) -> int:
    k = 0
    while n and n % 2 == 0:
        n //= 2
        k += 1
    return k


@dataclass
class Trial:
    index: int
    config: ModelConfig
    accuracy: float
    train_loss: float


def random_search(space: SearchSpace, trials: int, budget_epochs: int, split, seed: int = 0, batch_size: int = 32, cache=None):
    """Uniform random search; returns ``(best_config, trial_log)``.

    Trial ``i`` is sampled and trained with seed ``seed + i``. Candidates are
    ranked by final validation accuracy, earliest trial winning ties.
    """
    from tonescope.trainer import TrainConfig, train

    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not split.train or not split.validation:
        raise ValueError("random search needs a non-empty dataset")
    log: list[Trial] = []
    for i in range(trials):
        cfg = space.sample(np.random.default_rng(seed + i))
        model = build_model(cfg, seed=seed + i)
        tc = TrainConfig(max_epochs=budget_epochs, batch_size=batch_size, seed=seed + i, early_stop_window=None)
        hist = train(model, split, tc, cache=cache)
        last = hist.epochs[-1]
        log.append(Trial(i, cfg, last.accuracy, last.train_loss))
    best = max(log, key=lambda t: (t.accuracy, -t.index))
    return best.config, log
