import numpy as np
import pytest

from tonescope.data import CellCounts, generate_fixture, load_metadata
from tonescope.engine import Tensor, check_tensors, softmax_cross_entropy
from tonescope.model import (
    ConfigError,
    ConvBlock,
    LinearBlock,
    ModelConfig,
    SearchSpace,
    build_model,
    forward,
    predict_from_probs,
    random_search,
)
from tonescope.sampler import split


def small_config(side=32, **kw):
    return ModelConfig(
        [ConvBlock(16), ConvBlock(16)], [LinearBlock(16, 0.2), LinearBlock(16, 0.2)], (side, side, 3), **kw
    )


def test_default_config_is_tuned_architecture():
    cfg = ModelConfig()
    assert len(cfg.conv_blocks) == 3 and len(cfg.linear_blocks) == 2
    assert cfg.optimizer == "adam" and cfg.learning_rate == 1e-5
    assert cfg.input_size == (224, 224, 3)


def test_default_feature_map_is_28():
    model = build_model(ModelConfig(), seed=0)
    feats = model.features(Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32)))
    assert feats.shape == (1, 128, 28, 28)


@pytest.mark.parametrize("blocks", [2, 3, 4])
def test_each_block_halves_side(blocks):
    cfg = ModelConfig([ConvBlock(16)] * blocks, [LinearBlock(16)] * 2, (64, 64, 3))
    model = build_model(cfg, seed=1)
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)).astype(np.float32))
    for k in range(blocks + 1):
        assert model.features(x, k).shape[2:] == (64 // 2**k, 64 // 2**k)


def test_one_conv_block_rejected():
    cfg = ModelConfig(conv_blocks=[ConvBlock(32)])
    with pytest.raises(ConfigError, match="conv block count 1"):
        build_model(cfg)


def test_every_violation_named():
    cfg = ModelConfig(
        [ConvBlock(8), ConvBlock(300)], [LinearBlock(16, 0.9)], (30, 30, 3), learning_rate=1.0, optimizer="lbfgs"
    )
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    text = " ".join(err.value.problems)
    for needle in ("features 8", "features 300", "linear block count 1", "dropout 0.9", "learning rate", "optimizer", "divisible"):
        assert needle in text


def test_same_seed_same_bytes():
    a, b = build_model(small_config(), seed=3), build_model(small_config(), seed=3)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    c = build_model(small_config(), seed=4)
    assert a.params["conv0.weight"].data.tobytes() != c.params["conv0.weight"].data.tobytes()


@pytest.mark.parametrize(
    "cfg, expected",
    [
        # conv 3->16: 16*(27+1)=448; 16->16: 16*(144+1)=2320; flatten 16*8*8=1024
        # fc 1024->16: 16*1025=16400; 16->16: 272; head 16->2: 34
        (small_config(32), 448 + 2320 + 16400 + 272 + 34),
        # conv 3->32: 896; 32->64: 18496; 64->128: 73856; flatten 128*4*4=2048
        # fc 2048->128: 262272; 128->64: 8256; head: 130
        (ModelConfig().with_input_side(32), 896 + 18496 + 73856 + 262272 + 8256 + 130),
        # conv 3->20: 560; 20->24: 4344; 24->28: 6076; 28->32: 8096; flatten 32*1*1
        # fc 32->17: 561; 17->18: 324; 18->19: 361; head 19->2: 40
        (
            ModelConfig(
                [ConvBlock(20), ConvBlock(24), ConvBlock(28), ConvBlock(32)],
                [LinearBlock(17), LinearBlock(18), LinearBlock(19)],
                (16, 16, 3),
            ),
            560 + 4344 + 6076 + 8096 + 561 + 324 + 361 + 40,
        ),
    ],
)
def test_parameter_count_hand_count(cfg, expected):
    assert cfg.parameter_count() == expected
    assert build_model(cfg).parameter_count() == expected


def test_fresh_model_near_uniform_over_100_seeds():
    cfg = ModelConfig().with_input_side(32)
    x = np.random.default_rng(0).uniform(0, 1, (4, 3, 32, 32))
    for seed in range(100):
        probs = build_model(cfg, seed=seed, dtype=np.float64).forward(x)
        assert probs.min() >= 0.35 and probs.max() <= 0.65, seed
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_eval_deterministic_train_random():
    model = build_model(small_config(), seed=0)
    x = np.random.default_rng(1).uniform(size=(3, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward(model, x, "eval"), forward(model, x, "eval"))
    a = forward(model, x, "train", rng=np.random.default_rng(1))
    b = forward(model, x, "train", rng=np.random.default_rng(2))
    assert not np.array_equal(a, b)


def test_forward_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        build_model(small_config(32)).forward(np.zeros((1, 3, 64, 64), dtype=np.float32))


@pytest.mark.parametrize("probs, label", [([0.9, 0.1], 0), ([0.1, 0.9], 1), ([0.5, 0.5], 0)])
def test_predict_rule(probs, label):
    assert predict_from_probs(np.array([probs]))[0] == label


def test_full_model_gradcheck_small():
    model = build_model(small_config(16), seed=5, dtype=np.float64)
    x = Tensor(np.random.default_rng(5).uniform(size=(2, 3, 16, 16)))
    f = lambda: softmax_cross_entropy(model.logits(x, train=True, rng=np.random.default_rng(9)), [0, 1])[0]  # noqa: E731
    skipped = []
    errs = check_tensors(f, model.parameters(), eps=1e-4, max_coords=40, rng=np.random.default_rng(0), skipped=skipped)
    assert len(skipped) == 0
    assert max(errs.values()) < 1e-4


def test_config_text_round_trip(tmp_path):
    cfg = ModelConfig(
        [ConvBlock(16), ConvBlock(48), ConvBlock(200)], [LinearBlock(64, 0.3), LinearBlock(32, 0.45)],
        (64, 64, 3), learning_rate=3e-4, optimizer="rmsprop",
    )
    cfg.save(tmp_path / "m.txt")
    assert ModelConfig.load(tmp_path / "m.txt") == cfg


def test_search_space_sampling_within_ranges():
    space = SearchSpace()
    lrs = []
    for seed in range(200):
        cfg = space.sample(np.random.default_rng(seed))
        assert cfg.problems() == []
        lrs.append(cfg.learning_rate)
    # log-uniform: about half the mass below the geometric mean 1e-3
    below = np.mean(np.array(lrs) < 1e-3)
    assert 0.35 < below < 0.65


@pytest.fixture(scope="module")
def separable_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("sep")
    generate_fixture(root, CellCounts(12, 12, 12, 12), "none", "blob", seed=2, side=16)
    return split(load_metadata(root / "metadata.csv"), rng=np.random.default_rng(0), stratify=True)


TINY = SearchSpace(
    conv_blocks=(2, 2), linear_blocks=(2, 2), units=(16, 24), learning_rate=(1e-3, 1e-2),
    optimizers=("adam",), input_size=(16, 16, 3),
)


def test_random_search_single_trial(separable_split):
    best, log = random_search(TINY, trials=1, budget_epochs=2, split=separable_split, seed=11, batch_size=16)
    assert len(log) == 1
    assert best == TINY.sample(np.random.default_rng(11)) == log[0].config


def test_random_search_deterministic_and_learns(separable_split):
    best, log = random_search(TINY, trials=3, budget_epochs=25, split=separable_split, seed=0, batch_size=16)
    _, log2 = random_search(TINY, trials=3, budget_epochs=25, split=separable_split, seed=0, batch_size=16)
    assert [(t.config, t.accuracy, t.train_loss) for t in log] == [(t.config, t.accuracy, t.train_loss) for t in log2]
    majority = 0.5
    assert max(t.accuracy for t in log) > majority
    assert best == max(log, key=lambda t: (t.accuracy, -t.index)).config


def test_random_search_rejects_bad_input(separable_split):
    with pytest.raises(ValueError):
        random_search(TINY, trials=0, budget_epochs=1, split=separable_split)
    empty = type(separable_split)([], [], 0)
    with pytest.raises(ValueError, match="non-empty"):
        random_search(TINY, trials=1, budget_epochs=1, split=empty)
