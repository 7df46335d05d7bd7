import numpy as np
import pytest

from tonescope.data import CellCounts, ImageCache, ImageRecord, generate_fixture, load_metadata
from tonescope.model import ConvBlock, LinearBlock, ModelConfig, build_model
from tonescope.sampler import read_manifest, split
from tonescope.trainer import (
    HISTORY_FIELDS,
    TrainConfig,
    TrainingError,
    early_stop_check,
    evaluate,
    history_csv,
    read_history_csv,
    save_history,
    train,
)


def test_early_stop_examples():
    ramp = [1.0 - 0.01 * i for i in range(40)]
    assert early_stop_check(ramp, 25, 1e-3) is False
    assert early_stop_check([0.3] * 25, 25) is True
    assert early_stop_check([0.1 + 0.01 * i for i in range(30)], 25) is True
    with pytest.raises(ValueError, match="larger"):
        early_stop_check([1.0] * 5, 25)
    with pytest.raises(ValueError):
        early_stop_check([1.0] * 5, 1)


def test_early_stop_noisy_flat_simulation():
    stops = sum(
        early_stop_check(0.5 + 0.01 * np.random.default_rng(seed).standard_normal(25), 25)
        for seed in range(1000)
    )
    assert stops >= 950


def test_train_config_round_trip():
    cfg = TrainConfig(max_epochs=7, batch_size=5, seed=9, early_stop_window=None, slope_tolerance=2e-4, epsilon=0.1)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert TrainConfig.from_text("") == TrainConfig()
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(early_stop_window=1).validate()


class StubCache:
    """A batch is the numeric suffix of each record id (8 for the untoned extra)."""

    def stack(self, records):
        return np.array([int(r.id[1:]) if r.id[1:].isdigit() else 8 for r in records])


class Stub:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, batch):
        return self.fn(batch)


EIGHT = [
    ImageRecord(f"r{i}", d, f, "x")
    for i, (d, f) in enumerate(
        [("malignant", "IV"), ("malignant", "III"), ("malignant", "IV"), ("benign", "III"),
         ("malignant", "I"), ("benign", "II"), ("benign", "I"), ("benign", "II")]
    )
]


def test_evaluate_all_benign_stub():
    rep = evaluate(Stub(lambda b: np.zeros(len(b), int)), EIGHT, StubCache(), control=np.arange(8) % 2 == 0)
    assert rep.selection_rates == {"dark": 0.0, "light": 0.0}
    assert not rep.disparate_impact.defined
    assert rep.accuracy == 4 / 8


def test_evaluate_truth_stub():
    truth = np.array([r.label for r in EIGHT])
    model = Stub(lambda b: truth[b])
    rep = evaluate(model, EIGHT, StubCache(), batch_size=3, control=np.arange(8) % 2 == 0)
    # dark prevalence 3/4, light prevalence 1/4
    assert rep.accuracy == 1.0 and rep.disparate_impact.value == 3.0
    again = evaluate(model, EIGHT, StubCache(), batch_size=3, control=np.arange(8) % 2 == 0)
    assert again.to_json() == rep.to_json()


def test_evaluate_excludes_untoned_from_groups():
    recs = EIGHT + [ImageRecord("u", "malignant", "V", "x")]
    truth = np.array([r.label for r in recs])
    rep = evaluate(Stub(lambda b: truth[b]), recs, StubCache(), rng=np.random.default_rng(0))
    assert rep.grouped.total == 8 and rep.grouped.excluded == 1 and rep.accuracy == 1.0
    with pytest.raises(ValueError):
        evaluate(Stub(lambda b: b), [], StubCache())


def tiny_config(lr=3e-3):
    return ModelConfig([ConvBlock(16), ConvBlock(16)], [LinearBlock(16, 0.2), LinearBlock(16, 0.2)], (16, 16, 3), learning_rate=lr)


@pytest.fixture(scope="module")
def blob_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("blob")
    generate_fixture(root, CellCounts(10, 10, 10, 10), "brightness_shift", "blob", seed=0, side=16)
    return split(load_metadata(root / "metadata.csv"), rng=np.random.default_rng(0), stratify=True)


def run(split_, epochs, seed=0, window=None, lr=3e-3):
    model = build_model(tiny_config(lr), seed=seed)
    cfg = TrainConfig(max_epochs=epochs, batch_size=8, seed=seed, early_stop_window=window)
    return train(model, split_, cfg, ImageCache(16))


def test_one_epoch_history(blob_split):
    h = run(blob_split, 1)
    assert len(h.epochs) == 1 and h.epochs[0].epoch == 1 and h.epochs[0].train_loss >= 0
    assert h.final.grouped.total == len(blob_split.validation)


def test_learnable_fixture(blob_split):
    h = run(blob_split, 40)
    losses = [e.train_loss for e in h.epochs]
    assert [e.epoch for e in h.epochs] == list(range(1, 41))
    assert h.final.train_loss < 0.3 and h.final.accuracy > 0.9
    # trailing 5-epoch window means mostly non-increasing
    means = [np.mean(losses[i : i + 5]) for i in range(0, 40, 5)]
    rises = sum(b > a for a, b in zip(means, means[1:]))
    assert rises <= 1
    for e in h.epochs:
        assert e.grouped.total + e.grouped.excluded == len(blob_split.validation)


def test_history_replay_bytes(blob_split, tmp_path):
    a, b = run(blob_split, 3, seed=4), run(blob_split, 3, seed=4)
    assert history_csv(a) == history_csv(b)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert history_csv(run(blob_split, 3, seed=5)) != history_csv(a)


def test_early_stop_triggers(blob_split):
    h = run(blob_split, 60, window=5, lr=3e-3)
    assert h.stopped_early and len(h.epochs) < 60


def test_non_finite_loss_aborts(blob_split):
    model = build_model(tiny_config(), seed=0)
    model.params["out.bias"].data[:] = np.nan
    with pytest.raises(TrainingError) as err:
        train(model, blob_split, TrainConfig(max_epochs=2, batch_size=8), ImageCache(16))
    assert err.value.epoch == 1 and err.value.batch == 0


def test_train_rejects_bad_inputs(blob_split):
    model = build_model(tiny_config(), seed=0)
    with pytest.raises(ValueError, match="cache side"):
        train(model, blob_split, TrainConfig(max_epochs=1), ImageCache(32))
    with pytest.raises(ValueError, match="non-empty"):
        train(model, type(blob_split)(blob_split.train, []), TrainConfig(max_epochs=1))


def test_save_history_layout(blob_split, tmp_path):
    h = run(blob_split, 2)
    out = save_history(h, tmp_path / "run", blob_split.train, blob_split.validation)
    for name in ("history.csv", "report.json", "manifest.train", "manifest.val", "config.txt", "params.npz"):
        assert (out / name).exists(), name
    rows = read_history_csv(out / "history.csv")
    assert len(rows) == 2 and tuple(rows[0]) == HISTORY_FIELDS
    assert read_manifest(out / "manifest.val") == [r.id for r in blob_split.validation]
    assert TrainConfig.from_text((out / "config.txt").read_text()) == h.train_config
    assert ModelConfig.from_text((out / "config.txt").read_text()) == h.model_config
