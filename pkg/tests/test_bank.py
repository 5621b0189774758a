import json
import os

import pytest
import torch

from profpipe import bank as bank_module
from profpipe.bank import (
    ALL_CELLS,
    ClassifierBank,
    ViewClassifier,
    cell_file_name,
    classify_view,
    load_bank,
    retrain_cell,
    save_bank,
    train_bank_cell,
    train_classifier_bank,
    train_pooled_classifier,
)
from profpipe.dataset import load_clips
from profpipe.exceptions import EmptyCellError, MissingCheckpointError
from profpipe.features import ClipClassifier
from profpipe.models import EncoderConfig, Scenario, TrainConfig, View

BANK_ENCODER = EncoderConfig(feature_dim=8, hidden_dim=16, crop_size=12, seed=5)
BANK_TRAINING = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=4, seed=7)


@pytest.fixture(scope="module")
def trained_bank(tiny_dataset):
    _, _, train, val = tiny_dataset
    return train_classifier_bank(train, BANK_ENCODER, BANK_TRAINING, val)


@pytest.fixture(scope="module")
def saved_bank(trained_bank, tmp_path_factory):
    directory = str(tmp_path_factory.mktemp("bank"))
    save_bank(trained_bank, directory)
    return directory


def _read_cells(directory):
    cells = {}
    for scenario, view in ALL_CELLS:
        with open(os.path.join(directory, cell_file_name(scenario, view)), "rb") as f:
            cells[(scenario, view)] = f.read()
    return cells


def test_bank_has_thirty_distinct_cells(trained_bank):
    assert len(trained_bank) == 30
    assert trained_bank.is_complete
    assert trained_bank.missing_cells() == []
    assert len({id(trained_bank[k]) for k in ALL_CELLS}) == 30
    assert len(trained_bank.curves) == 30

    for (scenario, view), classifier in trained_bank.items():
        assert isinstance(classifier, ViewClassifier)
        assert (classifier.scenario, classifier.view) == (scenario, view)


def test_cells_do_not_share_parameters(trained_bank):
    ego = trained_bank[(Scenario.Dance, View.Ego)]
    exo = trained_bank[(Scenario.Dance, View.Exo1)]

    assert not torch.equal(ego.head.weight, exo.head.weight)
    assert ego.encoder is not exo.encoder


def test_classify_view_routes_to_exactly_one_cell(trained_bank, clip_factory, mocker):
    spy = mocker.spy(bank_module, "classify_frames")
    clip = clip_factory()

    logits = classify_view(trained_bank, Scenario.Music, View.Exo3, clip.streams[View.Exo3])

    assert logits.shape == (4,)
    assert spy.call_count == 1
    assert spy.call_args[0][0] is trained_bank[(Scenario.Music, View.Exo3)]


def test_classify_view_matches_the_stored_classifier(trained_bank, clip_factory):
    clip = clip_factory()
    classifier = trained_bank[(Scenario.Soccer, View.Ego)]

    frames = bank_module.prepare_stream(clip.streams[View.Ego], 16, classifier.encoder_config, interpolate=False)
    with torch.no_grad():
        direct = classifier(frames[None])[0]

    torch.testing.assert_close(classify_view(trained_bank, Scenario.Soccer, View.Ego, clip.streams[View.Ego]), direct)


def test_classify_view_asserts_on_unknown_cell(clip_factory):
    with pytest.raises(AssertionError, match="s0_vego"):
        classify_view(ClassifierBank(), Scenario.Dance, View.Ego, clip_factory().streams[View.Ego])


def test_register_requires_four_proficiency_logits():
    with pytest.raises(ValueError):
        ClassifierBank().register(Scenario.Dance, View.Ego, ClipClassifier(BANK_ENCODER, num_classes=6))


def test_bank_training_is_deterministic(tiny_dataset, trained_bank):
    _, _, train, _ = tiny_dataset
    clips = load_clips(train, train.by_scenario(Scenario.Cooking))

    model, _ = train_bank_cell(Scenario.Cooking, View.Exo2, clips, [], BANK_ENCODER, BANK_TRAINING)

    for a, b in zip(model.parameters(), trained_bank[(Scenario.Cooking, View.Exo2)].parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_saved_bank_roundtrips(saved_bank, trained_bank, clip_factory):
    loaded = load_bank(saved_bank)
    stream = clip_factory().streams[View.Exo4]

    assert loaded.is_complete
    for key in [(Scenario.Dance, View.Ego), (Scenario.Basketball, View.Exo4)]:
        torch.testing.assert_close(
            classify_view(loaded, key[0], key[1], stream), classify_view(trained_bank, key[0], key[1], stream)
        )

    with open(os.path.join(saved_bank, "index.json")) as f:
        assert f.read().count('"file"') == 30
    assert os.path.isfile(os.path.join(saved_bank, "curves", "s0_vego.csv"))


def test_retraining_one_cell_leaves_the_others_untouched(saved_bank, tiny_dataset, tmp_path):
    _, _, train, _ = tiny_dataset
    before = _read_cells(saved_bank)

    bank = load_bank(saved_bank)
    clips = load_clips(train, train.by_scenario(Scenario.Music))[:-1]
    retrain_cell(bank, Scenario.Music, View.Exo1, clips, BANK_ENCODER, BANK_TRAINING.copy(update={"seed": 99}))
    save_bank(bank, str(tmp_path))

    after = _read_cells(str(tmp_path))

    changed = [key for key in ALL_CELLS if before[key] != after[key]]
    assert changed == [(Scenario.Music, View.Exo1)]


def test_load_bank_without_index_names_it(tmp_path):
    with pytest.raises(MissingCheckpointError, match="index.json"):
        load_bank(str(tmp_path))


def test_load_bank_rejects_incomplete_index(saved_bank, tmp_path):
    with open(os.path.join(saved_bank, "index.json")) as f:
        index = json.load(f)
    index["cells"] = [c for c in index["cells"] if c["file"] != "s5_vexo4.ckpt"]
    (tmp_path / "index.json").write_text(json.dumps(index))
    for name in os.listdir(saved_bank):
        if name.endswith(".ckpt"):
            with open(os.path.join(saved_bank, name), "rb") as src:
                (tmp_path / name).write_bytes(src.read())

    with pytest.raises(MissingCheckpointError, match="s5_vexo4"):
        load_bank(str(tmp_path))


def test_save_bank_refuses_incomplete_bank(tmp_path):
    bank = ClassifierBank({(Scenario.Dance, View.Ego): ViewClassifier(BANK_ENCODER, Scenario.Dance, View.Ego)})

    with pytest.raises(ValueError, match="missing cells"):
        save_bank(bank, str(tmp_path))


def test_empty_cell_is_an_error(clip_factory):
    clips = [clip_factory(scenario=Scenario.Dance)]

    with pytest.raises(EmptyCellError, match="Soccer"):
        train_bank_cell(Scenario.Soccer, View.Ego, clips, [], BANK_ENCODER, BANK_TRAINING)


def test_small_cell_is_trained_with_a_warning(clip_factory, caplog):
    clips = [clip_factory(sample_id=f"dance-{i}", scenario=Scenario.Dance, seed=i) for i in range(2)]

    with caplog.at_level("WARNING", logger="profpipe.bank"):
        model, curves = train_bank_cell(Scenario.Dance, View.Ego, clips, [], BANK_ENCODER, BANK_TRAINING)

    assert len(curves) == 2
    assert "only 2 training clips" in caplog.text
    assert "EarlyExpert" in caplog.text


def test_pooled_bank_shares_one_model_across_cells(tiny_dataset):
    _, _, train, _ = tiny_dataset

    pooled = train_pooled_classifier(train, BANK_ENCODER, BANK_TRAINING.copy(update={"epochs": 1}))

    assert pooled.is_complete
    assert len({id(pooled[k]) for k in ALL_CELLS}) == 1
    assert len(pooled.mean_curves()) == 1


def test_mean_curves_average_every_cell(trained_bank):
    curves = trained_bank.mean_curves()

    assert len(curves) == 2
    expected = sum(trained_bank.curves[k].records[0].train_total for k in ALL_CELLS) / 30
    assert curves.records[0].train_total == pytest.approx(expected)
    assert not curves.has_sub_losses


def test_parallel_bank_training_matches_serial(tiny_dataset, trained_bank):
    _, _, train, val = tiny_dataset

    parallel = train_classifier_bank(train, BANK_ENCODER, BANK_TRAINING, val, workers=5)

    for key in ALL_CELLS:
        for a, b in zip(parallel[key].parameters(), trained_bank[key].parameters()):
            torch.testing.assert_close(a, b, rtol=0, atol=0)
        assert parallel.curves[key] == trained_bank.curves[key]
