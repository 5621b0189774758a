import pytest
import torch

from profpipe.checkpoint import save_checkpoint
from profpipe.dataset import MultiViewClip, load_clips
from profpipe.exceptions import CorruptContainerError, InvalidInputError, MissingCheckpointError
from profpipe.models import EXO_VIEWS, VIEWS, Proficiency, Scenario, TrainConfig, ViewFusion
from profpipe.multitask import (
    MultiTaskModel,
    cross_entropy,
    load_multitask,
    make_multitask_loss_fn,
    multitask_forward,
    multitask_loss,
    predict_multitask,
    predict_multitask_record,
    prepare_clip_views,
    save_multitask,
    train_multitask,
)


@pytest.fixture
def logits():
    generator = torch.Generator().manual_seed(0)
    return (
        torch.randn(5, 4, generator=generator, dtype=torch.float64),
        torch.randn(5, 6, generator=generator, dtype=torch.float64),
    )


Y_PROF = torch.tensor([0, 1, 2, 3, 1])
Y_SCEN = torch.tensor([5, 0, 2, 4, 1])


def test_cross_entropy_matches_log_softmax():
    logits = torch.tensor([[2.0, 0.5, -1.0, 0.0]], dtype=torch.float64)

    expected = -torch.log_softmax(logits, dim=-1)[0, 2]

    assert cross_entropy(logits, [2]).item() == pytest.approx(expected.item(), abs=1e-12)
    assert cross_entropy(logits[0], 2).item() == pytest.approx(expected.item(), abs=1e-12)


def test_cross_entropy_is_stable_for_large_logits():
    loss = cross_entropy(torch.tensor([1000.0, 0.0, 0.0, 0.0], dtype=torch.float64), 0)

    assert torch.isfinite(loss)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize(
    "logits,labels",
    [
        (torch.zeros(2, 4), [0, 4]),
        (torch.zeros(2, 4), [0]),
        (torch.zeros(2, 1), [0, 0]),
        (torch.tensor([[float("nan"), 0.0]]), [0]),
        (torch.zeros(2, 2, 2), [0, 0]),
    ],
)
def test_cross_entropy_rejects_invalid_input(logits, labels):
    with pytest.raises(InvalidInputError):
        cross_entropy(logits, labels)


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_multitask_loss_is_the_alpha_weighted_sum(logits, alpha):
    parts = multitask_loss(logits[0], Y_PROF, logits[1], Y_SCEN, alpha)

    total, l_prof, l_scen = parts.as_floats()

    assert total == pytest.approx(alpha * l_prof + (1 - alpha) * l_scen, abs=1e-12)
    assert l_prof == pytest.approx(cross_entropy(logits[0], Y_PROF).item(), abs=1e-12)
    assert l_scen == pytest.approx(cross_entropy(logits[1], Y_SCEN).item(), abs=1e-12)


def test_multitask_loss_rejects_alpha_out_of_range(logits):
    with pytest.raises(InvalidInputError):
        multitask_loss(logits[0], Y_PROF, logits[1], Y_SCEN, 1.5)


def test_multitask_loss_gradients_match_finite_differences(logits):
    logits_prof = logits[0].clone().requires_grad_(True)
    logits_scen = logits[1].clone().requires_grad_(True)

    assert torch.autograd.gradcheck(
        lambda p, s: multitask_loss(p, Y_PROF, s, Y_SCEN, 0.3).total, (logits_prof, logits_scen), eps=1e-6, atol=1e-6
    )


def test_multitask_loss_gradients_match_central_differences():
    generator = torch.Generator().manual_seed(1)
    step = 1e-5

    for _ in range(50):
        logits_prof = torch.randn(4, generator=generator, dtype=torch.float64) * 3
        logits_scen = torch.randn(6, generator=generator, dtype=torch.float64) * 3
        y_prof = int(torch.randint(0, 4, (1,), generator=generator))
        y_scen = int(torch.randint(0, 6, (1,), generator=generator))
        alpha = float(torch.rand(1, generator=generator, dtype=torch.float64))

        def _loss(p, s):
            return multitask_loss(p, y_prof, s, y_scen, alpha).total

        p, s = logits_prof.clone().requires_grad_(True), logits_scen.clone().requires_grad_(True)
        _loss(p, s).backward()

        for logits, analytic, other_first in ((logits_prof, p.grad, False), (logits_scen, s.grad, True)):
            numeric = torch.empty_like(logits)
            for k in range(logits.shape[0]):
                plus, minus = logits.clone(), logits.clone()
                plus[k] += step
                minus[k] -= step
                if other_first:
                    numeric[k] = (_loss(logits_prof, plus) - _loss(logits_prof, minus)) / (2 * step)
                else:
                    numeric[k] = (_loss(plus, logits_scen) - _loss(minus, logits_scen)) / (2 * step)

            torch.testing.assert_close(analytic, numeric, rtol=0, atol=1e-6)


def test_cross_entropy_gradient_is_softmax_minus_one_hot():
    logits = torch.tensor([0.3, -1.2, 2.0, 0.1], dtype=torch.float64, requires_grad=True)

    cross_entropy(logits, 1).backward()

    expected = torch.softmax(logits.detach(), dim=-1)
    expected[1] -= 1.0
    torch.testing.assert_close(logits.grad, expected, rtol=0, atol=1e-12)


def test_clip_views_are_stacked_in_canonical_order(clip_factory, tiny_encoder_config):
    views = prepare_clip_views(clip_factory(), tiny_encoder_config)

    assert views.shape == (len(VIEWS), 8, 12, 12, 3)


@pytest.mark.parametrize("view_fusion", list(ViewFusion))
def test_model_outputs_both_heads(clip_factory, tiny_encoder_config, view_fusion):
    model = MultiTaskModel(tiny_encoder_config, view_fusion)
    views = torch.stack([prepare_clip_views(clip_factory(seed=s), tiny_encoder_config) for s in range(3)])

    logits_prof, logits_scen = model(views)

    assert logits_prof.shape == (3, 4)
    assert logits_scen.shape == (3, 6)


def test_views_as_samples_trains_on_every_view(clip_factory, tiny_encoder_config):
    model = MultiTaskModel(tiny_encoder_config, ViewFusion.ViewsAsSamples)
    views = prepare_clip_views(clip_factory(), tiny_encoder_config)[None]
    y_prof, y_scen = torch.tensor([2]), torch.tensor([1])

    model.train()
    loss = make_multitask_loss_fn(0.5)(model, (views, y_prof, y_scen))

    per_view_prof, per_view_scen = model.per_view_logits(views)
    expected = multitask_loss(per_view_prof[0], y_prof.repeat(5), per_view_scen[0], y_scen.repeat(5), 0.5)
    assert loss.total.item() == pytest.approx(expected.total.item(), rel=1e-6)


def test_prediction_record_carries_a_probability_vector(clip_factory, tiny_encoder_config):
    model = MultiTaskModel(tiny_encoder_config).eval()
    clip = clip_factory(sample_id="music-0001", scenario=Scenario.Music, proficiency=Proficiency.LateExpert)

    record = predict_multitask_record(model, clip)
    label, scenario = predict_multitask(model, clip)

    assert record.method == "multitask"
    assert record.true_scenario == Scenario.Music
    assert record.labels == {"multitask": label}
    assert record.predicted_scenario == scenario
    assert sum(record.fused["multitask"]) == pytest.approx(1.0, abs=1e-9)


def test_checkpoint_roundtrip(tmp_path, clip_factory, tiny_encoder_config):
    model = MultiTaskModel(tiny_encoder_config, ViewFusion.ViewsAsSamples).eval()
    path = str(tmp_path / "multitask.ckpt")

    save_multitask(model, path, TrainConfig(alpha=0.25))
    loaded, train_config = load_multitask(path)

    views = prepare_clip_views(clip_factory(), tiny_encoder_config)[None]
    with torch.no_grad():
        for a, b in zip(model(views), loaded(views)):
            torch.testing.assert_close(a, b, rtol=0, atol=0)
    assert loaded.view_fusion == ViewFusion.ViewsAsSamples
    assert train_config.alpha == 0.25


def test_load_multitask_rejects_missing_or_foreign_checkpoints(tmp_path, tiny_encoder_config):
    with pytest.raises(MissingCheckpointError):
        load_multitask(str(tmp_path / "none.ckpt"))

    path = str(tmp_path / "cell.ckpt")
    save_checkpoint(path, MultiTaskModel(tiny_encoder_config), {"kind": "bank-cell"})

    with pytest.raises(CorruptContainerError, match="bank-cell"):
        load_multitask(path)


def test_train_multitask_logs_both_sub_losses(tiny_dataset, tiny_encoder_config, tiny_train_config, tmp_path):
    _, _, train, val = tiny_dataset
    train_clips = load_clips(train, train.entries[:8])
    val_clips = load_clips(val, val.entries[:4])
    curves_path = str(tmp_path / "loss_curves.csv")

    model, curves = train_multitask(
        train_clips, val_clips, tiny_encoder_config, tiny_train_config, curves_path=curves_path
    )
    again, _ = train_multitask(train_clips, val_clips, tiny_encoder_config, tiny_train_config)

    assert len(curves) == 2
    assert curves.has_sub_losses
    assert all(r.val_prof is not None and r.val_scen is not None for r in curves.records)
    for a, b in zip(model.parameters(), again.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    with open(curves_path) as f:
        assert len(f.read().splitlines()) == 3


def _same_stream_clip(clip_factory) -> MultiViewClip:
    clip = clip_factory()
    stream = clip.streams[VIEWS[0]]
    return MultiViewClip(clip.sample_id, clip.scenario, clip.proficiency, {v: stream.copy() for v in VIEWS})


def test_five_identical_views_fuse_to_the_single_view_feature(clip_factory, tiny_encoder_config):
    model = MultiTaskModel(tiny_encoder_config).eval()
    clip = _same_stream_clip(clip_factory)

    with torch.no_grad():
        logits_prof, logits_scen = multitask_forward(model, clip)
        single = model.pooled_views(prepare_clip_views(clip, tiny_encoder_config)[None, :1])[0, 0]

        torch.testing.assert_close(logits_prof, model.prof_head(single), rtol=0, atol=1e-6)
        torch.testing.assert_close(logits_scen, model.scen_head(single), rtol=0, atol=1e-6)


def test_zero_head_weights_give_the_bias_as_logits(clip_factory, tiny_encoder_config):
    model = MultiTaskModel(tiny_encoder_config).eval()
    with torch.no_grad():
        model.prof_head.weight.zero_()
        model.scen_head.weight.zero_()

        logits_prof, logits_scen = multitask_forward(model, clip_factory())

    torch.testing.assert_close(logits_prof, model.prof_head.bias.detach(), rtol=0, atol=0)
    torch.testing.assert_close(logits_scen, model.scen_head.bias.detach(), rtol=0, atol=0)


def test_logits_match_a_naive_matrix_product(clip_factory, tiny_encoder_config):
    model = MultiTaskModel(tiny_encoder_config).eval()
    clip = clip_factory(seed=4)

    with torch.no_grad():
        logits_prof, logits_scen = multitask_forward(model, clip)
        fused = model.pooled_views(prepare_clip_views(clip, tiny_encoder_config)[None])[0].mean(dim=0).tolist()

    for logits, head in ((logits_prof, model.prof_head), (logits_scen, model.scen_head)):
        weight, bias = head.weight.tolist(), head.bias.tolist()
        expected = [sum(w * f for w, f in zip(row, fused)) + b for row, b in zip(weight, bias)]

        assert logits.tolist() == pytest.approx(expected, abs=1e-5)


@pytest.mark.parametrize("view_fusion", list(ViewFusion))
def test_logits_do_not_depend_on_the_order_of_exo_views(clip_factory, tiny_encoder_config, view_fusion):
    model = MultiTaskModel(tiny_encoder_config, view_fusion).eval()
    clip = clip_factory(seed=2)
    rotated = EXO_VIEWS[1:] + EXO_VIEWS[:1]
    streams = {VIEWS[0]: clip.streams[VIEWS[0]]}
    streams.update({target: clip.streams[source] for target, source in zip(EXO_VIEWS, rotated)})
    permuted = MultiViewClip(clip.sample_id, clip.scenario, clip.proficiency, streams)

    with torch.no_grad():
        for a, b in zip(multitask_forward(model, clip), multitask_forward(model, permuted)):
            torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


def test_all_equal_logits_predict_novice(clip_factory, tiny_encoder_config):
    model = MultiTaskModel(tiny_encoder_config).eval()
    with torch.no_grad():
        for head in (model.prof_head, model.scen_head):
            head.weight.zero_()
            head.bias.fill_(0.5)

    label, scenario = predict_multitask(model, clip_factory(scenario=Scenario.Soccer))

    assert label == Proficiency.Novice
    assert scenario == Scenario(0)
