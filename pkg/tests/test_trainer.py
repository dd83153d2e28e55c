import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from res3d.blocks import assemble_network, named_spec
from res3d.datapipe import AugmentConfig, DatasetManifest, FrameSource, generate_synthetic_dataset
from res3d.errors import (
    CheckpointChecksumError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError,
    ConfigurationError, NumericError,
)
from res3d.layers import Parameter
from res3d.trainer import (
    CHECKPOINT_MAGIC, OptimizerState, TrainConfig, _batches, fit, load_checkpoint, plateau_update,
    save_checkpoint, sgd_step, train_epoch, validate,
)

AUG = AugmentConfig(clip_len=8, output_size=32)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return generate_synthetic_dataset(root, num_classes=3, videos_per_class=3, frames_per_video=10,
                                      frame_size=(24, 32), seed=0)


def _net(seed=0, **kw):
    return assemble_network(named_spec("miniature", num_classes=3, **kw), seed=seed)


def _snapshot(net):
    return ({k: p.data.copy() for k, p in net.parameters().items()},
            {k: v.copy() for k, v in net.buffers().items()})


def _same(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------


def _step(p, g, state, **cfg):
    params = {"w": p}
    sgd_step(params, {"w": np.array([g])}, state, TrainConfig(**cfg))


def test_sgd_vanilla_step():
    p = Parameter(np.array([1.0]))
    state = OptimizerState(lr_initial=0.1)
    _step(p, 1.0, state, momentum=0.0, weight_decay=0.0)
    assert p.data[0] == 1.0 - 0.1 * 1.0
    assert p.data[0] == pytest.approx(0.9)


def test_sgd_momentum_two_steps():
    p = Parameter(np.array([0.0]))
    state = OptimizerState(lr_initial=0.1)
    _step(p, 1.0, state, momentum=0.9, weight_decay=0.0)
    assert state.velocity["w"][0] == 1.0
    assert p.data[0] == -0.1
    _step(p, 1.0, state, momentum=0.9, weight_decay=0.0)
    assert state.velocity["w"][0] == 0.9 * 1.0 + 1.0 == 1.9
    assert p.data[0] == -0.1 - 0.1 * 1.9
    assert p.data[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_decay_only_step():
    p = Parameter(np.array([10.0]))
    state = OptimizerState(lr_initial=0.1)
    _step(p, 0.0, state, momentum=0.0, weight_decay=0.001)
    assert p.data[0] == 10.0 - 0.1 * (0.001 * 10.0)
    assert p.data[0] == pytest.approx(9.999, abs=1e-12)


def test_sgd_decay_exclusion_switch():
    params = {"bn.gamma": Parameter(np.array([2.0])), "conv.weight": Parameter(np.array([2.0]))}
    grads = {k: np.zeros(1) for k in params}
    cfg = TrainConfig(momentum=0.0, weight_decay=0.5, decay_norm_and_bias=False)
    sgd_step(params, grads, OptimizerState(lr_initial=0.1), cfg)
    assert params["bn.gamma"].data[0] == 2.0
    assert params["conv.weight"].data[0] == 2.0 - 0.1 * 0.5 * 2.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_sgd_non_finite_gradient_names_parameter(bad):
    params = {"layer1.0.1.conv.weight": Parameter(np.ones(3))}
    with pytest.raises(NumericError, match="layer1.0.1.conv.weight"):
        sgd_step(params, {"layer1.0.1.conv.weight": np.array([0.0, bad, 0.0])},
                 OptimizerState(), TrainConfig())
    np.testing.assert_array_equal(params["layer1.0.1.conv.weight"].data, 1.0)


def test_sgd_shape_mismatch():
    with pytest.raises(ConfigurationError):
        sgd_step({"w": Parameter(np.ones(3))}, {"w": np.ones(2)}, OptimizerState(), TrainConfig())


def test_sgd_descends_convex_quadratic():
    # f(p) = 0.5 * p^T A p with curvature at most 4; lr below 2/4 decreases f every step
    a = np.diag([4.0, 1.0, 0.25])
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    state = OptimizerState(lr_initial=0.3)
    cfg = TrainConfig(lr_initial=0.3, momentum=0.0, weight_decay=0.0)
    losses = []
    for _ in range(50):
        losses.append(0.5 * p.data @ a @ p.data)
        sgd_step({"p": p}, {"p": a @ p.data}, state, cfg)
    assert all(b < a_ for a_, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# plateau schedule
# ---------------------------------------------------------------------------


def _trace(losses, **kw):
    cfg = TrainConfig(**kw)
    state = OptimizerState(lr_initial=cfg.lr_initial, lr_divisor=cfg.lr_divisor)
    return [plateau_update(state, v, cfg) for v in losses], state


def test_plateau_patience_three_example():
    lrs, _ = _trace([1.0, 0.9, 0.91, 0.92, 0.93], plateau_patience=3)
    assert lrs == [0.1, 0.1, 0.1, 0.1, 0.1 / 10]


def test_plateau_strictly_decreasing_never_drops():
    lrs, _ = _trace([10.0 - 0.01 * i for i in range(500)], plateau_patience=1)
    assert set(lrs) == {0.1}


def test_plateau_two_consecutive_plateaus():
    lrs, _ = _trace([1.0] * 7, plateau_patience=3)
    assert lrs[-1] == 0.1 / 100
    assert lrs == [0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.001]


def test_plateau_min_delta():
    lrs, _ = _trace([1.0, 1.0 - 5e-5, 1.0 - 9e-5], plateau_patience=2, plateau_min_delta=1e-4)
    assert lrs == [0.1, 0.1, 0.01]


def test_plateau_respects_floor():
    lrs, state = _trace([1.0] * 100, plateau_patience=1, lr_floor=1e-3)
    assert min(lrs) == 0.1 / 100
    assert state.floor_reached


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=80), st.integers(1, 5))
def test_plateau_lr_only_takes_decade_values(losses, patience):
    lrs, _ = _trace(losses, plateau_patience=patience)
    prev = 0.1
    for lr in lrs:
        assert lr <= prev
        k = round(math.log10(0.1 / lr))
        assert lr == 0.1 / 10 ** k
        assert lr >= 1e-5
        prev = lr


# ---------------------------------------------------------------------------
# epochs and validation
# ---------------------------------------------------------------------------


def test_trailing_single_sample_batch_is_merged():
    sizes = [len(b) for b in _batches(np.arange(17), 16)]
    assert sizes == [17]
    assert [len(b) for b in _batches(np.arange(18), 16)] == [16, 2]
    assert [len(b) for b in _batches(np.arange(1), 16)] == [1]


def test_zero_lr_leaves_parameters_bit_identical(tiny):
    net = _net()
    before, _ = _snapshot(net)
    cfg = TrainConfig(lr_initial=0.0, batch_size=4)
    state = OptimizerState.fresh(net.parameters(), cfg)
    train = tiny.split("train")
    for epoch in range(3):
        train_epoch(net, tiny, train, cfg, AUG, state, epoch)
    assert _same(before, _snapshot(net)[0])


def test_epoch_is_deterministic(tiny):
    cfg = TrainConfig(batch_size=4)
    results = []
    for _ in range(2):
        net = _net()
        state = OptimizerState.fresh(net.parameters(), cfg)
        metrics = train_epoch(net, tiny, tiny.split("train"), cfg, AUG, state, 0)
        results.append((metrics, _snapshot(net)))
    (m1, (p1, b1)), (m2, (p2, b2)) = results
    assert m1 == m2
    assert _same(p1, p2) and _same(b1, b2)


def test_single_sample_loss_strictly_decreases(tiny):
    v = tiny.videos[0]
    one = DatasetManifest([v], tiny.class_names, {v.id: "train"}, tiny.channel_mean, root=tiny.root)
    net = _net(clip_shape=(3, 16, 64, 64))
    aug = AugmentConfig(clip_len=16, output_size=64)
    cfg = TrainConfig(lr_initial=0.01)
    state = OptimizerState.fresh(net.parameters(), cfg)
    losses = [train_epoch(net, one, one.videos, cfg, aug, state, e)[0] for e in range(10)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.1 * losses[0]


def test_validate_untrained_is_uniform_and_pure(tiny):
    net = _net()
    params, buffers = _snapshot(net)
    first = validate(net, tiny, tiny.split("test"), AUG)
    assert first == validate(net, tiny, tiny.split("test"), AUG)
    assert abs(first[0] - math.log(3)) < 0.1 * math.log(3)
    p2, b2 = _snapshot(net)
    assert _same(params, p2) and _same(buffers, b2)


class _MemorizingNet:
    """Returns a one-hot logit for the label it has seen paired with each exact clip."""

    def __init__(self, table):
        self.table = table

    def forward(self, x, training=False):
        out = np.zeros((len(x), 3), np.float32)
        for i, clip in enumerate(x):
            out[i, self.table[clip.tobytes()]] = 10.0
        return out


def test_validate_memorizing_net_is_perfect(tiny):
    from res3d.trainer import iter_eval_batches

    videos = tiny.split("train")
    table = {}
    for clips, labels, _ in iter_eval_batches(tiny, videos, AUG, FrameSource(tiny), 8):
        for c, l in zip(clips, labels):
            table[c.tobytes()] = int(l)
    loss, acc = validate(_MemorizingNet(table), tiny, videos, AUG)
    assert acc == 1.0


def test_validate_empty_split(tiny):
    from res3d.errors import DataError

    with pytest.raises(DataError):
        validate(_net(), tiny, [], AUG)


def test_non_finite_loss_aborts_with_provenance(tiny):
    net = _net()
    net.parameters()["fc.bias"].data[:] = np.nan
    cfg = TrainConfig(batch_size=4)
    with pytest.raises(NumericError, match="c00"):
        train_epoch(net, tiny, tiny.split("train"), cfg, AUG, OptimizerState.fresh(net.parameters(), cfg), 0)


def test_fit_stops_at_lr_floor(tiny):
    # an unreachable min_delta makes every epoch after the first a plateau
    cfg = TrainConfig(lr_initial=1e-3, lr_floor=1e-4, max_epochs=50, plateau_patience=1,
                      plateau_min_delta=100.0, batch_size=4)
    history, state = fit(_net(), tiny, cfg, AUG)
    assert [h.lr for h in history] == [1e-3, 1e-3, 1e-4]
    assert state.floor_reached


def test_val_fraction_carves_from_train(tiny):
    from res3d.trainer import split_train_val

    train, val = split_train_val(tiny, TrainConfig(val_fraction=0.34))
    assert len(train) + len(val) == len(tiny.split("train"))
    assert len(val) == 2
    assert not {v.id for v in val} & {v.id for v in train}
    train0, val0 = split_train_val(tiny, TrainConfig())
    assert val0 == tiny.split("test")


@pytest.mark.parametrize("kw", [dict(lr_divisor=1.0), dict(momentum=1.0), dict(batch_size=0),
                                dict(plateau_patience=0), dict(weight_decay=-1.0)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _trained(tiny, epochs=2):
    cfg = TrainConfig(batch_size=4, max_epochs=epochs)
    net = _net()
    history, state = fit(net, tiny, cfg, AUG)
    return net, state, history, cfg


def test_checkpoint_round_trip(tiny, tmp_path):
    net, state, history, cfg = _trained(tiny)
    path = save_checkpoint(tmp_path / "a.ckpt", net, state, 2, cfg.seed, history, cfg, AUG)
    assert path.read_bytes()[:4] == CHECKPOINT_MAGIC
    ck = load_checkpoint(path)
    assert ck.spec == net.spec and ck.epoch == 2 and ck.seed == 0
    assert ck.history == history
    assert ck.train_config["batch_size"] == 4
    assert _same(ck.params, {k: p.data for k, p in net.parameters().items()})
    assert _same(ck.buffers, net.buffers())
    assert _same(ck.optimizer.velocity, state.velocity)
    for f in ("lr_initial", "lr_divisor", "reductions", "epochs_since_improvement", "best_val_loss"):
        assert getattr(ck.optimizer, f) == getattr(state, f)
    fresh = ck.restore(_net(seed=9))
    assert _same(_snapshot(fresh)[0], _snapshot(net)[0])
    assert _same(_snapshot(fresh)[1], _snapshot(net)[1])


def test_checkpoint_restore_rejects_other_architecture(tiny, tmp_path):
    net, state, history, cfg = _trained(tiny, 1)
    ck = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", net, state, 1, 0, history))
    other = assemble_network(named_spec("miniature", num_classes=4), seed=0)
    with pytest.raises(ConfigurationError):
        ck.restore(other)


def test_resume_matches_uninterrupted(tiny, tmp_path):
    cfg = TrainConfig(batch_size=4, max_epochs=6)
    straight = _net()
    fit(straight, tiny, cfg, AUG)

    half = _net()
    history, state = fit(half, tiny, TrainConfig(batch_size=4, max_epochs=3), AUG)
    save_checkpoint(tmp_path / "mid.ckpt", half, state, 3, cfg.seed, history)
    ck = load_checkpoint(tmp_path / "mid.ckpt")
    resumed = ck.restore(_net(seed=5))
    fit(resumed, tiny, cfg, AUG, state=ck.optimizer, start_epoch=ck.epoch, history=ck.history)
    a, b = _snapshot(straight), _snapshot(resumed)
    assert _same(a[0], b[0]) and _same(a[1], b[1])


def test_checkpoint_faults_are_distinct(tiny, tmp_path):
    net, state, history, cfg = _trained(tiny, 1)
    raw = save_checkpoint(tmp_path / "ok.ckpt", net, state, 1, 0, history).read_bytes()

    def write(name, data):
        p = tmp_path / name
        p.write_bytes(data)
        return p

    corrupt = bytearray(raw)
    corrupt[len(raw) // 2] ^= 0xFF
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(write("flip.ckpt", bytes(corrupt)))
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(write("short.ckpt", raw[:-10]))
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(write("tiny.ckpt", raw[:10]))
    bumped = bytearray(raw)
    bumped[4] = 99
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(write("version.ckpt", bytes(bumped)))
    with pytest.raises(CheckpointError):
        load_checkpoint(write("magic.ckpt", b"NOPE" + raw[4:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    for exc in (CheckpointChecksumError, CheckpointTruncatedError, CheckpointVersionError):
        others = {CheckpointChecksumError, CheckpointTruncatedError, CheckpointVersionError} - {exc}
        assert not any(issubclass(exc, o) for o in others)
