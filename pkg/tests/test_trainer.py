from dataclasses import replace

import numpy as np
import pytest

from paramine import geometry as geo
from paramine import trainer as tr
from paramine.errors import DimensionMismatch, FormatError, ZeroVector
from paramine.loss import LossParams
from paramine.mining import BatchBlueprint, MiningMode, MiningStrategy
from paramine.trainer import (ProjectionHead, TrainConfig, TrainData, TrainState, encode, fit,
                              head_gradient, load_head, save_head, schedule_mega_batches)

import oracles

SMALL = TrainConfig(epochs=3, mini_batch_size=6, mega_batch_M=4, seed=5)


def test_encode_examples(rng):
    ident = ProjectionHead.identity(3)
    np.testing.assert_allclose(encode(ident, [3.0, 0.0, 4.0]), [0.6, 0.0, 0.8], atol=1e-15)
    with pytest.raises(ZeroVector):
        encode(ident, [0.0, 0.0, 0.0])
    with pytest.raises(DimensionMismatch):
        encode(ident, [1.0, 2.0])
    head = ProjectionHead.init(6, 4, rng, "tanh")
    for _ in range(10):
        assert abs(np.linalg.norm(encode(head, rng.normal(size=6))) - 1) < 1e-12


def test_encode_batch_matches_reference(rng):
    head = ProjectionHead.init(5, 3, rng, "tanh")
    head.b = rng.normal(size=3)
    x = rng.normal(size=(7, 5))
    np.testing.assert_allclose(head.encode_batch(x),
                               oracles.head_forward(head.W, head.b, "tanh", x), atol=1e-12)


def test_head_validation():
    with pytest.raises(ValueError):
        ProjectionHead(np.eye(2), np.zeros(2), "relu")
    with pytest.raises(DimensionMismatch):
        ProjectionHead(np.eye(3), np.zeros(2))
    with pytest.raises(DimensionMismatch):
        ProjectionHead(np.ones((1, 3)), np.zeros(1))


def test_head_gradient_zero_upstream(rng):
    head = ProjectionHead.init(6, 4, rng)
    d_w, d_b = head_gradient(head, rng.normal(size=(3, 6)), np.zeros((3, 4)))
    assert not d_w.any() and not d_b.any()


@pytest.mark.parametrize("activation", ["identity", "tanh"])
def test_head_gradient_matches_finite_differences(rng, activation):
    head = ProjectionHead.init(6, 4, rng, activation)
    head.b = rng.normal(scale=0.3, size=4)
    bases = rng.normal(size=(3, 6))
    upstream = rng.normal(size=(3, 4))
    d_w, d_b = head_gradient(head, bases, upstream)
    W, b = head.W.copy(), head.b.copy()

    def f():
        out = oracles.head_forward(W, b, activation, bases)
        return float((out * upstream).sum())

    assert oracles.max_relative_error(d_w, oracles.central_difference(f, W)) <= 1e-5
    assert oracles.max_relative_error(d_b, oracles.central_difference(f, b)) <= 1e-5


def test_head_round_trip(tmp_path, rng):
    head = ProjectionHead.init(5, 3, rng, "tanh")
    path = tmp_path / "head.bin"
    save_head(head, path)
    raw = path.read_bytes()
    assert raw[:4] == b"HEAD" and len(raw) == 13 + 4 * (15 + 3)
    back = load_head(path)
    assert back.activation == "tanh"
    np.testing.assert_array_equal(back.W, head.W.astype(np.float32))
    # a float32 head survives a second round trip bit-for-bit
    save_head(back, path)
    assert path.read_bytes() == raw
    for broken in (raw[:-1], raw + b"\0", b"HEAD", b"XXXX" + raw[4:],
                   raw[:12] + b"\x07" + raw[13:]):
        path.write_bytes(broken)
        with pytest.raises(FormatError):
            load_head(path)


def test_config_validation():
    for bad in (dict(epochs=0), dict(mini_batch_size=1), dict(momentum=1.0),
                dict(learning_rate=-1), dict(activation="relu"), dict(language_include=[])):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_schedule_keeps_anchors_distinct():
    from paramine.dataset import PairRecord
    members = [PairRecord(f"a{i % 4}", f"p{i}", 1) for i in range(12)]
    batches = schedule_mega_batches(members, list(range(12)), capacity=5)
    assert sorted(i for b in batches for i in b) == list(range(12))
    for b in batches:
        anchors = [members[i].anchor_id for i in b]
        assert len(anchors) == len(set(anchors)) and len(b) <= 5


# --- training ---------------------------------------------------------------------

def test_zero_learning_rate_keeps_parameters(small_synthetic):
    d = small_synthetic
    result = fit(d.corpus, d.records, d.embeddings, replace(SMALL, learning_rate=0.0, epochs=2))
    init = ProjectionHead.init(8, 8, np.random.default_rng(SMALL.seed))
    assert result.head.W.tobytes() == init.W.tobytes()
    assert result.head.b.tobytes() == init.b.tobytes()


def test_fit_is_deterministic(small_synthetic):
    d = small_synthetic
    a = fit(d.corpus, d.records, d.embeddings, SMALL)
    b = fit(d.corpus, d.records, d.embeddings, SMALL)
    assert [(s.loss, s.dev_acc, s.align, s.uniform) for s in a.history] == \
           [(s.loss, s.dev_acc, s.align, s.uniform) for s in b.history]
    assert a.head.W.tobytes() == b.head.W.tobytes()
    assert a.best_epoch == b.best_epoch


def test_single_epoch_history(small_synthetic):
    d = small_synthetic
    result = fit(d.corpus, d.records, d.embeddings, replace(SMALL, epochs=1))
    assert len(result.history) == 1 and result.history[0].epoch == 1
    assert 0.0 <= result.history[0].dev_acc <= 1.0


def test_loss_decreases(small_synthetic):
    d = small_synthetic
    cfg = replace(SMALL, epochs=5, loss=LossParams(s=5.0, m=0.2, g=1.0))
    history = fit(d.corpus, d.records, d.embeddings, cfg).history
    assert history[4].loss < history[0].loss


def test_base_embeddings_are_untouched(small_synthetic):
    d = small_synthetic
    before = {k: v.copy() for k, v in d.embeddings.items()}
    fit(d.corpus, d.records, d.embeddings, replace(SMALL, epochs=2))
    assert all(np.array_equal(before[k], d.embeddings[k]) for k in before)


def test_zero_shot_languages_never_trained(small_synthetic, monkeypatch):
    d = small_synthetic
    seen = set()
    real_step = tr._sgd_step

    def spy(state, blueprint, data, config):
        seen.update(blueprint.anchors, blueprint.positives,
                    *(set(h) for h in blueprint.hard_negatives))
        return real_step(state, blueprint, data, config)

    monkeypatch.setattr(tr, "_sgd_step", spy)
    fit(d.corpus, d.records, d.embeddings,
        replace(SMALL, epochs=2, language_include={"en", "de"}))
    assert seen and {d.corpus[s].lang for s in seen} <= {"en", "de"}


def test_mining_uses_one_snapshot_per_mega_batch(small_synthetic, monkeypatch):
    d = small_synthetic
    calls = []
    real_mine, real_step = tr.mine, tr._sgd_step
    steps = []

    def spy_mine(mega, snapshot, strategy, exclude=None):
        calls.append((state_box[0].head.copy(), dict(snapshot), len(mega)))
        return real_mine(mega, snapshot, strategy, exclude=exclude)

    def spy_step(state, blueprint, data, config):
        state_box[0] = state
        steps.append(len(calls))
        return real_step(state, blueprint, data, config)

    cfg = replace(SMALL, epochs=1, mining=MiningStrategy(MiningMode.TOP_N, n=2))
    data = TrainData.build(d.corpus, d.records, d.embeddings, cfg)
    state = TrainState.start(ProjectionHead.init(8, 8, np.random.default_rng(0)),
                             np.random.default_rng(0))
    state_box = [state]
    monkeypatch.setattr(tr, "mine", spy_mine)
    monkeypatch.setattr(tr, "_sgd_step", spy_step)
    tr.train_epoch(state, data, cfg)

    capacity = cfg.mini_batch_size * cfg.mega_batch_M
    assert len(calls) >= len(data.members) // capacity
    assert len(steps) > len(calls)  # several mini-batch steps share each mined snapshot
    for head, snapshot, _ in calls:
        for sid, vec in snapshot.items():
            np.testing.assert_allclose(vec, encode(head, d.embeddings[sid]), atol=1e-12)


def test_mined_hards_exclude_known_paraphrases(small_synthetic, monkeypatch):
    d = small_synthetic
    cfg = replace(SMALL, epochs=1, mining=MiningStrategy(MiningMode.TOP_N, n=50))
    data = TrainData.build(d.corpus, d.records, d.embeddings, cfg)
    blueprints: list[BatchBlueprint] = []
    real_step = tr._sgd_step

    def spy(state, blueprint, data_, config):
        blueprints.append(blueprint)
        return real_step(state, blueprint, data_, config)

    monkeypatch.setattr(tr, "_sgd_step", spy)
    tr.train_epoch(TrainState.start(ProjectionHead.identity(8), np.random.default_rng(1)),
                   data, cfg)
    for bp in blueprints:
        for a, hards in zip(bp.anchors, bp.hard_negatives):
            assert not set(hards) & data.paraphrase_class[a]


def test_small_learning_rate_is_monotone(small_synthetic):
    d = small_synthetic
    cfg = replace(SMALL, learning_rate=1e-3, momentum=0.9, loss=LossParams(s=5.0, m=0.2))
    data = TrainData.build(d.corpus, d.records, d.embeddings, cfg)
    members = data.members[:6]
    hards = tuple(tuple(data.dataset_hards.get(m.anchor_id, ())[:2]) for m in members)
    bp = BatchBlueprint(tuple(m.anchor_id for m in members),
                        tuple(m.candidate_id for m in members), hards)
    state = TrainState.start(ProjectionHead.init(8, 8, np.random.default_rng(2)),
                             np.random.default_rng(2))
    losses = [tr._sgd_step(state, bp, data, cfg) for _ in range(11)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_head_output_dimension_and_activation(small_synthetic):
    d = small_synthetic
    result = fit(d.corpus, d.records, d.embeddings,
                 replace(SMALL, epochs=1, d_out=5, activation="tanh"))
    assert result.head.W.shape == (5, 8) and result.head.activation == "tanh"
    vec = encode(result.best_head, next(iter(d.embeddings.values())))
    assert vec.shape == (5,) and abs(geo.ordered_dot(vec, vec) - 1) < 1e-12
