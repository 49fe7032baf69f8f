import numpy as np
import pytest

from conftest import small_model
from siamsearch.corpus import EncodedCorpus
from siamsearch.errors import CheckpointError, TrainingDiverged
from siamsearch.evalret import EvalConfig, evaluate
from siamsearch.losses import LossConfig
from siamsearch.trainer import (
    Checkpoint,
    PlateauSchedule,
    TrainConfig,
    TrainState,
    batch_loss,
    fit,
    train_epoch,
    load_checkpoint,
    save_checkpoint,
)


def run_flat_schedule(config: TrainConfig, n_epochs: int):
    state = TrainState(lr=config.initial_lr)
    sched = PlateauSchedule(config, state)
    sched.update(0.3)  # pre-training validation sets the bar
    halved_at, lrs = [], [state.lr]
    for epoch in range(1, n_epochs + 1):
        state.epoch = epoch
        before = state.halvings_used
        _, stop = sched.update(0.3)
        if state.halvings_used != before:
            halved_at.append(epoch)
            lrs.append(state.lr)
        if stop:
            return halved_at, lrs, epoch
    return halved_at, lrs, None


class TestSchedule:
    def test_never_improving(self):
        halved_at, lrs, stopped = run_flat_schedule(TrainConfig(), 1000)
        assert halved_at == [40, 80, 120, 160]
        assert stopped == 200
        assert lrs == [0.001 / 2**h for h in range(5)]

    def test_improvement_resets_counter(self):
        cfg = TrainConfig(patience=3)
        state = TrainState(lr=cfg.initial_lr)
        sched = PlateauSchedule(cfg, state)
        for v in (0.1, 0.1, 0.1, 0.2, 0.2, 0.2):
            sched.update(v)
        assert state.halvings_used == 0 and state.stagnant_epochs == 2

    def test_tiny_gain_is_stagnation(self):
        cfg = TrainConfig(patience=2)
        state = TrainState(lr=cfg.initial_lr)
        sched = PlateauSchedule(cfg, state)
        for v in (0.5, 0.5 + 1e-7, 0.5 + 2e-7):
            sched.update(v)
        assert state.halvings_used == 1

    def test_zero_halvings(self):
        halved_at, _, stopped = run_flat_schedule(TrainConfig(patience=5, max_halvings=0), 100)
        assert halved_at == [] and stopped == 5

    @pytest.mark.parametrize("kw", [{"batch_size": 1}, {"patience": 0}, {"max_halvings": -1}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_fit_with_stubbed_validation(self, toy_vocabs, toy_data):
        m = small_model(toy_vocabs, embed_dim=4, lstm_hidden=4)
        sub = toy_data.subset(np.arange(4))
        res = fit(m, sub, sub, TrainConfig(batch_size=4, max_epochs=1000, patience=3, max_halvings=2), validate=lambda _: 0.25)
        assert [e["epoch"] for e in res.history if e["lr_next"] != e["lr"]] == [3, 6]
        assert res.last.state.epoch == 9
        assert res.best.state.epoch == 0


def zeroed(model):
    for p in model.parameters():
        p.value[...] = 0.0
    return model


class TestBatchLoss:
    def test_zero_model_finite(self, toy_vocabs, toy_data):
        m = zeroed(small_model(toy_vocabs))
        for kind in ("contrastive", "triplet"):
            m.zero_grad()
            loss = batch_loss(m, toy_data.batch(np.arange(4)), LossConfig(kind), np.array([1, 2, 3, 0]))
            assert np.isfinite(loss)
            assert all(np.isfinite(p.grad).all() for p in m.parameters())


    def test_zero_model_cosine_aborts_with_ids(self, toy_vocabs, toy_data):
        m = zeroed(small_model(toy_vocabs))
        with pytest.raises(TrainingDiverged) as info:
            train_epoch(m, toy_data.subset(np.arange(4)), LossConfig(), np.random.default_rng(0), TrainState(), 4)
        assert sorted(info.value.batch_ids) == sorted(toy_data.record_ids[:4])

    def test_same_seed_same_losses(self, toy_vocabs, toy_data):
        sub = toy_data.subset(np.arange(8))
        runs = [
            [e["mean_loss"] for e in fit(small_model(toy_vocabs), sub, sub, TrainConfig(batch_size=4, max_epochs=3), validate=lambda _: 0.0).history]
            for _ in range(2)
        ]
        assert runs[0] == runs[1]


class TestCheckpoint:
    def test_round_trip(self, tmp_path, toy_vocabs, toy_data):
        m = small_model(toy_vocabs)
        sub = toy_data.subset(np.arange(8))
        res = fit(m, sub, sub, TrainConfig(batch_size=4, max_epochs=2, validation_pool_size=8))
        cfg = EvalConfig(pool_size=8)
        before = evaluate(res.last.model, sub, cfg)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        res.last.save(a)
        loaded = Checkpoint.load(a)
        assert evaluate(loaded.model, sub, cfg) == before
        assert loaded.state == res.last.state
        assert {f: v.id_to_token for f, v in loaded.vocabs.items()} == {f: v.id_to_token for f, v in toy_vocabs.items()} or not loaded.vocabs
        loaded.save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_vocabs_travel(self, tmp_path, toy_vocabs):
        m = small_model(toy_vocabs)
        save_checkpoint(m, TrainState(), tmp_path / "c.ckpt", toy_vocabs)
        _, _, vocabs = load_checkpoint(tmp_path / "c.ckpt")
        assert vocabs["tokens"].id_to_token == toy_vocabs["tokens"].id_to_token

    def test_corruption_detected(self, tmp_path, toy_vocabs):
        path = tmp_path / "c.ckpt"
        save_checkpoint(small_model(toy_vocabs), TrainState(), path, toy_vocabs)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(path)
        path.write_bytes(bytes(blob[:-10]))
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)
        path.write_bytes(b"nonsense")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_resume_is_bit_identical(self, tmp_path, toy_vocabs, toy_data):
        sub = toy_data.subset(np.arange(12))
        cfg = dict(batch_size=4, validation_pool_size=12)
        straight = fit(small_model(toy_vocabs), sub, sub, TrainConfig(max_epochs=4, **cfg))

        half = fit(small_model(toy_vocabs), sub, sub, TrainConfig(max_epochs=2, **cfg))
        half.last.save(tmp_path / "half.ckpt")
        model, state, _ = load_checkpoint(tmp_path / "half.ckpt")
        resumed = fit(model, sub, sub, TrainConfig(max_epochs=4, **cfg), state=state)
        assert resumed.last.model.digest() == straight.last.model.digest()
        assert resumed.last.state == straight.last.state


def test_loss_falls_over_first_ten_epochs():
    # per-epoch means are two mini-batches with random negatives, so a single
    # uptick is batch noise; the trend has to be down for every seed
    from siamsearch.corpus import build_vocabs
    from siamsearch.synthcorpus import SynthSpec, generate_records

    for seed in range(10):
        recs = generate_records(SynthSpec(64, 8, 0.0, seed))
        vocabs = build_vocabs(recs, min_freq=1)
        data = EncodedCorpus.from_records(recs, vocabs)
        m = small_model(vocabs, "dcs", seed=seed, embed_dim=16, lstm_hidden=16)
        hist = fit(m, data, data, TrainConfig(batch_size=32, max_epochs=10, seed=seed), validate=lambda _: 0.0).history
        losses = [e["mean_loss"] for e in hist]
        assert losses[-1] < 0.25 * losses[0]
        assert sum(b < a for a, b in zip(losses, losses[1:])) >= 7
