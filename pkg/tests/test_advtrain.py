import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import advcap.numcore as nc
from advcap.advtrain import (
    AdversarialTrainer,
    GRID_KEYS,
    METRIC_COLUMNS,
    RewardBreakdown,
    adversarial_train,
    combined_reward,
    default_sweep_grid,
    held_out_metric,
    run_sweep_cell,
    scst_train,
    scst_update,
    sweep,
)
from advcap.config import TrainConfig
from advcap.errors import ConfigError, NumericError
from advcap.generator import init_generator, sample_sequence
from advcap.metrics import EOS_ID, MetricId
from advcap.numcore import Tensor
from advcap.rng import Stream
from advcap.textdata import (
    GrammarSpec,
    Vocabulary,
    build_vocab,
    gen_synthetic_dataset,
    make_examples,
    make_pair_batches,
)


def small_world(n_train=20, n_val=6, seed=0, feature_dim=8):
    spec = GrammarSpec(subjects=["cat", "dog", "bird"], attributes=["red", "blue"],
                       relations=["chases", "finds"], objects=["ball", "box"],
                       feature_dim=feature_dim, noise_std=0.02)
    train_recs = gen_synthetic_dataset(spec, n_train, seed=seed)
    val_recs = gen_synthetic_dataset(spec, n_val, seed=seed + 1)
    corpus = [c for _, _, caps in train_recs for c in caps]
    vocab = build_vocab(corpus, 1)
    train = make_examples(train_recs, vocab, 10)
    val = make_examples([(i + 10_000, f, c) for i, (_, f, c) in enumerate(val_recs)],
                        vocab, 10)
    return train, val, vocab


def tiny_config(**kw):
    base = dict(lambda_=0.3, g_steps=1, d_steps=1, metric_q=MetricId.CIDER_D,
                lr=1e-3, batch_size=4, mle_epochs=1, disc_epochs=1,
                adv_iterations=3, eval_interval=2, patience=0, eval_beam=1,
                embed_dim=6, hidden=8, disc_hidden=8, t_max=10, min_count=1,
                kernel_preset="desk", disc_arch="cnn", seed=11)
    base.update(kw)
    return TrainConfig(**base)


class TestCombinedReward:
    def test_lambda_zero_degenerates_to_metric(self):
        for s in (0.0, 0.73, 5.5, 10.0):
            assert combined_reward(0.9, s, 0.0) == s

    def test_lambda_one_is_discriminator_only(self):
        for p in (0.1, 0.5, 0.99):
            assert combined_reward(p, 7.3, 1.0) == p

    def test_hand_value(self):
        assert abs(combined_reward(0.8, 1.2, 0.3) - 1.08) <= 1e-15

    def test_lambda_out_of_range(self):
        with pytest.raises(ConfigError):
            combined_reward(0.5, 0.5, 1.5)
        with pytest.raises(ConfigError):
            combined_reward(0.5, 0.5, -0.1)

    @given(p=st.floats(0, 1), s=st.floats(0, 10), lam=st.floats(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_identity_to_machine_precision(self, p, s, lam):
        r = combined_reward(p, s, lam)
        assert r == lam * p + (1 - lam) * s

    def test_breakdown_invariants(self):
        b = RewardBreakdown(p=0.8, s=1.2, r=combined_reward(0.8, 1.2, 0.3),
                            baseline=1.0, advantage=combined_reward(0.8, 1.2, 0.3) - 1.0)
        assert b.r == 0.3 * b.p + 0.7 * b.s
        assert b.advantage == b.r - b.baseline


class _ConstDisc:
    """Discriminator stub with a constant probability for every pair."""

    def __init__(self, p):
        self.p = float(p)

    def forward_batch(self, features, captions):
        return Tensor(np.full(captions.shape[0], self.p))


class _LengthScorer:
    """Injected test metric: reward equals the caption length (EOS excluded)."""

    def score(self, image_id, caption):
        ids = caption.ids if hasattr(caption, "ids") else tuple(caption)
        return float(len([i for i in ids if i != EOS_ID]))


class TestScstUpdate:
    def test_constant_disc_lambda_one_leaves_params_unchanged(self):
        train, val, vocab = small_world()
        gen = init_generator(8, 6, 8, vocab.size, Stream(5), scale=0.2)
        opt = nc.Adam(gen.named_tensors(), lr=1e-3)
        before = {k: t.data.copy() for k, t in gen.named_tensors().items()}
        scorer = _LengthScorer()
        loss, breakdowns = scst_update(gen, opt, train[:4], scorer, 1.0,
                                       _ConstDisc(0.42), Stream(6), 10)
        assert all(b.advantage == 0.0 for b in breakdowns)
        assert loss == 0.0
        for k, t in gen.named_tensors().items():
            assert np.array_equal(before[k], t.data), k

    def test_zero_advantage_items_contribute_zero_gradient(self):
        train, val, vocab = small_world()
        gen = init_generator(8, 6, 8, vocab.size, Stream(7), scale=0.2)
        opt = nc.Adam(gen.named_tensors(), lr=1e-3)
        # lambda=0 with a constant scorer: every advantage is exactly zero
        class ConstScorer:
            def score(self, image_id, caption):
                return 4.2

        before = {k: t.data.copy() for k, t in gen.named_tensors().items()}
        _, breakdowns = scst_update(gen, opt, train[:4], ConstScorer(), 0.0,
                                    None, Stream(8), 10)
        assert all(b.advantage == 0.0 for b in breakdowns)
        for k, t in gen.named_tensors().items():
            assert np.array_equal(before[k], t.data), k

    def test_disc_free_requires_lambda_zero(self):
        train, val, vocab = small_world()
        gen = init_generator(8, 6, 8, vocab.size, Stream(9))
        opt = nc.Adam(gen.named_tensors(), lr=1e-3)
        with pytest.raises(ConfigError):
            scst_update(gen, opt, train[:4], _LengthScorer(), 0.3, None, Stream(10), 10)

    def test_length_reward_grows_sampled_length(self):
        # controlled-reward oracle: optimizing sentence length must lengthen samples
        train, val, vocab = small_world(n_train=12)
        gen = init_generator(8, 6, 8, vocab.size, Stream(11), scale=0.2)
        opt = nc.Adam(gen.named_tensors(), lr=2e-3)
        scorer = _LengthScorer()
        rng = Stream(12)

        def mean_sample_len(k=30, seed=999):
            s = Stream(seed)
            lens = []
            for i in range(k):
                ex = train[i % len(train)]
                out = sample_sequence(gen, ex.feature, s, 10)
                lens.append(len([t for t in out.caption.ids if t != EOS_ID]))
            return float(np.mean(lens))

        before = mean_sample_len()
        for step in range(200):
            batch = [train[int(i)] for i in rng.choice(len(train), size=4, replace=False)]
            scst_update(gen, opt, batch, scorer, 0.0, None, rng, 10)
        after = mean_sample_len()
        assert after > before + 1.0, (before, after)

    def test_reward_identity_in_breakdowns(self):
        train, val, vocab = small_world()
        gen = init_generator(8, 6, 8, vocab.size, Stream(13), scale=0.3)
        opt = nc.Adam(gen.named_tensors(), lr=1e-3)
        lam = 0.3
        _, breakdowns = scst_update(gen, opt, train[:4], _LengthScorer(), lam,
                                    _ConstDisc(0.8), Stream(14), 10)
        for b in breakdowns:
            assert b.r == lam * b.p + (1 - lam) * b.s
            assert b.advantage == b.r - b.baseline


class TestTrainerLoop:
    def test_g_step_record_fields(self):
        train, val, vocab = small_world()
        tr = AdversarialTrainer(train, val, vocab, tiny_config())
        tr.pretrain_gen()
        tr.pretrain_disc()
        tr.begin_adversarial()
        tr.iteration = 1
        rec, loss = tr.g_step()
        assert set(rec) == {"iter", "mean_p", "mean_s", "mean_adv"}
        assert isinstance(loss, float)

    def test_d_step_regenerates_fakes(self):
        train, val, vocab = small_world()
        tr = AdversarialTrainer(train, val, vocab, tiny_config())
        tr.pretrain_gen()
        rng = tr.streams["adv_disc"]

        def sampler(chosen):
            return [sample_sequence(tr.gen, ex.feature, rng, 10).caption for ex in chosen]

        _, fake1, _ = make_pair_batches(train, sampler, 4, rng, 10)
        _, fake2, _ = make_pair_batches(train, sampler, 4, rng, 10)
        assert not np.array_equal(fake1.captions, fake2.captions)

    def test_full_run_deterministic_logs(self):
        train, val, vocab = small_world()

        def run():
            logs = []
            adversarial_train(train, val, vocab, tiny_config(), log_fn=logs.append)
            return logs

        a, b = run(), run()
        assert a == b
        adv = [r for r in a if r.get("phase") == "adv"]
        assert len(adv) == 3
        assert set(adv[0]) == {"phase", "iter", "loss", "mean_p", "mean_s", "mean_adv"}
        evals = [r for r in a if "split" in r]
        assert all(set(r) == {"iter", "split", "metric", "value"} for r in evals)

    def test_nan_abort_names_tensor(self):
        train, val, vocab = small_world()
        tr = AdversarialTrainer(train, val, vocab, tiny_config())
        tr.pretrain_gen()
        tr.pretrain_disc()
        tr.begin_adversarial()
        tr.gen.embed.data[0, 0] = np.nan
        with pytest.raises(NumericError, match="gen.embed"):
            tr.adversarial_loop()

    def test_lambda_zero_matches_disc_free_trainer_bitwise(self):
        train, val, vocab = small_world(n_train=16)
        cfg = tiny_config(lambda_=0.0, adv_iterations=30, eval_interval=10,
                          mle_epochs=2, disc_epochs=1, seed=21)
        adv = adversarial_train(train, val, vocab, cfg)
        plain = scst_train(train, val, vocab, cfg)
        for k, t in adv.gen.named_tensors().items():
            assert np.array_equal(t.data, plain.gen.named_tensors()[k].data), k

    def test_resume_reproduces_trajectory_bitwise(self):
        train, val, vocab = small_world()
        cfg = tiny_config(adv_iterations=6, eval_interval=2, seed=31)

        snaps = {}

        def keep(trainer, tag):
            snaps[tag] = copy.deepcopy(trainer.snapshot())

        full_logs = []
        full = adversarial_train(train, val, vocab, cfg, log_fn=full_logs.append,
                                 checkpoint_fn=keep)
        assert "iter000002" in snaps

        meta, tensors = snaps["iter000002"]
        resumed = AdversarialTrainer.restore(train, val, meta, tensors)
        resumed_logs = []
        resumed.run(log_fn=resumed_logs.append)
        for k, t in full.gen.named_tensors().items():
            assert np.array_equal(t.data, resumed.gen.named_tensors()[k].data), k
        for k, t in full.disc.named_tensors().items():
            assert np.array_equal(t.data, resumed.disc.named_tensors()[k].data), k
        tail = [r for r in full_logs if r.get("iter", 0) > 2 and r.get("phase") == "adv"]
        resumed_adv = [r for r in resumed_logs if r.get("phase") == "adv"]
        assert tail == resumed_adv

    def test_resume_from_final_is_noop(self):
        train, val, vocab = small_world()
        cfg = tiny_config(adv_iterations=2, eval_interval=1)
        done = adversarial_train(train, val, vocab, cfg)
        meta, tensors = done.snapshot()
        again = AdversarialTrainer.restore(train, val, meta, tensors)
        before = {k: t.data.copy() for k, t in again.gen.named_tensors().items()}
        again.run()
        assert again.iteration == done.iteration
        for k, t in again.gen.named_tensors().items():
            assert np.array_equal(before[k], t.data)

    def test_early_stop_patience(self):
        train, val, vocab = small_world()
        cfg = tiny_config(adv_iterations=40, eval_interval=1, patience=2)
        tr = adversarial_train(train, val, vocab, cfg)
        assert tr.stopped_early or tr.iteration == 40

    def test_held_out_metric_in_range(self):
        train, val, vocab = small_world()
        tr = AdversarialTrainer(train, val, vocab, tiny_config())
        tr.pretrain_gen()
        v = held_out_metric(tr.gen, val, tr.idf, MetricId.CIDER_D, 1, 10)
        assert 0.0 <= v <= 10.0


class TestSweep:
    def test_default_grid_shape(self):
        grid = default_sweep_grid()
        assert len(grid) == 13
        lam_cells = [c for c in grid if c["cell"].startswith("lambda=")]
        met_cells = [c for c in grid if c["cell"].startswith("metric=")]
        step_cells = [c for c in grid if c["cell"].startswith("steps=")]
        assert (len(lam_cells), len(met_cells), len(step_cells)) == (5, 4, 4)
        lams = [c["overrides"]["lambda"] for c in lam_cells]
        assert lams == [0.0, 0.3, 0.5, 0.7, 1.0]
        mets = [c["overrides"]["metric_q"] for c in met_cells]
        assert mets == ["CIDER", "CIDER_D", "BLEU4", "ROUGE_L"]
        steps = [(c["overrides"]["g_steps"], c["overrides"]["d_steps"]) for c in step_cells]
        assert steps == [(1, 5), (1, 1), (5, 1), (10, 1)]

    def test_empty_grid_rejected(self):
        train, val, vocab = small_world()
        with pytest.raises(ConfigError):
            sweep(train, val, vocab, tiny_config(), grid=[])

    def test_singleton_grid_equals_single_run(self):
        train, val, vocab = small_world()
        base = tiny_config(adv_iterations=2, eval_interval=1)
        cell = {"cell": "lambda=0.3", "overrides": {"lambda": 0.3}}
        rows = sweep(train, val, vocab, base, grid=[cell])
        assert len(rows) == 1
        direct = run_sweep_cell(train, val, vocab, base, cell)
        assert rows[0] == direct

    def test_rows_have_grid_keys_and_metric_columns(self):
        train, val, vocab = small_world()
        base = tiny_config(adv_iterations=2, eval_interval=1)
        rows = sweep(train, val, vocab, base,
                     grid=[{"cell": "steps=g1_d1", "overrides": {"g_steps": 1, "d_steps": 1}}])
        row = rows[0]
        for key in ("cell", "status", "error") + GRID_KEYS + METRIC_COLUMNS:
            assert key in row
        assert row["status"] == "ok"

    def test_order_independence(self):
        train, val, vocab = small_world()
        base = tiny_config(adv_iterations=2, eval_interval=1)
        c1 = {"cell": "lambda=0", "overrides": {"lambda": 0.0}}
        c2 = {"cell": "lambda=1", "overrides": {"lambda": 1.0}}
        ab = sweep(train, val, vocab, base, grid=[c1, c2])
        ba = sweep(train, val, vocab, base, grid=[c2, c1])
        assert ab[0] == ba[1]
        assert ab[1] == ba[0]

    def test_failing_cell_does_not_abort_others(self):
        train, val, vocab = small_world()
        base = tiny_config(adv_iterations=1, eval_interval=1)
        bad = {"cell": "bad", "overrides": {"lambda": 3.0}}
        good = {"cell": "lambda=0.3", "overrides": {"lambda": 0.3}}
        rows = sweep(train, val, vocab, base, grid=[bad, good])
        assert rows[0]["status"] == "error" and rows[0]["error"]
        assert rows[1]["status"] == "ok"
