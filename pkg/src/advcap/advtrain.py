"""Adversarial trainer: combined reward, self-critical updates, alternating loop.

Reward for a decoded sentence x given image I: r = lambda * p + (1-lambda) * s,
where p is the discriminator probability and s the language-metric score. The
generator update is self-critical: the greedy-decoded sentence's combined
reward is the baseline, the sampled sentence's reward minus it the advantage,
and the surrogate loss is -mean(advantage * sum_t log G(x_t | ...)) with the
advantage treated as a constant.

Determinism layout: every phase owns a named random stream derived from the
config seed ("mle", "disc_pre", "adv_gen", "adv_disc", ...). Generator-side
draws never share a stream with discriminator-side draws, so a lambda=0 run
is bit-identical to a discriminator-free self-critical run with the same
seed, and checkpointed stream states resume exactly.

Each phase gets a fresh ADAM state: adversarial updates start from zero
moments, so a zero-advantage batch leaves the generator untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import TrainConfig
from .errors import ConfigError, NumericError
from .generator import (
    GeneratorParams,
    beam_search,
    decode_mask,
    gen_step,
    greedy_decode,
    init_generator,
    pretrain_generator,
    sample_sequence,
)
from .discriminator import make_discriminator, disc_loss, pretrain_discriminator
from .metrics import IdfTable, MetricId, SentenceScorer, build_idf, corpus_scores, sentence_reward
from .numcore import Tensor
from .rng import Stream, derive_seed
from .textdata import BOS_ID, make_pair_batches, pad_ids

STREAM_LABELS = ("init_gen", "init_disc", "mle", "disc_pre", "adv_gen", "adv_disc")


@dataclass
class RewardBreakdown:
    """Per-sentence reward record for one sampled/greedy pair."""
    p: float          # discriminator probability of the sampled sentence
    s: float          # metric score of the sampled sentence
    r: float          # combined reward of the sampled sentence
    baseline: float   # combined reward of the greedy sentence
    advantage: float  # r - baseline


def combined_reward(p: float, s: float, lam: float) -> float:
    """r = lambda * p + (1 - lambda) * s."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0,1], got {lam}")
    return lam * p + (1.0 - lam) * s


def scst_surrogate(gen: GeneratorParams, features: np.ndarray, captions: np.ndarray,
                   lengths: np.ndarray, advantages: np.ndarray) -> Tensor:
    """-mean(A * sum_t log G(x_t)) over the batch, A held constant.

    Uses the decode-time masked log-softmax so the log-probabilities refer to
    the same policy the samples were drawn from.
    """
    B = captions.shape[0]
    lengths = np.asarray(lengths, dtype=np.int64)
    t_steps = int(lengths.max())
    mask = Tensor(decode_mask(gen.vocab_size))
    _, state = gen_step(gen, Tensor(features))
    total = None
    for t in range(t_steps):
        inputs = np.full(B, BOS_ID, dtype=np.int64) if t == 0 else captions[:, t - 1]
        logits, state = gen_step(gen, inputs, state)
        xent = nc.softmax_xent_cols(nc.add_col(logits, mask), captions[:, t])
        weights = Tensor(advantages * (t < lengths))
        term = nc.sum_all(nc.mul(xent, weights))
        total = term if total is None else nc.add(total, term)
    return nc.affine(total, 1.0 / B)


def scst_update(gen: GeneratorParams, optimizer, examples, scorer: SentenceScorer,
                lam: float, disc, rng: Stream, t_max: int):
    """One self-critical minibatch update; returns (loss, RewardBreakdowns).

    disc=None runs the discriminator-free path (requires lam == 0).
    """
    if disc is None and lam != 0.0:
        raise ConfigError("a discriminator-free update requires lambda == 0")
    sampled = [sample_sequence(gen, ex.feature, rng, t_max) for ex in examples]
    greedy = [greedy_decode(gen, ex.feature, t_max) for ex in examples]

    B = len(examples)
    p_samp = np.zeros(B)
    p_greedy = np.zeros(B)
    if disc is not None:
        feats = np.stack([ex.feature for ex in examples], axis=1)
        caps_s = np.stack([pad_ids(r.caption, t_max) for r in sampled])
        caps_g = np.stack([pad_ids(r.caption, t_max) for r in greedy])
        p_samp = disc.forward_batch(feats, caps_s).data.copy()
        p_greedy = disc.forward_batch(feats, caps_g).data.copy()

    breakdowns = []
    for i, ex in enumerate(examples):
        s_samp = scorer.score(ex.image_id, sampled[i].caption)
        s_greedy = scorer.score(ex.image_id, greedy[i].caption)
        r_samp = combined_reward(float(p_samp[i]), s_samp, lam)
        r_greedy = combined_reward(float(p_greedy[i]), s_greedy, lam)
        breakdowns.append(RewardBreakdown(p=float(p_samp[i]), s=s_samp, r=r_samp,
                                          baseline=r_greedy, advantage=r_samp - r_greedy))

    feats = np.stack([ex.feature for ex in examples], axis=1)
    caps = np.stack([pad_ids(r.caption, t_max) for r in sampled])
    lens = np.array([len(r.caption) for r in sampled], dtype=np.int64)
    adv = np.array([b.advantage for b in breakdowns])
    with nc.Tape() as tape:
        loss = scst_surrogate(gen, feats, caps, lens, adv)
    nc.backward(tape, loss)
    optimizer.step()
    optimizer.zero_grad()
    return loss.item(), breakdowns


def held_out_metric(gen: GeneratorParams, examples, idf: IdfTable, q: MetricId,
                    beam: int, t_max: int) -> float:
    """Mean per-sentence metric of decoded captions on a held-out split."""
    if not examples:
        return 0.0
    total = 0.0
    for ex in examples:
        if beam <= 1:
            decoded = greedy_decode(gen, ex.feature, t_max)
        else:
            decoded = beam_search(gen, ex.feature, beam, t_max)
        total += sentence_reward(decoded.caption, ex.references, idf, q)
    return total / len(examples)


def _check_finite(named: dict[str, Tensor], scope: str) -> None:
    for name, t in named.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in {scope}.{name}")


class AdversarialTrainer:
    """Owns all run state: params, optimizers, streams, phase and logs.

    Phase order: start -> gen_done -> disc_done -> adversarial -> done.
    With use_discriminator=False the trainer is a plain self-critical trainer
    (lambda must be 0, the discriminator phases and d-steps are skipped).
    """

    def __init__(self, train_examples, val_examples, vocab, config: TrainConfig,
                 use_discriminator: bool = True):
        config.validate()
        if not train_examples:
            raise ConfigError("training set is empty")
        if not use_discriminator and config.lambda_ != 0.0:
            raise ConfigError("a discriminator-free trainer requires lambda == 0")
        self.train = list(train_examples)
        self.val = list(val_examples or [])
        self.vocab = vocab
        self.config = config
        self.feature_dim = int(self.train[0].feature.shape[0])
        self.streams = {label: Stream.derived(config.seed, label) for label in STREAM_LABELS}

        self.idf = build_idf([ex.references for ex in self.train])
        self.scorer = SentenceScorer({ex.image_id: ex.references for ex in self.train},
                                     self.idf, config.metric_q)

        self.gen = init_generator(self.feature_dim, config.embed_dim, config.hidden,
                                  vocab.size, self.streams["init_gen"])
        self.disc = None
        if use_discriminator:
            self.disc = make_discriminator(config.disc_arch, self.feature_dim, vocab.size,
                                           config.t_max, self.streams["init_disc"],
                                           kernel_preset=config.kernel_preset,
                                           disc_hidden=config.disc_hidden)
        self.gen_opt = None   # created per phase
        self.disc_opt = None
        self.phase = "start"
        self.iteration = 0
        self.best_metric = None
        self.evals_since_improvement = 0
        self.stopped_early = False

    # -- phases ---------------------------------------------------------------

    def _eval_fn(self):
        cfg = self.config
        if not self.val:
            return None
        return lambda gen: held_out_metric(gen, self.val, self.idf, MetricId.CIDER_D,
                                           cfg.eval_beam, cfg.t_max)

    def pretrain_gen(self, log_fn=None):
        cfg = self.config
        self.gen_opt = nc.Adam(self.gen.named_tensors(), lr=cfg.lr)
        records = pretrain_generator(self.gen, self.train, cfg, self.streams["mle"],
                                     eval_fn=self._eval_fn(), log_fn=log_fn,
                                     optimizer=self.gen_opt)
        _check_finite(self.gen.named_tensors(), "gen")
        self.phase = "gen_done"
        return records

    def pretrain_disc(self, log_fn=None):
        if self.disc is None:
            self.phase = "disc_done"
            return []
        cfg = self.config
        self.disc_opt = nc.Adam(self.disc.named_tensors(), lr=cfg.lr)
        records = pretrain_discriminator(self.disc, self.train, self.val, self.gen,
                                         cfg, self.streams["disc_pre"], log_fn=log_fn,
                                         optimizer=self.disc_opt)
        _check_finite(self.disc.named_tensors(), "disc")
        self.phase = "disc_done"
        return records

    def begin_adversarial(self):
        cfg = self.config
        self.gen_opt = nc.Adam(self.gen.named_tensors(), lr=cfg.lr)
        self.disc_opt = nc.Adam(self.disc.named_tensors(), lr=cfg.lr) if self.disc else None
        self.phase = "adversarial"

    def g_step(self):
        """One generator update; returns ({iter, mean_p, mean_s, mean_adv}, loss)."""
        cfg = self.config
        rng = self.streams["adv_gen"]
        idx = rng.choice(len(self.train), size=min(cfg.batch_size, len(self.train)),
                         replace=False)
        batch = [self.train[int(i)] for i in idx]
        loss, breakdowns = scst_update(self.gen, self.gen_opt, batch, self.scorer,
                                       cfg.lambda_, self.disc, rng, cfg.t_max)
        record = {
            "iter": self.iteration,
            "mean_p": float(np.mean([b.p for b in breakdowns])),
            "mean_s": float(np.mean([b.s for b in breakdowns])),
            "mean_adv": float(np.mean([b.advantage for b in breakdowns])),
        }
        return record, loss

    def d_step(self):
        """One discriminator update on fresh real/fake/wrong batches."""
        cfg = self.config
        rng = self.streams["adv_disc"]

        def sampler(chosen):
            return [sample_sequence(self.gen, ex.feature, rng, cfg.t_max).caption
                    for ex in chosen]

        real, fake, wrong = make_pair_batches(self.train, sampler,
                                              min(cfg.batch_size, len(self.train)),
                                              rng, cfg.t_max)
        with nc.Tape() as tape:
            loss = disc_loss(self.disc, real, fake, wrong)
        nc.backward(tape, loss)
        self.disc_opt.step()
        self.disc_opt.zero_grad()
        return loss.item()

    def adversarial_loop(self, log_fn=None, checkpoint_fn=None):
        cfg = self.config
        if self.phase != "adversarial":
            self.begin_adversarial()
        eval_fn = self._eval_fn()
        while self.iteration < cfg.adv_iterations:
            _check_finite(self.gen.named_tensors(), "gen")
            if self.disc is not None:
                _check_finite(self.disc.named_tensors(), "disc")
            self.iteration += 1
            g_records, g_losses = [], []
            for _ in range(cfg.g_steps):
                rec, loss = self.g_step()
                g_records.append(rec)
                g_losses.append(loss)
            if self.disc is not None:
                for _ in range(cfg.d_steps):
                    self.d_step()
            _check_finite(self.gen.named_tensors(), "gen")
            if self.disc is not None:
                _check_finite(self.disc.named_tensors(), "disc")
            if log_fn is not None:
                log_fn({
                    "phase": "adv",
                    "iter": self.iteration,
                    "loss": float(np.mean(g_losses)),
                    "mean_p": float(np.mean([r["mean_p"] for r in g_records])),
                    "mean_s": float(np.mean([r["mean_s"] for r in g_records])),
                    "mean_adv": float(np.mean([r["mean_adv"] for r in g_records])),
                })
            if self.iteration % cfg.eval_interval == 0:
                if eval_fn is not None:
                    value = float(eval_fn(self.gen))
                    if log_fn is not None:
                        log_fn({"iter": self.iteration, "split": "val",
                                "metric": MetricId.CIDER_D.value, "value": value})
                    if self.best_metric is None or value > self.best_metric:
                        self.best_metric = value
                        self.evals_since_improvement = 0
                    else:
                        self.evals_since_improvement += 1
                if checkpoint_fn is not None:
                    checkpoint_fn(self, f"iter{self.iteration:06d}")
                if (eval_fn is not None and cfg.patience > 0
                        and self.evals_since_improvement >= cfg.patience):
                    self.stopped_early = True
                    break
        self.phase = "done"

    def run(self, log_fn=None, checkpoint_fn=None):
        """Run all remaining phases from the current one."""
        if self.phase == "start":
            self.pretrain_gen(log_fn=log_fn)
            if checkpoint_fn is not None:
                checkpoint_fn(self, "gen_mle")
        if self.phase == "gen_done":
            self.pretrain_disc(log_fn=log_fn)
            if checkpoint_fn is not None:
                checkpoint_fn(self, "disc_pre")
        if self.phase in ("disc_done", "adversarial"):
            self.adversarial_loop(log_fn=log_fn, checkpoint_fn=checkpoint_fn)
        return self

    # -- persistence ----------------------------------------------------------

    def snapshot(self):
        """(metadata, tensors) capturing everything a bitwise resume needs."""
        meta = {
            "config": self.config.to_json_dict(),
            "vocab": list(self.vocab.id_to_token),
            "feature_dim": self.feature_dim,
            "use_discriminator": self.disc is not None,
            "phase": self.phase,
            "iteration": self.iteration,
            "best_metric": self.best_metric,
            "evals_since_improvement": self.evals_since_improvement,
            "rng": {label: s.get_state() for label, s in self.streams.items()},
            "idf": self.idf.to_json(),
            "adam_steps": {},
        }
        tensors = {}
        for name, t in self.gen.named_tensors().items():
            tensors[f"gen.{name}"] = t.data.copy()
        if self.disc is not None:
            for name, t in self.disc.named_tensors().items():
                tensors[f"disc.{name}"] = t.data.copy()
        if self.phase == "adversarial":
            # mid-loop optimizer state is needed to resume exactly
            for k, v in self.gen_opt.named_state_tensors("adam.gen").items():
                tensors[k] = v.copy()
            meta["adam_steps"]["gen"] = self.gen_opt.state.step_count
            if self.disc_opt is not None:
                for k, v in self.disc_opt.named_state_tensors("adam.disc").items():
                    tensors[k] = v.copy()
                meta["adam_steps"]["disc"] = self.disc_opt.state.step_count
        return meta, tensors

    @classmethod
    def restore(cls, train_examples, val_examples, meta, tensors):
        from .textdata import Vocabulary

        config, _ = TrainConfig.from_json_dict(dict(meta["config"]))
        vocab = Vocabulary(list(meta["vocab"]))
        trainer = cls(train_examples, val_examples, vocab, config,
                      use_discriminator=bool(meta["use_discriminator"]))
        for name, t in trainer.gen.named_tensors().items():
            t.data[...] = tensors[f"gen.{name}"]
        if trainer.disc is not None:
            for name, t in trainer.disc.named_tensors().items():
                t.data[...] = tensors[f"disc.{name}"]
        for label, blob in meta["rng"].items():
            trainer.streams[label].set_state(blob)
        trainer.phase = meta["phase"]
        trainer.iteration = int(meta["iteration"])
        trainer.best_metric = meta.get("best_metric")
        trainer.evals_since_improvement = int(meta.get("evals_since_improvement", 0))
        if trainer.phase == "adversarial":
            trainer.gen_opt = nc.Adam(trainer.gen.named_tensors(), lr=config.lr)
            trainer.gen_opt.load_state_tensors("adam.gen", tensors,
                                               meta["adam_steps"]["gen"])
            if trainer.disc is not None:
                trainer.disc_opt = nc.Adam(trainer.disc.named_tensors(), lr=config.lr)
                trainer.disc_opt.load_state_tensors("adam.disc", tensors,
                                                    meta["adam_steps"]["disc"])
        return trainer


def adversarial_train(train_examples, val_examples, vocab, config: TrainConfig,
                      log_fn=None, checkpoint_fn=None, use_discriminator: bool = True):
    """Full pipeline: init, MLE pretrain, disc pretrain, alternating loop."""
    trainer = AdversarialTrainer(train_examples, val_examples, vocab, config,
                                 use_discriminator=use_discriminator)
    trainer.run(log_fn=log_fn, checkpoint_fn=checkpoint_fn)
    return trainer


def scst_train(train_examples, val_examples, vocab, config: TrainConfig,
               log_fn=None, checkpoint_fn=None):
    """Discriminator-free self-critical trainer (conventional RL baseline)."""
    return adversarial_train(train_examples, val_examples, vocab, config,
                             log_fn=log_fn, checkpoint_fn=checkpoint_fn,
                             use_discriminator=False)


# ---------------------------------------------------------------------------
# hyperparameter sweep
# ---------------------------------------------------------------------------

SWEEP_LAMBDAS = (0.0, 0.3, 0.5, 0.7, 1.0)
SWEEP_METRICS = ("CIDER", "CIDER_D", "BLEU4", "ROUGE_L")
SWEEP_STEPS = ((1, 5), (1, 1), (5, 1), (10, 1))

GRID_KEYS = ("lambda", "metric_q", "g_steps", "d_steps")
METRIC_COLUMNS = ("BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE_L", "CIDER", "CIDER_D")


def default_sweep_grid():
    """The 5 lambda cells, 4 metric cells and 4 step-size cells."""
    cells = []
    for lam in SWEEP_LAMBDAS:
        cells.append({"cell": f"lambda={lam:g}", "overrides": {"lambda": lam}})
    for q in SWEEP_METRICS:
        cells.append({"cell": f"metric={q}", "overrides": {"metric_q": q}})
    for g, d in SWEEP_STEPS:
        cells.append({"cell": f"steps=g{g}_d{d}", "overrides": {"g_steps": g, "d_steps": d}})
    return cells


def run_sweep_cell(train_examples, val_examples, vocab, base_config: TrainConfig,
                   cell: dict) -> dict:
    """Train one grid cell and score the held-out split on every metric.

    The cell seed is derived from (base seed, cell name), never from grid
    position, so results are order-independent.
    """
    overrides = dict(cell.get("overrides", {}))
    cfg_dict = base_config.to_json_dict()
    unknown = set(overrides) - set(cfg_dict)
    if unknown:
        raise ConfigError(f"unknown sweep override keys: {sorted(unknown)}")
    cfg_dict.update(overrides)
    cfg_dict["seed"] = derive_seed(base_config.seed, cell["cell"]) % (2 ** 31)
    config, _ = TrainConfig.from_json_dict(cfg_dict)

    trainer = adversarial_train(train_examples, val_examples, vocab, config)
    cands, refsets = [], []
    for ex in val_examples:
        if config.eval_beam <= 1:
            decoded = greedy_decode(trainer.gen, ex.feature, config.t_max)
        else:
            decoded = beam_search(trainer.gen, ex.feature, config.eval_beam, config.t_max)
        cands.append(decoded.caption)
        refsets.append(ex.references)
    scores = corpus_scores(cands, refsets, trainer.idf,
                           [MetricId[m] for m in METRIC_COLUMNS])
    row = {"cell": cell["cell"], "status": "ok", "error": ""}
    for key in GRID_KEYS:
        row[key] = cfg_dict[key] if key != "metric_q" else str(cfg_dict[key])
    row.update({m: scores[m] for m in METRIC_COLUMNS})
    return row


def _sweep_worker(payload):
    train_examples, val_examples, vocab, base_config, cell = payload
    try:
        return run_sweep_cell(train_examples, val_examples, vocab, base_config, cell)
    except Exception as e:  # one failing cell must not abort the others
        row = {"cell": cell["cell"], "status": "error", "error": str(e)}
        for key in GRID_KEYS:
            row[key] = cell.get("overrides", {}).get(key, "")
        for m in METRIC_COLUMNS:
            row[m] = ""
        return row


def sweep(train_examples, val_examples, vocab, base_config: TrainConfig,
          grid=None, threads: int = 1) -> list[dict]:
    """Run every grid cell; returns one row per cell, order matching the grid."""
    cells = list(grid) if grid is not None else default_sweep_grid()
    if not cells:
        raise ConfigError("sweep grid is empty")
    payloads = [(train_examples, val_examples, vocab, base_config, cell)
                for cell in cells]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_sweep_worker, payloads))
    return [_sweep_worker(p) for p in payloads]
