"""CNN- and RNN-based pair discriminators and the three-term loss.

Both discriminators score an (image feature, caption) pair with the
probability p that the caption is a real description of that image. Captions
arrive PAD-padded to t_max; the PAD embedding column is trainable, so the
fixed-width layout is consistent between training and scoring.

The CNN path builds a d x (t_max+1) map of the feature and the token
embeddings, applies full-height convolutions of several window widths with
max-over-time pooling, a highway layer, and a sigmoid output. The RNN path
feeds the feature then the embeddings through an LSTM with a trainable
initial hidden state and applies a sigmoid output to the final hidden state.

The paper-scale kernel bank is available as the "paper" preset; the "desk"
preset keeps the same shape at a fraction of the width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import LstmParams, Tensor
from .textdata import PairBatch

PROB_CLAMP = 1e-7

KERNEL_PRESETS = {
    "desk": [(1, 8), (2, 16), (3, 16), (4, 16), (5, 8)],
    "paper": [(1, 100), (2, 200), (3, 200), (4, 200), (5, 200), (6, 100),
              (7, 100), (8, 100), (9, 100), (10, 100), (15, 160), (16, 160)],
}


@dataclass(frozen=True)
class KernelSpec:
    """Convolution bank layout: (window width, kernel count) pairs."""
    entries: tuple

    @classmethod
    def preset(cls, name: str) -> "KernelSpec":
        if name not in KERNEL_PRESETS:
            raise ConfigError(f"unknown kernel preset {name!r}; choose from {sorted(KERNEL_PRESETS)}")
        return cls(entries=tuple(KERNEL_PRESETS[name]))

    @property
    def total(self) -> int:
        return sum(n for _, n in self.entries)

    def validate(self, t_max: int) -> None:
        for l, n in self.entries:
            if l < 1 or n < 1:
                raise ConfigError(f"kernel entry ({l},{n}) must be positive")
            if l > t_max + 1:
                raise ConfigError(f"kernel window {l} exceeds padded width {t_max + 1}")


# ---------------------------------------------------------------------------
# CNN discriminator
# ---------------------------------------------------------------------------

@dataclass
class CnnDiscParams:
    embed: Tensor                      # (d, U)
    kernels: list[Tensor]              # per spec entry: (n_i, d, l_i)
    kernel_biases: list[Tensor]        # per spec entry: (n_i,)
    w_t: Tensor                        # highway gate (n, n)
    b_t: Tensor
    w_h: Tensor                        # highway transform (n, n)
    b_h: Tensor
    w_o: Tensor                        # output (n,)
    b_o: Tensor                        # scalar

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, (k, b) in enumerate(zip(self.kernels, self.kernel_biases)):
            out[f"kernels.{i}"] = k
            out[f"kernel_biases.{i}"] = b
        out.update({"w_t": self.w_t, "b_t": self.b_t, "w_h": self.w_h,
                    "b_h": self.b_h, "w_o": self.w_o, "b_o": self.b_o})
        return out


@dataclass
class CnnForwardTrace:
    """Intermediate activations of one CNN forward pass."""
    eps: Tensor                  # (d, t_max+1)
    feature_maps: list[Tensor]   # per width group: (n_i, positions)
    pooled: Tensor               # (n,)
    gate: Tensor                 # tau (n,)
    transform: Tensor            # H (n,)
    highway_out: Tensor          # C~ (n,)
    p: Tensor                    # scalar in (0,1)


class CnnDiscriminator:
    def __init__(self, params: CnnDiscParams, spec: KernelSpec, t_max: int):
        spec.validate(t_max)
        self.params = params
        self.spec = spec
        self.t_max = t_max

    @classmethod
    def create(cls, feature_dim: int, vocab_size: int, spec: KernelSpec,
               t_max: int, stream, scale: float = 0.1) -> "CnnDiscriminator":
        spec.validate(t_max)
        d = feature_dim
        n = spec.total
        t = lambda *shape: Tensor(stream.normal(0.0, scale, size=shape), requires_grad=True)
        params = CnnDiscParams(
            embed=t(d, vocab_size),
            kernels=[t(cnt, d, l) for l, cnt in spec.entries],
            kernel_biases=[Tensor(np.zeros(cnt), requires_grad=True) for _, cnt in spec.entries],
            w_t=t(n, n), b_t=Tensor(np.zeros(n), requires_grad=True),
            w_h=t(n, n), b_h=Tensor(np.zeros(n), requires_grad=True),
            w_o=Tensor(np.zeros(n), requires_grad=True),
            b_o=Tensor(np.asarray(0.0), requires_grad=True),
        )
        return cls(params, spec, t_max)

    def forward(self, feature, caption_ids) -> tuple[Tensor, CnnForwardTrace]:
        return cnn_disc_forward(self.params, feature, caption_ids, self.t_max)

    def forward_batch(self, features: np.ndarray, captions: np.ndarray) -> Tensor:
        ps = [self.forward(features[:, j], captions[j])[0] for j in range(captions.shape[0])]
        return nc.stack_scalars(ps)

    def named_tensors(self):
        return self.params.named_tensors()

    @property
    def arch(self) -> str:
        return "cnn"


def cnn_disc_forward(params: CnnDiscParams, feature, caption_ids,
                     t_max: int) -> tuple[Tensor, CnnForwardTrace]:
    """Probability that the caption is a real description of the feature."""
    ids = np.asarray(caption_ids, dtype=np.int64)
    if ids.shape != (t_max,):
        raise ShapeError(f"caption must be PAD-padded to t_max={t_max}, got {ids.shape}")
    feat = feature if isinstance(feature, Tensor) else Tensor(np.asarray(feature, dtype=np.float64))
    emb = nc.gather_embedding(params.embed, ids)
    eps = nc.concat_cols([feat, emb])                        # (d, t_max+1)

    maps, pooled_parts = [], []
    for kern, bias in zip(params.kernels, params.kernel_biases):
        fmap = nc.conv_bank(eps, kern, bias)                 # (n_i, positions)
        maps.append(fmap)
        pooled_parts.append(nc.max_over_time_rows(fmap))
    pooled = nc.concat(pooled_parts)                         # (n,)

    gate = nc.sigmoid(nc.add(nc.matmul(params.w_t, pooled), params.b_t))
    transform = nc.relu(nc.add(nc.matmul(params.w_h, pooled), params.b_h))
    highway = nc.add(nc.mul(gate, transform),
                     nc.mul(nc.affine(gate, -1.0, 1.0), pooled))
    p = nc.sigmoid(nc.add(nc.dot(params.w_o, highway), params.b_o))
    trace = CnnForwardTrace(eps=eps, feature_maps=maps, pooled=pooled, gate=gate,
                            transform=transform, highway_out=highway, p=p)
    return p, trace


# ---------------------------------------------------------------------------
# RNN discriminator
# ---------------------------------------------------------------------------

@dataclass
class RnnDiscParams:
    embed: Tensor        # (d, U)
    lstm: LstmParams     # input d, hidden H_D
    h0: Tensor           # (H_D,) trainable initial hidden state
    w_r: Tensor          # (H_D,)
    b_r: Tensor          # scalar

    def named_tensors(self) -> dict[str, Tensor]:
        return {"embed": self.embed, "lstm.w_x": self.lstm.w_x,
                "lstm.w_h": self.lstm.w_h, "lstm.b": self.lstm.b,
                "h0": self.h0, "w_r": self.w_r, "b_r": self.b_r}


class RnnDiscriminator:
    def __init__(self, params: RnnDiscParams, t_max: int):
        self.params = params
        self.t_max = t_max

    @classmethod
    def create(cls, feature_dim: int, hidden: int, vocab_size: int, t_max: int,
               stream, scale: float = 0.1) -> "RnnDiscriminator":
        params = RnnDiscParams(
            embed=Tensor(stream.normal(0.0, scale, size=(feature_dim, vocab_size)), requires_grad=True),
            lstm=nc.init_lstm(feature_dim, hidden, stream, scale=scale),
            h0=Tensor(stream.normal(0.0, scale, size=hidden), requires_grad=True),
            w_r=Tensor(np.zeros(hidden), requires_grad=True),
            b_r=Tensor(np.asarray(0.0), requires_grad=True),
        )
        return cls(params, t_max)

    def forward(self, feature, caption_ids) -> tuple[Tensor, list[Tensor]]:
        return rnn_disc_forward(self.params, feature, caption_ids, self.t_max)

    def forward_batch(self, features: np.ndarray, captions: np.ndarray) -> Tensor:
        """Batched scoring: one LSTM sweep over (d,B) columns."""
        B = captions.shape[0]
        params = self.params
        H = params.lstm.hidden
        h = nc.concat_cols([params.h0] * B)
        c = Tensor(np.zeros((H, B)))
        feat = Tensor(np.asarray(features, dtype=np.float64))
        h, c = nc.lstm_cell(feat, h, c, params.lstm)
        for t in range(self.t_max):
            emb = nc.gather_embedding(params.embed, captions[:, t])
            h, c = nc.lstm_cell(emb, h, c, params.lstm)
        return nc.sigmoid(nc.add_scalar(nc.dot_cols(params.w_r, h), params.b_r))

    def named_tensors(self):
        return self.params.named_tensors()

    @property
    def arch(self) -> str:
        return "rnn"


def rnn_disc_forward(params: RnnDiscParams, feature, caption_ids,
                     t_max: int) -> tuple[Tensor, list[Tensor]]:
    """Single-pair RNN discriminator forward; returns (p, hidden state trace)."""
    ids = np.asarray(caption_ids, dtype=np.int64)
    if ids.shape != (t_max,):
        raise ShapeError(f"caption must be PAD-padded to t_max={t_max}, got {ids.shape}")
    feat = feature if isinstance(feature, Tensor) else Tensor(np.asarray(feature, dtype=np.float64))
    H = params.lstm.hidden
    h, c = params.h0, Tensor(np.zeros(H))
    h, c = nc.lstm_cell(feat, h, c, params.lstm)
    trace = [h]
    for t in range(t_max):
        emb = nc.matmul(nc.gather_embedding(params.embed, ids[t:t + 1]), Tensor(np.ones(1)))
        h, c = nc.lstm_cell(emb, h, c, params.lstm)
        trace.append(h)
    p = nc.sigmoid(nc.add(nc.dot(params.w_r, h), params.b_r))
    return p, trace


# ---------------------------------------------------------------------------
# loss and pretraining
# ---------------------------------------------------------------------------

def disc_loss(disc, real: PairBatch, fake: PairBatch, wrong: PairBatch) -> Tensor:
    """-[mean log p(real) + 0.5 mean log(1-p(fake)) + 0.5 mean log(1-p(wrong))].

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs, so the loss
    stays finite and saturated pairs contribute zero gradient.
    """
    for b in (real, fake, wrong):
        if b.batch_size == 0:
            raise ConfigError("disc_loss needs non-empty batches")

    def clamped(batch):
        return nc.clamp(disc.forward_batch(batch.features, batch.captions),
                        PROB_CLAMP, 1.0 - PROB_CLAMP)

    term_real = nc.mean_all(nc.log(clamped(real)))
    term_fake = nc.mean_all(nc.log(nc.affine(clamped(fake), -1.0, 1.0)))
    term_wrong = nc.mean_all(nc.log(nc.affine(clamped(wrong), -1.0, 1.0)))
    total = nc.add(term_real, nc.affine(nc.add(term_fake, term_wrong), 0.5))
    return nc.affine(total, -1.0)


def balanced_accuracy(disc, real: PairBatch, fake: PairBatch, wrong: PairBatch) -> float:
    """Mean of real recall and fake/wrong specificity at threshold p > 0.5;
    p == 0.5 counts as not-real."""
    p_real = disc.forward_batch(real.features, real.captions).data
    p_fake = disc.forward_batch(fake.features, fake.captions).data
    p_wrong = disc.forward_batch(wrong.features, wrong.captions).data
    recall = float(np.mean(p_real > 0.5))
    spec_fake = float(np.mean(p_fake <= 0.5))
    spec_wrong = float(np.mean(p_wrong <= 0.5))
    return (recall + spec_fake + spec_wrong) / 3.0


def generate_fake_set(gen_params, examples, rng, t_max: int):
    """One sampled caption per example (the fixed fake pool for pretraining)."""
    from .generator import sample_sequence

    return [sample_sequence(gen_params, ex.feature, rng, t_max).caption for ex in examples]


def pretrain_discriminator(disc, train_examples, val_examples, gen_params, config,
                           rng, log_fn=None, optimizer=None, fake_set=None):
    """ADAM on disc_loss over real/fake/wrong triples for config.disc_epochs.

    Fake captions are generated once up front and stay fixed during
    pretraining. Held-out balanced accuracy is computed each epoch on one
    fixed triple set built from val_examples.
    """
    from .textdata import assemble_pair_batches

    if len(train_examples) < 2:
        raise ConfigError("discriminator pretraining needs at least 2 examples")
    opt = optimizer or nc.Adam(disc.named_tensors(), lr=config.lr)
    if fake_set is None:
        fake_set = generate_fake_set(gen_params, train_examples, rng, config.t_max)

    val_triple = None
    if val_examples and len(val_examples) >= 2:
        val_fakes = generate_fake_set(gen_params, val_examples, rng, config.t_max)
        val_triple = assemble_pair_batches(val_examples, val_fakes, rng, config.t_max)

    records = []
    n = len(train_examples)
    for epoch in range(config.disc_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            chosen = [train_examples[int(i)] for i in idx]
            fakes = [fake_set[int(i)] for i in idx]
            real, fake, wrong = assemble_pair_batches(chosen, fakes, rng, config.t_max)
            with nc.Tape() as tape:
                loss = disc_loss(disc, real, fake, wrong)
            nc.backward(tape, loss)
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
        rec = {"phase": "pretrain_disc", "epoch": epoch, "loss": float(np.mean(losses))}
        if val_triple is not None:
            rec["val_balanced_acc"] = balanced_accuracy(disc, *val_triple)
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)
    return records


def make_discriminator(arch: str, feature_dim: int, vocab_size: int, t_max: int,
                       stream, kernel_preset: str = "desk", disc_hidden: int = 128,
                       scale: float = 0.1):
    if arch == "cnn":
        return CnnDiscriminator.create(feature_dim, vocab_size,
                                       KernelSpec.preset(kernel_preset), t_max,
                                       stream, scale=scale)
    if arch == "rnn":
        return RnnDiscriminator.create(feature_dim, disc_hidden, vocab_size,
                                       t_max, stream, scale=scale)
    raise ConfigError(f"unknown discriminator arch {arch!r}; use 'cnn' or 'rnn'")
