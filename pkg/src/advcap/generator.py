"""Image-conditioned LSTM caption generator.

Decoding convention: step 0 consumes the linearly projected image feature and
only advances the state; step 1 consumes BOS and produces the logits for the
first token; afterwards each step consumes the previously emitted token. This
keeps teacher forcing and free-running decoding aligned.

At decode time PAD and BOS are masked out of the distribution (a large finite
negative added to their logits) so emitted captions always satisfy the caption
invariants. Sampling, greedy, beam search and re-scoring all share one
single-sequence step path over the masked log-softmax, which makes their
log-probabilities mutually consistent to the bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import LstmParams, Tensor
from .textdata import BOS_ID, EOS_ID, PAD_ID, Caption, DEFAULT_T_MAX, caption_from_ids

DECODE_MASK = -1.0e30   # finite; exp() underflows to exactly 0


@dataclass
class GeneratorParams:
    """embed (d,U); image projection (d, d_feat) + (d,); LSTM input d hidden H;
    output projection (U, H) + (U,)."""
    embed: Tensor
    img_w: Tensor
    img_b: Tensor
    lstm: LstmParams
    out_w: Tensor
    out_b: Tensor

    @property
    def vocab_size(self) -> int:
        return self.embed.data.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.embed.data.shape[0]

    @property
    def hidden(self) -> int:
        return self.lstm.hidden

    @property
    def feature_dim(self) -> int:
        return self.img_w.data.shape[1]

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "embed": self.embed, "img_w": self.img_w, "img_b": self.img_b,
            "lstm.w_x": self.lstm.w_x, "lstm.w_h": self.lstm.w_h, "lstm.b": self.lstm.b,
            "out_w": self.out_w, "out_b": self.out_b,
        }


def init_generator(feature_dim: int, embed_dim: int, hidden: int, vocab_size: int,
                   stream, scale: float = 0.1) -> GeneratorParams:
    t = lambda *shape: Tensor(stream.normal(0.0, scale, size=shape), requires_grad=True)
    return GeneratorParams(
        embed=t(embed_dim, vocab_size),
        img_w=t(embed_dim, feature_dim),
        img_b=Tensor(np.zeros(embed_dim), requires_grad=True),
        lstm=nc.init_lstm(embed_dim, hidden, stream, scale=scale),
        out_w=t(vocab_size, hidden),
        out_b=Tensor(np.zeros(vocab_size), requires_grad=True),
    )


def zero_generator(feature_dim: int, embed_dim: int, hidden: int, vocab_size: int) -> GeneratorParams:
    z = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)
    return GeneratorParams(
        embed=z(embed_dim, vocab_size), img_w=z(embed_dim, feature_dim), img_b=z(embed_dim),
        lstm=LstmParams(z(4 * hidden, embed_dim), z(4 * hidden, hidden), z(4 * hidden)),
        out_w=z(vocab_size, hidden), out_b=z(vocab_size),
    )


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def _flatten_col(x: Tensor) -> Tensor:
    # (d,1) -> (d,) preserving gradient flow
    return nc.matmul(x, Tensor(np.ones(1)))


def gen_step(params: GeneratorParams, inp, state=None):
    """One decoder step -> (logits, state').

    ``inp`` is the raw image feature (float vector, step 0) or the previous
    token id(s) (integers, steps >= 1); batched variants take a (d_feat,B)
    float matrix or a length-B id vector and return (U,B) logits.
    """
    arr = np.asarray(inp.data if isinstance(inp, Tensor) else inp)
    if np.issubdtype(arr.dtype, np.floating):
        feat = inp if isinstance(inp, Tensor) else Tensor(arr)
        if feat.data.ndim == 1:
            x = nc.add(nc.matmul(params.img_w, feat), params.img_b)
        else:
            x = nc.add_col(nc.matmul(params.img_w, feat), params.img_b)
    elif np.issubdtype(arr.dtype, np.integer):
        ids = np.atleast_1d(arr.astype(np.int64))
        emb = nc.gather_embedding(params.embed, ids)
        x = _flatten_col(emb) if arr.ndim == 0 else emb
    else:
        raise ShapeError("gen_step input must be a float feature or integer token ids")

    batched = x.data.ndim == 2
    if state is None:
        state = nc.zero_state(params.hidden, x.data.shape[1] if batched else None)
    h, c = nc.lstm_cell(x, state[0], state[1], params.lstm)
    logits = nc.matmul(params.out_w, h)
    logits = nc.add_col(logits, params.out_b) if batched else nc.add(logits, params.out_b)
    return logits, (h, c)


def decode_mask(vocab_size: int) -> np.ndarray:
    m = np.zeros(vocab_size)
    m[PAD_ID] = DECODE_MASK
    m[BOS_ID] = DECODE_MASK
    return m


def _masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = logits + mask
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


def _step_logp(params, token, state, mask):
    """Decode-time step on raw arrays: previous token id -> (logp vector, state')."""
    logits, state = gen_step(params, np.int64(token), state)
    return _masked_log_softmax(logits.data, mask), state


def _feature_state(params, feature):
    _, state = gen_step(params, np.asarray(feature, dtype=np.float64))
    return state


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    caption: Caption
    log_prob: float
    per_step_log_probs: list


def sample_sequence(params: GeneratorParams, feature, rng,
                    t_max: int = DEFAULT_T_MAX) -> DecodeResult:
    """Ancestral sampling at temperature 1 until EOS or t_max tokens."""
    mask = decode_mask(params.vocab_size)
    state = _feature_state(params, feature)
    prev = BOS_ID
    ids, steps = [], []
    total = 0.0
    for _ in range(t_max):
        logp, state = _step_logp(params, prev, state, mask)
        probs = np.exp(logp)
        u = float(rng.uniform())
        tok = int(min(np.searchsorted(np.cumsum(probs), u, side="right"),
                      params.vocab_size - 1))
        ids.append(tok)
        steps.append(float(logp[tok]))
        total += float(logp[tok])
        if tok == EOS_ID:
            break
        prev = tok
    return DecodeResult(caption=caption_from_ids(ids), log_prob=total,
                        per_step_log_probs=steps)


def greedy_decode(params: GeneratorParams, feature,
                  t_max: int = DEFAULT_T_MAX) -> DecodeResult:
    """Argmax decoding; ties break toward the lower token id."""
    mask = decode_mask(params.vocab_size)
    state = _feature_state(params, feature)
    prev = BOS_ID
    ids, steps = [], []
    total = 0.0
    for _ in range(t_max):
        logp, state = _step_logp(params, prev, state, mask)
        tok = int(np.argmax(logp))
        ids.append(tok)
        steps.append(float(logp[tok]))
        total += float(logp[tok])
        if tok == EOS_ID:
            break
        prev = tok
    return DecodeResult(caption=caption_from_ids(ids), log_prob=total,
                        per_step_log_probs=steps)


def score_sequence(params: GeneratorParams, feature, ids) -> DecodeResult:
    """Log-probability of a fixed token sequence under the decode distribution."""
    mask = decode_mask(params.vocab_size)
    state = _feature_state(params, feature)
    prev = BOS_ID
    steps = []
    total = 0.0
    for tok in ids:
        logp, state = _step_logp(params, prev, state, mask)
        steps.append(float(logp[int(tok)]))
        total += float(logp[int(tok)])
        prev = int(tok)
    return DecodeResult(caption=caption_from_ids(ids), log_prob=total,
                        per_step_log_probs=steps)


def _beam_core(step_fn, init_state, beam: int, t_max: int) -> DecodeResult:
    """Length-unnormalized beam search over summed log-probs.

    step_fn(prev_token, state) -> (logp vector, state'). Completed hypotheses
    retire to a pool; ties break toward the lexicographically lower id path.
    """
    if beam < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam}")
    live = [((), 0.0, [], init_state)]   # (ids, logp, per_step, state)
    pool = []
    for _ in range(t_max):
        if not live:
            break
        candidates = []
        for ids, logp, steps, state in live:
            prev = ids[-1] if ids else BOS_ID
            vec, new_state = step_fn(prev, state)
            for tok in range(len(vec)):
                if vec[tok] <= DECODE_MASK / 2:   # PAD/BOS stay out of hypotheses
                    continue
                candidates.append((ids + (tok,), logp + float(vec[tok]),
                                   steps + [float(vec[tok])], new_state))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for ids, logp, steps, state in candidates:
            if ids[-1] == EOS_ID or len(ids) >= t_max:
                pool.append((ids, logp, steps))
            else:
                live.append((ids, logp, steps, state))
            if len(live) >= beam:
                break
    best = min(pool, key=lambda c: (-c[1], c[0]))
    return DecodeResult(caption=caption_from_ids(best[0]), log_prob=best[1],
                        per_step_log_probs=best[2])


def beam_search(params: GeneratorParams, feature, beam: int,
                t_max: int = DEFAULT_T_MAX) -> DecodeResult:
    mask = decode_mask(params.vocab_size)

    def step_fn(prev, state):
        return _step_logp(params, prev, state, mask)

    return _beam_core(step_fn, _feature_state(params, feature), beam, t_max)


def ensemble_decode(param_sets: list[GeneratorParams], feature, beam: int,
                    t_max: int = DEFAULT_T_MAX) -> DecodeResult:
    """Beam search over the mean of per-model log-softmax outputs.

    The mean is anchored on the first model (base + mean of differences), so
    an ensemble of identical models is bit-identical to the single model.
    """
    if not param_sets:
        raise ConfigError("ensemble needs at least one model")
    U = param_sets[0].vocab_size
    if any(p.vocab_size != U for p in param_sets):
        raise ConfigError("ensemble models must share one vocabulary")
    mask = decode_mask(U)
    k = len(param_sets)

    def step_fn(prev, states):
        vecs, new_states = [], []
        for p, s in zip(param_sets, states):
            v, ns = _step_logp(p, prev, s, mask)
            vecs.append(v)
            new_states.append(ns)
        mean = vecs[0].copy()
        if k > 1:
            delta = np.zeros_like(mean)
            for v in vecs[1:]:
                delta += v - vecs[0]
            mean += delta / k
        return mean, new_states

    init = [_feature_state(p, feature) for p in param_sets]
    return _beam_core(step_fn, init, beam, t_max)


# ---------------------------------------------------------------------------
# MLE training
# ---------------------------------------------------------------------------

def mle_loss(params: GeneratorParams, features: np.ndarray, captions: np.ndarray,
             lengths: np.ndarray) -> Tensor:
    """Teacher-forced negative mean log-likelihood over non-PAD positions.

    features: (d_feat, B); captions: (B, t_max) PAD-padded including EOS;
    lengths: true lengths. The mean is over valid token positions, so
    duplicating every row leaves the loss unchanged.
    """
    B = captions.shape[0]
    if B == 0:
        raise ConfigError("mle_loss needs a non-empty batch")
    lengths = np.asarray(lengths, dtype=np.int64)
    t_steps = int(lengths.max())
    total_valid = float(lengths.sum())

    _, state = gen_step(params, Tensor(features))
    total = None
    for t in range(t_steps):
        # finished rows keep feeding PAD (their losses are masked out below)
        inputs = np.full(B, BOS_ID, dtype=np.int64) if t == 0 else captions[:, t - 1]
        logits, state = gen_step(params, inputs, state)
        targets = captions[:, t]
        losses = nc.softmax_xent_cols(logits, targets)
        mask = Tensor((t < lengths).astype(np.float64))
        step_total = nc.sum_all(nc.mul(losses, mask))
        total = step_total if total is None else nc.add(total, step_total)
    return nc.affine(total, 1.0 / total_valid)


def batch_arrays(examples, ref_choice, t_max: int):
    """Stack (features, captions, lengths) for a list of examples; ref_choice
    picks the reference index per example."""
    from .textdata import pad_ids

    feats = np.stack([ex.feature for ex in examples], axis=1)
    caps, lens = [], []
    for i, ex in enumerate(examples):
        ref = ex.references[ref_choice[i]]
        caps.append(pad_ids(ref, t_max))
        lens.append(len(ref))
    return feats, np.stack(caps), np.asarray(lens, dtype=np.int64)


def pretrain_generator(params: GeneratorParams, train_examples, config, rng,
                       eval_fn=None, log_fn=None, optimizer=None):
    """ADAM on mle_loss for config.mle_epochs; returns per-epoch records."""
    if not train_examples:
        raise ConfigError("pretraining needs a non-empty dataset")
    opt = optimizer or nc.Adam(params.named_tensors(), lr=config.lr)
    records = []
    n = len(train_examples)
    for epoch in range(config.mle_epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            chosen = [train_examples[int(i)] for i in idx]
            ref_choice = [int(rng.integers(0, len(ex.references))) for ex in chosen]
            feats, caps, lens = batch_arrays(chosen, ref_choice, config.t_max)
            with nc.Tape() as tape:
                loss = mle_loss(params, feats, caps, lens)
            nc.backward(tape, loss)
            opt.step()
            opt.zero_grad()
            epoch_losses.append(loss.item())
        rec = {"phase": "pretrain_gen", "epoch": epoch,
               "loss": float(np.mean(epoch_losses))}
        if eval_fn is not None:
            rec["val_cider_d"] = float(eval_fn(params))
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)
    return records
