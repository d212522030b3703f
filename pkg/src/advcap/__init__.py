"""advcap: adversarially trained sequence captioning at desk scale.

A self-contained stack: a small reverse-mode autodiff core, an LSTM caption
generator, CNN- and RNN-based pair discriminators, n-gram language metrics
(BLEU, ROUGE-L, CIDEr, CIDEr-D), a combined discriminator+metric reward, and
the alternating self-critical adversarial training loop, plus a CLI that ties
them into reproducible runs.
"""

__version__ = "0.1.0"
