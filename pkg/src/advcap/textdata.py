"""Vocabulary, caption encoding, synthetic data, JSONL loading and pair batches.

Tokenization is lower-casing plus whitespace splitting, nothing else. Reserved
ids are fixed: PAD=0, BOS=1, EOS=2, UNK=3. Captions are bounded id sequences;
a complete caption ends with EOS and PAD never appears inside one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .rng import Stream, derive_seed

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]

DEFAULT_T_MAX = 16


# ---------------------------------------------------------------------------
# vocabulary and captions
# ---------------------------------------------------------------------------

class Vocabulary:
    """Bidirectional token<->id map with fixed reserved ids."""

    def __init__(self, tokens: list[str]):
        if tokens[:4] != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(corpus: list[str], min_count: int) -> Vocabulary:
    """Keep tokens seen at least min_count times; rest map to UNK.

    Kept tokens are ordered by descending count, ties broken lexicographically,
    after the four reserved ids, so the id assignment is a pure function of
    the corpus.
    """
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for line in corpus:
        for tok in tokenize(line):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + kept)


@dataclass(frozen=True)
class Caption:
    """Token-id sequence of length <= t_max; complete means EOS-terminated."""
    ids: tuple
    complete: bool

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if PAD_ID in ids:
            raise DataError("PAD must not appear inside a caption")
        ends_eos = bool(ids) and ids[-1] == EOS_ID
        if self.complete != ends_eos:
            raise DataError("complete flag must match EOS termination")
        if EOS_ID in ids[:-1]:
            raise DataError("EOS may only terminate a caption")

    def __len__(self):
        return len(self.ids)


def caption_from_ids(ids) -> Caption:
    """Caption with the complete flag derived from EOS termination."""
    ids = tuple(int(i) for i in ids)
    return Caption(ids=ids, complete=bool(ids) and ids[-1] == EOS_ID)


def encode(text: str, vocab: Vocabulary, t_max: int = DEFAULT_T_MAX) -> Caption:
    """Lowercase, whitespace-tokenize, map OOV to UNK, truncate, append EOS."""
    if t_max < 1:
        raise ConfigError("t_max must be >= 1")
    ids = [vocab.id_of(t) for t in tokenize(text)][: t_max - 1]
    ids.append(EOS_ID)
    return Caption(ids=tuple(ids), complete=True)


def decode_to_text(ids, vocab: Vocabulary) -> str:
    """Token ids back to a string; PAD/BOS/EOS are dropped."""
    words = [vocab.token_of(int(i)) for i in ids
             if int(i) not in (PAD_ID, BOS_ID, EOS_ID)]
    return " ".join(words)


def pad_ids(caption: Caption, t_max: int) -> np.ndarray:
    """Fixed-width id row: caption ids then PAD out to t_max."""
    if len(caption) > t_max:
        raise DataError(f"caption of length {len(caption)} exceeds t_max={t_max}")
    row = np.full(t_max, PAD_ID, dtype=np.int64)
    row[: len(caption)] = caption.ids
    return row


# ---------------------------------------------------------------------------
# examples and datasets
# ---------------------------------------------------------------------------

@dataclass
class Example:
    image_id: int
    feature: np.ndarray
    references: list[Caption] = field(default_factory=list)
    raw_captions: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if not np.all(np.isfinite(self.feature)):
            raise DataError(f"non-finite feature for image {self.image_id}")


def load_jsonl_records(path) -> list[tuple[int, np.ndarray, list[str]]]:
    """Parse the JSONL dataset format: one object per line with image_id,
    feature (list of numbers) and captions (list of strings)."""
    records = []
    feat_dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: malformed JSON on line {lineno}: {e}") from None
            try:
                image_id = int(obj["image_id"])
                feature = np.asarray(obj["feature"], dtype=np.float64)
                captions = [str(c) for c in obj["captions"]]
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}: bad record on line {lineno}: {e}") from None
            if feature.ndim != 1:
                raise DataError(f"{path}: feature on line {lineno} is not a flat array")
            if feat_dim is None:
                feat_dim = feature.shape[0]
            elif feature.shape[0] != feat_dim:
                raise DataError(f"{path}: feature dim {feature.shape[0]} on line {lineno} "
                                f"does not match earlier dim {feat_dim}")
            if not captions:
                raise DataError(f"{path}: no captions on line {lineno}")
            records.append((image_id, feature, captions))
    return records


def make_examples(records, vocab: Vocabulary, t_max: int = DEFAULT_T_MAX) -> list[Example]:
    out = []
    for image_id, feature, captions in records:
        refs = [encode(c, vocab, t_max) for c in captions]
        out.append(Example(image_id=image_id, feature=feature,
                           references=refs, raw_captions=list(captions)))
    return out


def load_jsonl_dataset(path, vocab: Vocabulary, t_max: int = DEFAULT_T_MAX) -> list[Example]:
    return make_examples(load_jsonl_records(path), vocab, t_max)


def write_jsonl_dataset(path, records) -> None:
    """Writer matching load_jsonl_records: (image_id, feature, captions) triples."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, feature, captions in records:
            obj = {"image_id": int(image_id),
                   "feature": [float(x) for x in np.asarray(feature).ravel()],
                   "captions": list(captions)}
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# synthetic scene-caption corpus
# ---------------------------------------------------------------------------

DEFAULT_SUBJECTS = [
    "cat", "dog", "bird", "horse", "sheep", "child", "robot", "turtle",
    "frog", "rabbit", "farmer", "painter", "singer", "pilot", "monkey", "fox",
]
DEFAULT_ATTRIBUTES = [
    "red", "blue", "small", "big", "old", "young", "happy", "quiet", "bright", "fuzzy",
]
DEFAULT_RELATIONS = [
    "chases", "watches", "follows", "carries", "greets", "paints", "draws", "finds",
]
DEFAULT_OBJECTS = [
    "ball", "box", "kite", "drum", "apple", "stone", "flower", "book",
    "ladder", "wagon", "mirror", "bottle", "basket", "lantern", "wheel", "bell",
]

# each template is a tuple of literal words and slot names
TEMPLATES = [
    ("a", "{attr}", "{subj}", "{rel}", "a", "{obj}"),
    ("the", "{attr}", "{subj}", "{rel}", "the", "{obj}"),
    ("a", "{subj}", "{rel}", "a", "{attr}", "{obj}"),
    ("the", "{subj}", "{rel}", "the", "{attr}", "{obj}"),
    ("there", "is", "a", "{attr}", "{subj}", "that", "{rel}", "a", "{obj}"),
]


@dataclass
class GrammarSpec:
    """Finite scene grammar: (subject, attribute, relation, object) tuples
    rendered through fixed sentence templates.

    Features are a block-structured random projection of the scene one-hot:
    each slot owns a contiguous slice of the feature vector, so scenes that
    differ in one slot differ only in that slot's block (before noise). The
    projection is seeded by proj_seed, independent of the per-dataset seed,
    so train and held-out files generated with different seeds share one
    feature space.
    """
    subjects: list[str] = field(default_factory=lambda: list(DEFAULT_SUBJECTS))
    attributes: list[str] = field(default_factory=lambda: list(DEFAULT_ATTRIBUTES))
    relations: list[str] = field(default_factory=lambda: list(DEFAULT_RELATIONS))
    objects: list[str] = field(default_factory=lambda: list(DEFAULT_OBJECTS))
    k_refs: int = 5
    feature_dim: int = 64
    noise_std: float = 0.05
    proj_seed: int = 7

    def validate(self):
        for name in ("subjects", "attributes", "relations", "objects"):
            if not getattr(self, name):
                raise ConfigError(f"grammar spec has an empty {name} set")
        if self.k_refs < 1:
            raise ConfigError("k_refs must be >= 1")
        if self.feature_dim < 4:
            raise ConfigError("feature_dim must be >= 4 (one block per slot)")

    @classmethod
    def from_json_file(cls, path) -> "GrammarSpec":
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
        allowed = {"subjects", "attributes", "relations", "objects",
                   "k_refs", "feature_dim", "noise_std", "proj_seed"}
        unknown = set(blob) - allowed
        if unknown:
            raise ConfigError(f"unknown grammar spec keys: {sorted(unknown)}")
        return cls(**blob)

    def slot_sets(self):
        return [self.subjects, self.attributes, self.relations, self.objects]

    def render(self, scene: tuple, template_idx: int) -> str:
        subj, attr, rel, obj = scene
        fill = {"{subj}": self.subjects[subj], "{attr}": self.attributes[attr],
                "{rel}": self.relations[rel], "{obj}": self.objects[obj]}
        return " ".join(fill.get(w, w) for w in TEMPLATES[template_idx % len(TEMPLATES)])

    def parses(self, sentence: str) -> bool:
        """True iff the sentence is derivable from some template and scene."""
        words = sentence.lower().split()
        sets = {"{subj}": set(self.subjects), "{attr}": set(self.attributes),
                "{rel}": set(self.relations), "{obj}": set(self.objects)}
        for tpl in TEMPLATES:
            if len(tpl) != len(words):
                continue
            ok = True
            for slot, w in zip(tpl, words):
                if slot in sets:
                    if w not in sets[slot]:
                        ok = False
                        break
                elif slot != w:
                    ok = False
                    break
            if ok:
                return True
        return False

    def _projection(self) -> list[np.ndarray]:
        """One fixed random block per slot, rows partitioning the feature dim."""
        rng = Stream(derive_seed(self.proj_seed, "grammar-projection"))
        sizes = [len(s) for s in self.slot_sets()]
        bounds = np.linspace(0, self.feature_dim, num=5, dtype=int)
        blocks = []
        for k, size in enumerate(sizes):
            width = bounds[k + 1] - bounds[k]
            blocks.append(rng.normal(0.0, 1.0, size=(width, size)))
        return blocks

    def feature_of(self, scene: tuple, noise: np.ndarray | None = None) -> np.ndarray:
        blocks = getattr(self, "_proj_cache", None)
        if blocks is None:
            blocks = self._projection()
            self._proj_cache = blocks
        parts = [blocks[k][:, scene[k]] for k in range(4)]
        feat = np.concatenate(parts)
        if noise is not None:
            feat = feat + noise
        return feat


def gen_synthetic_dataset(spec: GrammarSpec, n: int, seed: int):
    """Draw n latent scenes and render k_refs captions each.

    Returns (image_id, feature, captions) records, deterministic in
    (spec, n, seed); write with write_jsonl_dataset to get the JSONL format.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    spec.validate()
    rng = Stream(derive_seed(seed, "synthetic-scenes"))
    sizes = [len(s) for s in spec.slot_sets()]
    records = []
    for i in range(n):
        scene = tuple(int(rng.integers(0, size)) for size in sizes)
        noise = (rng.normal(0.0, spec.noise_std, size=spec.feature_dim)
                 if spec.noise_std > 0 else None)
        feature = spec.feature_of(scene, noise)
        captions = [spec.render(scene, t) for t in range(spec.k_refs)]
        records.append((i, feature, captions))
    return records


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class PairBatch:
    """One discriminator input batch of a single kind (real / fake / wrong)."""
    kind: str
    image_ids: np.ndarray        # (B,) image providing the feature
    features: np.ndarray         # (d, B)
    captions: np.ndarray         # (B, t_max) PAD-padded ids
    lengths: np.ndarray          # (B,) true caption lengths
    caption_image_ids: np.ndarray  # (B,) image the caption came from

    @property
    def batch_size(self) -> int:
        return self.features.shape[1]


def _stack_batch(kind, examples, captions, caption_image_ids, t_max):
    feats = np.stack([ex.feature for ex in examples], axis=1)
    ids = np.stack([pad_ids(c, t_max) for c in captions])
    lengths = np.array([len(c) for c in captions], dtype=np.int64)
    image_ids = np.array([ex.image_id for ex in examples], dtype=np.int64)
    return PairBatch(kind=kind, image_ids=image_ids, features=feats, captions=ids,
                     lengths=lengths, caption_image_ids=np.asarray(caption_image_ids))


def random_derangement(n: int, rng: Stream) -> np.ndarray:
    """Uniform random derangement by rejection sampling over permutations."""
    if n < 2:
        raise ConfigError("a derangement needs at least 2 rows")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def assemble_pair_batches(examples, fake_captions, rng: Stream, t_max: int):
    """Build (real, fake, wrong) batches for a fixed list of examples.

    fake_captions must align with examples (one generated Caption each); the
    wrong batch pairs each feature with the real caption of a deranged row.
    """
    if len(examples) < 2:
        raise ConfigError("pair batches need batch_size >= 2 to form wrong pairs")
    if len({ex.image_id for ex in examples}) != len(examples):
        raise DataError("pair batch rows must come from distinct images")
    own_ids = [ex.image_id for ex in examples]

    real_caps = [ex.references[int(rng.integers(0, len(ex.references)))] for ex in examples]
    real = _stack_batch("real", examples, real_caps, own_ids, t_max)

    fake = _stack_batch("fake", examples, list(fake_captions), own_ids, t_max)

    sigma = random_derangement(len(examples), rng)
    wrong_caps = [real_caps[j] for j in sigma]
    wrong_ids = [own_ids[j] for j in sigma]
    wrong = _stack_batch("wrong", examples, wrong_caps, wrong_ids, t_max)
    return real, fake, wrong


def make_pair_batches(data, sampler, batch_size: int, rng: Stream,
                      t_max: int = DEFAULT_T_MAX):
    """Sample a batch of examples and return (real, fake, wrong) PairBatches.

    sampler(examples) must return one generated Caption per example; the
    caller owns the seeded rng.
    """
    if batch_size < 2:
        raise ConfigError("batch_size=1 cannot form a wrong pair")
    if batch_size > len(data):
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {len(data)}")
    idx = rng.choice(len(data), size=batch_size, replace=False)
    chosen = [data[int(i)] for i in idx]
    fakes = sampler(chosen)
    return assemble_pair_batches(chosen, fakes, rng, t_max)
