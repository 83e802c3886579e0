"""Persona-dialogue data: tokenizer, vocabulary, serialization, synthetic corpus, JSONL I/O."""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Batch, LengthError

PAD, BOS, EOS, P_SEP, CTX, UTT, RES, UNK = "<pad>", "<bos>", "<eos>", "<p>", "<ctx>", "<utt>", "<res>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, P_SEP, CTX, UTT, RES, UNK)

Permutation = tuple[int, ...]
Tokens = tuple[str, ...]

_TOKEN_RE = re.compile(r"<[a-z]+>|[a-z0-9]+|[^\sa-z0-9]")
_NO_SPACE_BEFORE = set(".,!?;:)'")


class SchemaError(ValueError):
    """A JSONL record does not match the dialogue schema."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation off as its own token."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    out = ""
    for tok in tokens:
        if out and tok not in _NO_SPACE_BEFORE and not out.endswith("'"):
            out += " "
        out += tok
    return out


def normalize(text: str) -> str:
    return detokenize(tokenize(text))


class Vocabulary:
    """Bijective token/id map with the special tokens at the lowest ids."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.itos: list[str] = tokens
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocabulary":
        rest = sorted(set(words) - set(SPECIAL_TOKENS))
        return cls(list(SPECIAL_TOKENS) + rest)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.itos, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class DialogueSample:
    """Persona sentences, context utterances and the gold response, all tokenized."""

    persona: tuple[Tokens, ...]
    context: tuple[Tokens, ...]
    response: Tokens

    def __post_init__(self):
        if len(self.persona) < 1:
            raise SchemaError("persona needs at least one sentence")
        if any(len(s) == 0 for s in self.persona):
            raise SchemaError("persona sentences must be nonempty")
        if len(self.context) < 1:
            raise SchemaError("context needs at least one utterance")
        if len(self.response) == 0:
            raise SchemaError("response must be nonempty")

    @classmethod
    def from_text(cls, persona: Sequence[str], context: Sequence[str], response: str) -> "DialogueSample":
        return cls(
            tuple(tuple(tokenize(s)) for s in persona),
            tuple(tuple(tokenize(u)) for u in context),
            tuple(tokenize(response)),
        )

    def to_record(self) -> dict:
        return {
            "persona": [detokenize(s) for s in self.persona],
            "context": [detokenize(u) for u in self.context],
            "response": detokenize(self.response),
        }

    @property
    def n_persona(self) -> int:
        return len(self.persona)

    def words(self) -> Iterable[str]:
        for s in self.persona:
            yield from s
        for u in self.context:
            yield from u
        yield from self.response


@dataclass(frozen=True)
class Dataset:
    samples: tuple[DialogueSample, ...]
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.samples[i], self.split)
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


# ---------------------------------------------------------------------------
# permutations


def shuffle_persona(n: int, rng: np.random.Generator) -> Permutation:
    """Uniform random permutation of ``range(n)`` by Fisher-Yates."""
    if n < 1:
        raise ValueError("n must be >= 1")
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return tuple(perm)


def identity(n: int) -> Permutation:
    return tuple(range(n))


def is_permutation(perm: Sequence[int], n: int | None = None) -> bool:
    n = len(perm) if n is None else n
    return len(perm) == n and sorted(perm) == list(range(n))


def _check_perm(perm: Sequence[int], n: int) -> None:
    if not is_permutation(perm, n):
        raise ValueError(f"{tuple(perm)} is not a permutation of range({n})")


# ---------------------------------------------------------------------------
# serialization


def _persona_context(sample: DialogueSample, perm: Sequence[int]) -> list[str]:
    _check_perm(perm, sample.n_persona)
    toks: list[str] = []
    for j in perm:
        toks.append(P_SEP)
        toks.extend(sample.persona[j])
    toks.append(CTX)
    for i, utt in enumerate(sample.context):
        if i:
            toks.append(UTT)
        toks.extend(utt)
    return toks


def serialize_decoder_tokens(sample: DialogueSample, perm: Sequence[int]) -> tuple[list[str], list[bool]]:
    toks = [BOS] + _persona_context(sample, perm) + [RES]
    mask = [False] * len(toks)
    toks += list(sample.response) + [EOS]
    mask += [True] * (len(sample.response) + 1)
    return toks, mask


def serialize_decoder_input(
    sample: DialogueSample,
    perm: Sequence[int],
    vocab: Vocabulary,
    max_seq_len: int | None = None,
    index: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """``<bos> <p> s.. <p> s.. <ctx> u1 <utt> u2 <res> r <eos>`` plus the response mask."""
    toks, mask = serialize_decoder_tokens(sample, perm)
    if max_seq_len is not None and len(toks) > max_seq_len:
        where = f"sample {index}" if index is not None else "sample"
        raise LengthError(f"{where}: serialized length {len(toks)} exceeds max_seq_len {max_seq_len}")
    return np.array(vocab.encode(toks), dtype=np.int64), np.array(mask, dtype=bool)


def serialize_encdec_input(
    sample: DialogueSample,
    perm: Sequence[int],
    vocab: Vocabulary,
    max_seq_len: int | None = None,
    index: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Source ``<p> s.. <ctx> u..`` and target ``<bos> r <eos>`` (independent of ``perm``)."""
    src = _persona_context(sample, perm)
    tgt = [BOS] + list(sample.response) + [EOS]
    if max_seq_len is not None and max(len(src), len(tgt)) > max_seq_len:
        where = f"sample {index}" if index is not None else "sample"
        raise LengthError(f"{where}: serialized length {max(len(src), len(tgt))} exceeds max_seq_len {max_seq_len}")
    return np.array(vocab.encode(src), dtype=np.int64), np.array(vocab.encode(tgt), dtype=np.int64)


def decoder_prefix(sample: DialogueSample, perm: Sequence[int], vocab: Vocabulary) -> np.ndarray:
    """Serialized conditioning up to and including ``<res>``."""
    toks = [BOS] + _persona_context(sample, perm) + [RES]
    return np.array(vocab.encode(toks), dtype=np.int64)


def _pad(rows: Sequence[np.ndarray], fill=0, dtype=np.int64) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=dtype)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def make_batch(
    samples: Sequence[DialogueSample],
    perms: Sequence[Sequence[int]],
    vocab: Vocabulary,
    arch: str,
    max_seq_len: int | None = None,
    indices: Sequence[int] | None = None,
) -> Batch:
    """Serialize, shift and right-pad a list of samples under the given orderings.

    For both architectures, ``mask`` marks exactly the response tokens and
    ``<eos>`` in target space, so the masked positions are aligned across
    orderings of the same samples.
    """
    idx = list(indices) if indices is not None else [None] * len(samples)
    if arch == "decoder_only":
        ins, tgts, masks = [], [], []
        for s, p, i in zip(samples, perms, idx):
            ids, m = serialize_decoder_input(s, p, vocab, max_seq_len, i)
            ins.append(ids[:-1])
            tgts.append(ids[1:])
            masks.append(m[1:])
        return Batch(_pad(ins), _pad(tgts), _pad(masks, False, bool))
    srcs, ins, tgts = [], [], []
    for s, p, i in zip(samples, perms, idx):
        src, tgt = serialize_encdec_input(s, p, vocab, max_seq_len, i)
        srcs.append(src)
        ins.append(tgt[:-1])
        tgts.append(tgt[1:])
    mask = _pad([np.ones(len(t), dtype=bool) for t in tgts], False, bool)
    return Batch(_pad(ins), _pad(tgts), mask, _pad(srcs))


def max_serialized_length(dataset: Iterable[DialogueSample]) -> int:
    longest = 0
    for s in dataset:
        toks, _ = serialize_decoder_tokens(s, identity(s.n_persona))
        longest = max(longest, len(toks))
    return longest


# ---------------------------------------------------------------------------
# JSONL


def _validate_record(obj, lineno: int) -> DialogueSample:
    if not isinstance(obj, dict):
        raise SchemaError(f"line {lineno}: expected a JSON object")
    for key in ("persona", "context", "response"):
        if key not in obj:
            raise SchemaError(f"line {lineno}: missing field {key!r}")
    persona, context, response = obj["persona"], obj["context"], obj["response"]
    if not isinstance(persona, list) or not all(isinstance(s, str) for s in persona):
        raise SchemaError(f"line {lineno}: 'persona' must be an array of strings")
    if not isinstance(context, list) or not all(isinstance(s, str) for s in context):
        raise SchemaError(f"line {lineno}: 'context' must be an array of strings")
    if not isinstance(response, str) or not tokenize(response):
        raise SchemaError(f"line {lineno}: 'response' must be a nonempty string")
    try:
        return DialogueSample.from_text(persona, context, response)
    except SchemaError as exc:
        raise SchemaError(f"line {lineno}: {exc}") from None


def load_jsonl(path, split: str = "train") -> Dataset:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            samples.append(_validate_record(obj, lineno))
    return Dataset(tuple(samples), split)


def dumps_record(record: dict) -> str:
    """Canonical single-line JSON used for every JSONL artifact."""
    return json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def save_jsonl(dataset: Iterable[DialogueSample], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for s in dataset:
            fh.write(dumps_record(s.to_record()) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic corpus

# category -> (persona template, values); every template names its slot once
CATEGORIES: dict[str, tuple[str, tuple[str, ...]]] = {
    "hobby": ("in my spare time i enjoy {}", (
        "painting", "knitting", "hiking", "fishing", "gardening", "baking", "dancing", "reading",
        "camping", "sewing", "surfing", "climbing", "drawing", "writing", "singing", "juggling",
        "pottery", "archery", "kayaking", "birding", "origami", "sculpting", "rowing", "sailing",
        "woodworking", "snorkeling", "skating", "cycling", "running", "yoga",
    )),
    "job": ("i work as a {}", (
        "teacher", "nurse", "chef", "pilot", "farmer", "lawyer", "dentist", "plumber", "baker",
        "carpenter", "firefighter", "librarian", "mechanic", "painter", "pharmacist", "programmer",
        "scientist", "tailor", "translator", "veterinarian", "waiter", "writer", "architect",
        "accountant", "barber", "cashier", "electrician", "engineer", "journalist", "photographer",
    )),
    "pet": ("i have a pet {} at home", (
        "cat", "dog", "hamster", "parrot", "rabbit", "turtle", "goldfish", "snake", "lizard",
        "ferret", "pony", "gecko", "iguana", "canary", "chinchilla", "hedgehog", "mouse", "rat",
        "frog", "tarantula", "duck", "goat", "pig", "chicken", "crab", "axolotl", "cockatoo",
        "donkey", "llama", "alpaca",
    )),
    "food": ("my favorite food is {}", (
        "pizza", "sushi", "tacos", "pasta", "curry", "burgers", "ramen", "salad", "steak",
        "lasagna", "dumplings", "pancakes", "waffles", "noodles", "burritos", "falafel", "kebab",
        "paella", "risotto", "chowder", "gumbo", "nachos", "omelets", "pierogi", "goulash",
        "tempura", "pho", "gnocchi", "bagels", "casserole",
    )),
    "color": ("the color i like most is {}", (
        "red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "black", "white",
        "gray", "teal", "maroon", "navy", "olive", "lime", "cyan", "magenta", "beige", "violet",
        "indigo", "gold", "silver", "turquoise", "lavender", "crimson", "amber", "coral", "ivory",
        "scarlet",
    )),
    "drink": ("every morning i drink {}", (
        "coffee", "tea", "juice", "milk", "water", "soda", "lemonade", "cocoa", "smoothies",
        "kombucha", "cider", "espresso", "latte", "mocha", "chai", "matcha", "seltzer", "kefir",
        "horchata", "eggnog", "punch", "broth", "cappuccino", "macchiato", "yerba", "oolong",
        "rooibos", "americano", "lassi", "sake",
    )),
    "sport": ("on weekends i play {} with friends", (
        "soccer", "tennis", "basketball", "baseball", "golf", "hockey", "volleyball", "rugby",
        "cricket", "badminton", "squash", "lacrosse", "handball", "softball", "polo", "bowling",
        "curling", "frisbee", "pickleball", "racquetball", "netball", "dodgeball", "kickball",
        "croquet", "billiards", "darts", "chess", "checkers", "football", "pingpong",
    )),
    "city": ("i was born in {}", (
        "paris", "london", "tokyo", "berlin", "madrid", "rome", "boston", "chicago", "denver",
        "seattle", "dallas", "miami", "toronto", "sydney", "dublin", "oslo", "vienna", "prague",
        "lisbon", "athens", "cairo", "lima", "seoul", "mumbai", "nairobi", "houston", "phoenix",
        "austin", "portland", "atlanta",
    )),
    "music": ("i always listen to {} songs", (
        "jazz", "rock", "pop", "blues", "country", "reggae", "metal", "punk", "folk", "disco",
        "techno", "classical", "opera", "soul", "funk", "gospel", "salsa", "swing", "grunge",
        "ska", "bluegrass", "rap", "house", "trance", "ambient", "polka", "tango", "mambo",
        "samba", "zydeco",
    )),
    "car": ("the car i drive is a {}", (
        "sedan", "truck", "van", "jeep", "coupe", "convertible", "minivan", "hatchback", "wagon",
        "roadster", "limo", "buggy", "camper", "pickup", "suv", "cabriolet", "hybrid", "taxi",
        "hearse", "tractor", "scooter", "motorbike", "moped", "bus", "trolley", "rv", "crossover",
        "microcar", "hotrod", "kart",
    )),
}

GREETINGS = (
    "hi !", "hello !", "hey there .", "hi , how are you ?", "good morning !", "hello , nice to meet you .",
    "hey , how is it going ?", "hi there , what is up ?", "good evening .", "howdy !",
)
SMALL_TALK = (
    "i am doing well , thanks .", "it is a nice day today .", "i just got back from work .",
    "i am a bit tired today .", "that sounds great .", "i am glad to hear that .",
    "tell me about yourself .", "i was just thinking about you .", "not much , just relaxing .",
    "i love chatting with new people .",
)


@dataclass(frozen=True)
class GenConfig:
    n_personas: int = 4
    n_train: int = 2000
    n_test: int = 200
    n_categories: int = 8
    seed: int = 42

    def validate(self) -> None:
        if self.n_personas < 1:
            raise ValueError("n_personas must be >= 1")
        if self.n_categories > len(CATEGORIES):
            raise ValueError(f"n_categories must be <= {len(CATEGORIES)}")
        if self.n_categories < self.n_personas:
            raise ValueError("n_categories must be >= n_personas")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("n_train must be >= 1 and n_test >= 0")


def _synthetic_sample(rng: np.random.Generator, cats: Sequence[str], n_personas: int) -> DialogueSample:
    held = sorted(rng.choice(len(cats), size=n_personas, replace=False).tolist())
    persona, values = [], {}
    for ci in held:
        name = cats[ci]
        template, pool = CATEGORIES[name]
        values[name] = pool[int(rng.integers(len(pool)))]
        persona.append(template.format(values[name]))
    asked = cats[held[int(rng.integers(n_personas))]]
    context = [GREETINGS[int(rng.integers(len(GREETINGS)))]]
    if rng.random() < 0.5:
        context.append(SMALL_TALK[int(rng.integers(len(SMALL_TALK)))])
    context.append(f"what is your {asked} ?")
    return DialogueSample.from_text(persona, context, f"my {asked} is {values[asked]}")


def generate_synthetic_corpus(config: GenConfig) -> tuple[Dataset, Dataset, Vocabulary]:
    """Order-invariant persona QA corpus.

    Persona sentences appear in a fixed category order (profile-form order);
    the last context utterance asks about one held category and the gold
    response restates its value, so the answer never depends on ordering.
    """
    config.validate()
    cats = list(CATEGORIES)[: config.n_categories]
    rng = np.random.default_rng(config.seed)
    train = tuple(_synthetic_sample(rng, cats, config.n_personas) for _ in range(config.n_train))
    test = tuple(_synthetic_sample(rng, cats, config.n_personas) for _ in range(config.n_test))
    words = {w for s in train + test for w in s.words()}
    return Dataset(train, "train"), Dataset(test, "test"), Vocabulary.build(words)


def n_orderings(n: int) -> int:
    return math.factorial(n)
