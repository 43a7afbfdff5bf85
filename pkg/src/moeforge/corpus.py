"""Synthetic domain corpora over one shared 256-token vocabulary.

Four generative grammars (general prose, arithmetic equalities, bracketed
code, key-value science facts) produce token streams with very different
unigram statistics while drawing from a single id space, so any model can
consume any domain's sequences. Generation is a pure function of
(domain, seed); grammar structure lives in fixed constants and only the
sampling consumes randomness.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

DOMAINS = ("general", "math", "code", "science")
DOMAIN_TAGS = {name: i for i, name in enumerate(DOMAINS)}
CALIBRATION_TAG = 100

CORPUS_MAGIC = b"SMQC"
CORPUS_VERSION = 1
MIN_SEQ_LEN = 16  # every grammar unit fits below this, so filling never truncates

# id layout: 0-9 digits, 10-21 punctuation, 22-121 words, 122-185 code
# identifiers, 186-249 science terms, 250-255 specials
DIGIT0 = 0
PUNCT0 = 10
WORD0 = 22
IDENT0 = 122
TERM0 = 186
SPECIAL0 = 250

PUNCT = ("+", "-", "*", "=", "(", ")", "{", "}", ";", ":", ".", ",")
PLUS, MINUS, STAR, EQ, LPAREN, RPAREN, LBRACE, RBRACE, SEMI, COLON, PERIOD, COMMA = range(
    PUNCT0, PUNCT0 + 12
)

WORDS = (
    "the a an and or but if then else when where while for with "
    "old new small large good bad fast slow light dark warm cold "
    "river stone tree bird fish cloud rain wind fire earth night day moon sun "
    "road house door wall roof floor field hill lake sea ship sail rope sand "
    "man woman child friend king queen guard smith baker rider singer walker "
    "goes walks runs sees hears finds keeps gives takes makes builds breaks "
    "holds turns opens closes begins ends grows falls rises sleeps wakes speaks "
    "very almost never always often soon late early again once"
).split()

IDENTS = tuple(f"{p}{s}" for p in ("x", "y", "z", "v", "w", "p", "q", "r") for s in range(8))

TERMS = tuple(
    f"{b}_{k}"
    for b in ("atom", "ion", "cell", "gene", "flux", "mass", "wave", "bond")
    for k in range(8)
)

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<cls>", "<unk>")


def shared_vocab() -> list[str]:
    vocab = [str(d) for d in range(10)]
    vocab += list(PUNCT)
    vocab += list(WORDS)
    vocab += list(IDENTS)
    vocab += list(TERMS)
    vocab += list(SPECIALS)
    if len(vocab) != 256 or len(set(vocab)) != 256:
        raise AssertionError("vocabulary layout broken")
    return vocab


VOCAB_SIZE = 256


def decode(tokens, vocab: list[str] | None = None) -> list[str]:
    vocab = vocab if vocab is not None else shared_vocab()
    return [vocab[int(t)] for t in tokens]


# ---------------------------------------------------------------------------
# grammar units


def _digit_tokens(value: int) -> list[int]:
    return [DIGIT0 + int(ch) for ch in str(value)]


# fixed first-order successor structure over the 100 words
_N_SUCC = 5
_SUCC_WEIGHTS = (0.40, 0.25, 0.15, 0.12, 0.08)


def _successors(w: int) -> list[int]:
    return [(w * 13 + 7 * j + 1) % len(WORDS) for j in range(_N_SUCC)]


def _unit_general(rng: np.random.Generator) -> list[int]:
    length = int(rng.integers(4, 11))
    w = int(rng.integers(len(WORDS)))
    out = [WORD0 + w]
    for _ in range(length - 1):
        w = _successors(w)[int(rng.choice(_N_SUCC, p=_SUCC_WEIGHTS))]
        out.append(WORD0 + w)
    out.append(PERIOD)
    return out


def _unit_math(rng: np.random.Generator) -> list[int]:
    a = int(rng.integers(0, 100))
    b = int(rng.integers(0, 100))
    op = int(rng.integers(3))
    if op == 1 and b > a:
        a, b = b, a  # keep results nonnegative so digits suffice
    c = (a + b, a - b, a * b)[op]
    op_tok = (PLUS, MINUS, STAR)[op]
    return _digit_tokens(a) + [op_tok] + _digit_tokens(b) + [EQ] + _digit_tokens(c) + [SEMI]


def _unit_code(rng: np.random.Generator) -> list[int]:
    def value() -> int:
        if rng.integers(2):
            return IDENT0 + int(rng.integers(len(IDENTS)))
        return DIGIT0 + int(rng.integers(10))

    def simple() -> list[int]:
        return [IDENT0 + int(rng.integers(len(IDENTS))), EQ, value(), SEMI]

    kind = int(rng.integers(3))
    if kind == 0:
        return simple()
    if kind == 1:
        op = (PLUS, MINUS, STAR)[int(rng.integers(3))]
        lhs = IDENT0 + int(rng.integers(len(IDENTS)))
        return [lhs, EQ, LPAREN, value(), op, value(), RPAREN, SEMI]
    return [LBRACE] + simple() + simple() + [RBRACE]


def _unit_science(rng: np.random.Generator) -> list[int]:
    def value() -> list[int]:
        if rng.integers(10) < 6:
            return [TERM0 + int(rng.integers(len(TERMS)))]
        return _digit_tokens(int(rng.integers(100)))

    key = TERM0 + int(rng.integers(len(TERMS)))
    out = [key, COLON] + value()
    if rng.integers(4) == 0:
        out += [COMMA] + value()
    out.append(PERIOD)
    return out


_UNITS = {
    "general": _unit_general,
    "math": _unit_math,
    "code": _unit_code,
    "science": _unit_science,
}


def gen_corpus(domain: str, seed: int, n_sequences: int, seq_len: int) -> list[np.ndarray]:
    """Sequences of whole grammar units, each filled up to seq_len tokens."""
    if domain not in _UNITS:
        raise ValueError(f"unknown domain {domain!r}")
    if n_sequences < 1:
        raise ValueError("n_sequences must be at least 1")
    if seq_len < MIN_SEQ_LEN:
        raise ValueError(f"seq_len must be at least {MIN_SEQ_LEN}")
    unit = _UNITS[domain]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, DOMAIN_TAGS[domain]))))
    out = []
    for _ in range(n_sequences):
        seq: list[int] = []
        while True:
            u = unit(rng)
            if len(seq) + len(u) > seq_len:
                break
            seq.extend(u)
        out.append(np.asarray(seq, dtype=np.int64))
    return out


# ---------------------------------------------------------------------------
# grammar oracles


def math_units_hold(tokens, vocab: list[str] | None = None) -> bool:
    """Every ;-terminated unit must encode a correct binary equality."""
    words = decode(tokens, vocab)
    unit: list[str] = []
    for w in words + [";"]:
        if w != ";":
            unit.append(w)
            continue
        if not unit:
            continue
        if "=" not in unit:
            return False
        cut = unit.index("=")
        lhs, rhs = unit[:cut], unit[cut + 1 :]
        op_at = [i for i, s in enumerate(lhs) if s in "+-*"]
        if len(op_at) != 1:
            return False
        i = op_at[0]
        try:
            a = int("".join(lhs[:i]))
            b = int("".join(lhs[i + 1 :]))
            c = int("".join(rhs))
        except ValueError:
            return False
        op = lhs[i]
        got = a + b if op == "+" else a - b if op == "-" else a * b
        if got != c:
            return False
        unit = []
    return True


def brackets_balanced(tokens, vocab: list[str] | None = None) -> bool:
    pairs = {")": "(", "}": "{"}
    stack: list[str] = []
    for w in decode(tokens, vocab):
        if w in "({":
            stack.append(w)
        elif w in ")}":
            if not stack or stack.pop() != pairs[w]:
                return False
    return not stack


def unigram_distribution(sequences, vocab_size: int = VOCAB_SIZE) -> np.ndarray:
    counts = np.zeros(vocab_size, dtype=np.float64)
    for seq in sequences:
        counts += np.bincount(np.asarray(seq), minlength=vocab_size)
    total = counts.sum()
    if total == 0:
        raise ValueError("no tokens")
    return counts / total


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# calibration sampling


@dataclass
class CalibrationSet:
    sequences: list[np.ndarray]
    provenance: list[tuple[int, int]]  # (domain tag, index within source corpus)
    sampling_fraction: float
    seed: int
    biased: bool = False

    def __post_init__(self) -> None:
        if len(self.sequences) != len(self.provenance):
            raise ValueError("provenance must cover all sequences")


BIASED_SOURCE = 1  # the single corpus the biased ablation draws from


def sample_calibration(
    corpora: list[list[np.ndarray]], fraction: float, seed: int, biased: bool = False
) -> CalibrationSet:
    """Uniform without-replacement draw of ceil(fraction * size) per corpus.

    Drawn indices are emitted sorted, so fraction 1.0 reproduces each
    corpus in its original order. Biased mode spends the same total budget
    but draws only from corpus BIASED_SOURCE.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if not corpora or any(len(c) == 0 for c in corpora):
        raise ValueError("empty corpus")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, CALIBRATION_TAG))))
    per_corpus = [math.ceil(fraction * len(c)) for c in corpora]
    sequences: list[np.ndarray] = []
    provenance: list[tuple[int, int]] = []
    if biased:
        if len(corpora) <= BIASED_SOURCE:
            raise ValueError("biased sampling needs the designated source corpus")
        src = corpora[BIASED_SOURCE]
        m = min(sum(per_corpus), len(src))
        for j in sorted(int(i) for i in rng.choice(len(src), size=m, replace=False)):
            sequences.append(src[j])
            provenance.append((BIASED_SOURCE, j))
    else:
        for d, corpus in enumerate(corpora):
            for j in sorted(int(i) for i in rng.choice(len(corpus), size=per_corpus[d], replace=False)):
                sequences.append(corpus[j])
                provenance.append((d, j))
    return CalibrationSet(
        sequences=sequences,
        provenance=provenance,
        sampling_fraction=float(fraction),
        seed=int(seed),
        biased=bool(biased),
    )


# ---------------------------------------------------------------------------
# file format


class CorpusFormatError(ValueError):
    pass


def write_corpus(sequences: list[np.ndarray], path, vocab_size: int = VOCAB_SIZE) -> None:
    """Binary layout: magic, version u32, vocab u32, count u32, then each
    sequence as a u32 length prefix plus u16 token ids, all little-endian."""
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<III", CORPUS_VERSION, vocab_size, len(sequences)))
        for seq in sequences:
            arr = np.asarray(seq)
            if arr.size == 0:
                raise CorpusFormatError("empty sequence")
            if arr.min() < 0 or arr.max() >= vocab_size:
                raise CorpusFormatError("token id out of vocabulary range")
            f.write(struct.pack("<I", arr.size))
            f.write(arr.astype("<u2").tobytes())


def read_corpus(path) -> tuple[list[np.ndarray], int]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CORPUS_MAGIC:
        raise CorpusFormatError("bad magic")
    version, vocab_size, n = struct.unpack_from("<III", blob, 4)
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version}")
    off = 16
    sequences = []
    for _ in range(n):
        if off + 4 > len(blob):
            raise CorpusFormatError("truncated length prefix")
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        end = off + 2 * length
        if end > len(blob):
            raise CorpusFormatError("truncated sequence payload")
        seq = np.frombuffer(blob[off:end], dtype="<u2").astype(np.int64)
        if seq.size and seq.max() >= vocab_size:
            raise CorpusFormatError("token id out of vocabulary range")
        sequences.append(seq)
        off = end
    if off != len(blob):
        raise CorpusFormatError("trailing bytes after last sequence")
    return sequences, vocab_size


def write_calibration(calib: CalibrationSet, path) -> None:
    """Corpus container plus a .json sidecar holding the draw's provenance."""
    write_corpus(calib.sequences, path)
    sidecar = {
        "sampling_fraction": calib.sampling_fraction,
        "seed": calib.seed,
        "biased": calib.biased,
        "provenance": [{"domain": d, "index": i} for d, i in calib.provenance],
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
        f.write("\n")


def read_calibration(path) -> CalibrationSet:
    sequences, _ = read_corpus(path)
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    return CalibrationSet(
        sequences=sequences,
        provenance=[(rec["domain"], rec["index"]) for rec in sidecar["provenance"]],
        sampling_fraction=sidecar["sampling_fraction"],
        seed=sidecar["seed"],
        biased=sidecar["biased"],
    )
