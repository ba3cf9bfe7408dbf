"""Synthetic stream-task generation and JSONL ingestion.

Six task families share one small token vocabulary but demand conflicting
input-to-response mappings, so sequential fine-tuning interferes across
tasks while instruction text cleanly separates families. Responses are
canonical lowercase single-space strings produced by each family's own
ground-truth arithmetic, independent of any model code.

Train/eval disjointness holds for arbitrarily small payload spaces: the
payload space is partitioned by the parity of a stable payload hash, and
each split samples only from its own half.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IntegrityError, ParseError
from .util import fnv1a_64, rng_for

DATA_FORMAT_VERSION = 1

FAMILIES = ("modular_add", "reverse", "sort_tokens", "parity",
            "copy_masked", "feature_classify")

# The 4-family reference stream used by the end-to-end acceptance runs.
REFERENCE_FAMILIES = ("feature_classify", "modular_add", "copy_masked", "reverse")

BOS = "<bos>"
EOS = "<eos>"
ANS = "="
MASK = "_"
SEP = ":"

_LETTERS = tuple("abcdefgh")
_DIGITS = tuple(str(d) for d in range(10))

TOKENS = (
    BOS, EOS, ANS, MASK, SEP,
    *_DIGITS,
    *_LETTERS,
    "the", "order", "first", "second", "third",
    "add", "numbers", "modulo", "sum",
    "reverse", "sequence", "write", "backwards",
    "sort", "digits", "ascending", "arrange",
    "report", "parity", "of", "ones", "is", "count", "even", "or", "odd",
    "copy", "symbols", "hiding", "slot", "echo",
    "name", "category", "image", "classify", "which", "shown",
)

# Keyword-style templates: families share no words with each other, so
# the bag-of-tokens geometry separates them even though payload tokens
# vary per instance. Three phrasings per family.
TEMPLATES = {
    "modular_add": (
        "add the numbers modulo {p} : {xs}",
        "sum the numbers modulo {p} : {xs}",
        "add sum modulo {p} : {xs}",
    ),
    "reverse": (
        "reverse sequence : {xs}",
        "write sequence backwards : {xs}",
        "reverse backwards sequence : {xs}",
    ),
    "sort_tokens": (
        "sort digits ascending : {xs}",
        "arrange digits ascending order : {xs}",
        "sort arrange ascending : {xs}",
    ),
    "parity": (
        "report parity count ones : {xs}",
        "count ones even or odd : {xs}",
        "report even odd parity ones : {xs}",
    ),
    "copy_masked": (
        "copy symbols hiding {slot} slot : {xs}",
        "echo symbols hiding {slot} slot : {xs}",
        "copy echo {slot} slot symbols : {xs}",
    ),
    "feature_classify": (
        "name image category shown",
        "classify image name category",
        "which category shown image classify",
    ),
}

# Payload alphabets; the reference families are pairwise disjoint so no
# payload token ever bridges two of their instruction bags.
_FAMILY_DIGITS = {
    "sort_tokens": tuple(str(d) for d in range(2, 10)),
    "modular_add": _DIGITS,
}

_SLOT_WORDS = ("first", "second", "third")


class Vocabulary:
    """Fixed whitespace-token vocabulary shared by generator and model."""

    def __init__(self, tokens=TOKENS):
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.ans_id = self.index[ANS]

    def __len__(self):
        return len(self.tokens)

    def encode_text(self, text: str) -> list[int]:
        ids = []
        for tok in text.lower().split():
            if tok not in self.index:
                raise DataError(f"token {tok!r} not in vocabulary")
            ids.append(self.index[tok])
        return ids

    def decode(self, ids) -> str:
        # Ids in the model's vocab range but beyond the token list (the
        # model may allocate spare rows) render as visible placeholders;
        # they can never match a canonical response.
        return " ".join(
            self.tokens[i] if 0 <= i < len(self.tokens) else f"<{i}>" for i in ids
        )


def canonicalize(text: str) -> str:
    """Whitespace-normalized lowercase form used for exact-match grading."""
    return " ".join(text.lower().split())


# ---------------------------------------------------------------------------
# instances and tasks


@dataclass(frozen=True)
class InstructionInstance:
    instruction: str
    response: str
    features: tuple[float, ...] | None = None
    task_name: str = ""

    def feature_array(self) -> np.ndarray | None:
        if self.features is None:
            return None
        return np.asarray(self.features, dtype=np.float64)

    def identity(self):
        return (self.task_name, self.instruction, self.features, self.response)


@dataclass
class StreamTask:
    task_id: int
    name: str
    family: str
    train: list[InstructionInstance]
    eval: list[InstructionInstance]


_DEFAULT_PAYLOAD_LEN = {"parity": 6}


@dataclass(frozen=True)
class TaskFamilySpec:
    family: str
    n_train: int = 2000
    n_eval: int = 500
    payload_len: int | None = None
    modulus: int = 7
    num_classes: int = 8
    feature_dim: int = 8
    feature_noise: float = 0.25

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown task family: {self.family}")
        if self.n_train <= 0 or self.n_eval <= 0:
            raise ConfigError("n_train and n_eval must be positive")
        if not 2 <= self.modulus <= 9:
            raise ConfigError("modulus must be a single digit >= 2")
        if self.num_classes > 10:
            raise ConfigError("num_classes must fit the digit tokens")
        if self.payload_len is not None and self.payload_len < 1:
            raise ConfigError("payload_len must be positive")

    @property
    def plen(self) -> int:
        if self.payload_len is not None:
            return self.payload_len
        return _DEFAULT_PAYLOAD_LEN.get(self.family, 3)


def _payload_side(family: str, payload_key: str) -> int:
    """0 = train half, 1 = eval half of the payload space.

    Uses a high hash bit: FNV-1a's low bit is XOR-linear in the input
    bytes, which would correlate the split with parity-style labels.
    """
    return (fnv1a_64(f"{family}|{payload_key}".encode("utf-8")) >> 33) & 1


def _draw_instance(spec: TaskFamilySpec, rng, side: int) -> InstructionInstance:
    """Rejection-sample one instance whose payload falls on the given side."""
    family = spec.family
    templates = TEMPLATES[family]
    while True:
        template = templates[int(rng.integers(len(templates)))]
        features = None
        if family == "modular_add":
            pool = _FAMILY_DIGITS[family]
            xs = [pool[int(i)] for i in rng.integers(0, len(pool), size=spec.plen)]
            key = " ".join(xs)
            instruction = template.format(p=spec.modulus, xs=" ".join(xs))
            response = str(sum(int(d) for d in xs) % spec.modulus)
        elif family == "reverse":
            xs = [_LETTERS[int(i)] for i in rng.integers(0, len(_LETTERS),
                                                         size=spec.plen)]
            key = " ".join(xs)
            instruction = template.format(xs=" ".join(xs))
            response = " ".join(reversed(xs))
        elif family == "sort_tokens":
            pool = _FAMILY_DIGITS[family]
            xs = [pool[int(i)] for i in rng.integers(0, len(pool), size=spec.plen)]
            key = " ".join(xs)
            instruction = template.format(xs=" ".join(xs))
            response = " ".join(sorted(xs))
        elif family == "parity":
            xs = [str(int(b)) for b in rng.integers(0, 2, size=spec.plen)]
            key = " ".join(xs)
            instruction = template.format(xs=" ".join(xs))
            response = "odd" if sum(int(b) for b in xs) % 2 else "even"
        elif family == "copy_masked":
            if spec.plen > len(_SLOT_WORDS):
                raise ConfigError("copy_masked payload_len is capped at "
                                  f"{len(_SLOT_WORDS)} (one slot word each)")
            xs = [_LETTERS[int(i)] for i in rng.integers(0, len(_LETTERS),
                                                         size=spec.plen)]
            k = int(rng.integers(1, spec.plen + 1))
            key = f"{' '.join(xs)}|{k}"
            instruction = template.format(slot=_SLOT_WORDS[k - 1], xs=" ".join(xs))
            response = " ".join(MASK if i == k - 1 else x for i, x in enumerate(xs))
        elif family == "feature_classify":
            c = int(rng.integers(spec.num_classes))
            noise = rng.normal(0.0, spec.feature_noise, size=spec.feature_dim)
            vec = noise.copy()
            vec[c] += 1.5
            features = tuple(float(v) for v in vec)
            key = repr(features)
            instruction = template
            response = str(c)
        else:  # pragma: no cover - guarded by TaskFamilySpec
            raise ConfigError(f"unknown task family: {family}")
        if _payload_side(family, key) == side:
            return InstructionInstance(
                instruction=canonicalize(instruction),
                response=canonicalize(response),
                features=features,
                task_name=family,
            )


def build_task(spec: TaskFamilySpec, task_id: int, seed: int) -> StreamTask:
    rng = rng_for(seed, "task", spec.family, task_id)
    train = [_draw_instance(spec, rng, side=0) for _ in range(spec.n_train)]
    eval_ = [_draw_instance(spec, rng, side=1) for _ in range(spec.n_eval)]
    return StreamTask(task_id, spec.family, spec.family, train, eval_)


# ---------------------------------------------------------------------------
# template-overlap guard


def _template_tokens(family: str) -> set[str]:
    toks = set()
    for t in TEMPLATES[family]:
        for w in t.lower().split():
            if not (w.startswith("{") and w.endswith("}")):
                toks.add(w)
    toks.discard(SEP)
    return toks


def template_overlap(fam_a: str, fam_b: str) -> float:
    a, b = _template_tokens(fam_a), _template_tokens(fam_b)
    return len(a & b) / len(a | b)


def check_template_separation(families, limit: float = 0.5):
    for i, fa in enumerate(families):
        for fb in families[i + 1:]:
            ov = template_overlap(fa, fb)
            if ov >= limit:
                raise DataError(
                    f"template token overlap {ov:.2f} between {fa} and {fb} "
                    f"breaches the {limit} limit"
                )


# ---------------------------------------------------------------------------
# stream generation + manifest


def _instance_record(inst: InstructionInstance) -> dict:
    return {
        "task": inst.task_name,
        "instruction": inst.instruction,
        "features": None if inst.features is None else list(inst.features),
        "response": inst.response,
    }


def _jsonl_bytes(instances) -> bytes:
    lines = [json.dumps(_instance_record(i), sort_keys=True, ensure_ascii=True)
             for i in instances]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def manifest_body_hash(body: dict) -> str:
    return _sha256(json.dumps(body, sort_keys=True, ensure_ascii=True).encode("utf-8"))


def generate_stream(specs: list[TaskFamilySpec], seed: int, out_dir) -> Path:
    """Write one JSONL pair per task plus a hash-covered manifest.

    Deterministic: the same specs and seed produce byte-identical files.
    Returns the manifest path.
    """
    if len(specs) < 2:
        raise ConfigError("a stream needs at least two task families")
    names = [s.family for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate task families in one stream")
    check_template_separation(names)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task_entries = []
    for idx, spec in enumerate(specs, start=1):
        task = build_task(spec, idx, seed)
        train_bytes = _jsonl_bytes(task.train)
        eval_bytes = _jsonl_bytes(task.eval)
        train_path = out_dir / f"task{idx}_{spec.family}_train.jsonl"
        eval_path = out_dir / f"task{idx}_{spec.family}_eval.jsonl"
        train_path.write_bytes(train_bytes)
        eval_path.write_bytes(eval_bytes)
        task_entries.append({
            "task_id": idx,
            "name": spec.family,
            "family": spec.family,
            "n_train": spec.n_train,
            "n_eval": spec.n_eval,
            "spec": {
                "payload_len": spec.payload_len,
                "modulus": spec.modulus,
                "num_classes": spec.num_classes,
                "feature_dim": spec.feature_dim,
                "feature_noise": spec.feature_noise,
            },
            "train_file": train_path.name,
            "eval_file": eval_path.name,
            "train_sha256": _sha256(train_bytes),
            "eval_sha256": _sha256(eval_bytes),
        })
    body = {"version": DATA_FORMAT_VERSION, "seed": seed, "tasks": task_entries}
    manifest = dict(body)
    manifest["manifest_sha256"] = manifest_body_hash(body)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, sort_keys=True, ensure_ascii=True, indent=1) + "\n",
        encoding="utf-8",
    )
    return manifest_path


def _parse_jsonl(path: Path, expected_name: str) -> list[InstructionInstance]:
    instances = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON in {path.name}: {e.msg}", line=lineno)
            for field_name in ("task", "instruction", "features", "response"):
                if field_name not in rec:
                    raise ParseError(f"missing field {field_name!r} in {path.name}",
                                     line=lineno)
            if not str(rec["instruction"]).strip():
                raise ParseError(f"empty instruction in {path.name}", line=lineno)
            if not str(rec["response"]).strip():
                raise ParseError(f"empty response in {path.name}", line=lineno)
            if rec["task"] != expected_name:
                raise ParseError(
                    f"task name {rec['task']!r} does not match {expected_name!r}",
                    line=lineno,
                )
            features = rec["features"]
            instances.append(InstructionInstance(
                instruction=rec["instruction"],
                response=rec["response"],
                features=None if features is None else tuple(float(v) for v in features),
                task_name=rec["task"],
            ))
    return instances


def load_stream(manifest_path) -> list[StreamTask]:
    """Load and validate a generated stream; raises on any tampering."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"manifest is not valid JSON: {e.msg}", line=e.lineno)
    if manifest.get("version") != DATA_FORMAT_VERSION:
        raise IntegrityError(
            f"unsupported stream format version: {manifest.get('version')!r}"
        )
    stated = manifest.get("manifest_sha256")
    body = {k: v for k, v in manifest.items() if k != "manifest_sha256"}
    if manifest_body_hash(body) != stated:
        raise IntegrityError("manifest body does not match its stated hash")

    tasks = []
    for entry in manifest["tasks"]:
        for kind in ("train", "eval"):
            fpath = manifest_path.parent / entry[f"{kind}_file"]
            if not fpath.exists():
                raise IntegrityError(f"missing data file: {fpath.name}")
            if _sha256(fpath.read_bytes()) != entry[f"{kind}_sha256"]:
                raise IntegrityError(f"hash mismatch for {fpath.name}")
        train = _parse_jsonl(manifest_path.parent / entry["train_file"], entry["name"])
        eval_ = _parse_jsonl(manifest_path.parent / entry["eval_file"], entry["name"])
        if len(train) != entry["n_train"] or len(eval_) != entry["n_eval"]:
            raise IntegrityError(f"task {entry['name']}: instance counts disagree "
                                 "with the manifest")
        tasks.append(StreamTask(entry["task_id"], entry["name"], entry["family"],
                                train, eval_))
    return tasks


def build_stream(specs: list[TaskFamilySpec], seed: int) -> list[StreamTask]:
    """In-memory stream without touching disk (same instances as on-disk)."""
    if len(specs) < 2:
        raise ConfigError("a stream needs at least two task families")
    check_template_separation([s.family for s in specs])
    return [build_task(spec, idx, seed) for idx, spec in enumerate(specs, start=1)]


# ---------------------------------------------------------------------------
# generic pretraining corpus


def _skill_answer(rng, words, xs, digits_only: bool):
    """One generic transform of a payload, conditioned only on the payload
    itself and on a digit planted among the prefix words (never on which
    words appear). Returns (prefix words, answer tokens)."""
    skills = ["copy", "reverse", "sort", "mask", "modsum", "parity"]
    skill = skills[int(rng.integers(len(skills)))]
    prefix = list(words)
    if skill == "copy":
        ans = list(xs)
    elif skill == "reverse":
        ans = list(reversed(xs))
    elif skill == "sort":
        ans = sorted(xs)
    elif skill == "mask":
        k = int(rng.integers(1, len(xs) + 1))
        prefix.insert(int(rng.integers(len(prefix) + 1)), str(k))
        ans = [MASK if i == k - 1 else x for i, x in enumerate(xs)]
    elif skill == "modsum":
        if not digits_only:
            return None
        p = int(rng.integers(2, 10))
        prefix.insert(int(rng.integers(len(prefix) + 1)), str(p))
        ans = [str(sum(int(d) for d in xs) % p)]
    else:  # parity
        if not digits_only:
            return None
        ans = ["odd" if sum(int(d) for d in xs) % 2 else "even"]
    return prefix, ans


def build_pretrain_corpus(vocab: Vocabulary, size: int, seed: int,
                          feature_dim: int = 8) -> list:
    """Mixed corpus of (features-or-None, token ids) for base pretraining.

    Three ingredient kinds: plain word streams; bare payload '=' transform
    patterns; and instruction-shaped items whose random word prefix never
    identifies which transform produced the answer. The base model learns
    the generic skills (copy, reverse, sort, mask-at-digit, modular sum,
    parity) and where to look, but not which instruction wants which
    skill; that routing is what continual tuning has to supply.
    """
    if size <= 0:
        raise DataError("corpus size must be positive")
    rng = rng_for(seed, "pretrain-corpus")
    words = [t for t in vocab.tokens
             if t not in (BOS, EOS, ANS, MASK, SEP) and t not in _DIGITS]
    items = []
    while len(items) < size:
        kind = int(rng.integers(5))
        features = None
        if kind == 0:
            body = [words[int(i)] for i in rng.integers(0, len(words),
                                                        size=int(rng.integers(6, 14)))]
            text = [BOS, *body, EOS]
        else:
            digits_only = bool(rng.integers(2))
            pool = _DIGITS if digits_only else _LETTERS
            n = int(rng.integers(2, 5))
            xs = [pool[int(i)] for i in rng.integers(0, len(pool), size=n)]
            if kind == 1:
                made = _skill_answer(rng, [], xs, digits_only)
                if made is None:
                    continue
                prefix, ans = made
                text = [BOS, *prefix, *xs, ANS, *ans, EOS]
            else:
                body = [words[int(i)] for i in rng.integers(0, len(words),
                                                            size=int(rng.integers(2, 6)))]
                made = _skill_answer(rng, body, xs, digits_only)
                if made is None:
                    continue
                prefix, ans = made
                text = [BOS, *prefix, SEP, *xs, ANS, *ans, EOS]
                if feature_dim > 0 and kind == 4:
                    features = rng.normal(0.0, 1.0, size=feature_dim)
        items.append((features, [vocab.index[t] for t in text]))
    return items
