"""Toy vocabulary, cipher languages, and synthetic corpus generation.

A cipher language is a bijective permutation of the content vocabulary;
special tokens are never ciphered. Training data pairs ciphered sentences
with their base-language originals (translation stage) or ciphered task
prompts with base-language answers (task stage). This gives a desk-scale
stand-in for a many-to-one multilingual setup where alignment quality is
directly measurable: every language says exactly the same things, just
through a different token permutation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, InputError

PAD, BOS, SEP, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = {"<pad>": PAD, "<bos>": BOS, "<sep>": SEP, "<eos>": EOS}

NUMBER_WORDS = (
    "zero one two three four five six seven eight nine ten eleven twelve "
    "thirteen fourteen fifteen sixteen seventeen eighteen"
).split()
MARKER_WORDS = ("plus", "equals", "copy", "class", "red", "blue")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def pseudo_word(i: int) -> str:
    """Deterministic two-syllable word for index i, e.g. 0 -> 'baba'."""
    c1, rest = divmod(i, len(_VOWELS) * len(_CONSONANTS) * len(_VOWELS))
    v1, rest = divmod(rest, len(_CONSONANTS) * len(_VOWELS))
    c2, v2 = divmod(rest, len(_VOWELS))
    if c1 >= len(_CONSONANTS):
        raise ConfigError(f"pseudo-word index {i} exhausts the syllable space")
    return _CONSONANTS[c1] + _VOWELS[v1] + _CONSONANTS[c2] + _VOWELS[v2]


class Vocabulary:
    """Fixed word-level vocabulary shared by encoder and decoder.

    Ids 0..3 are the specials; content ids follow: number words, task
    markers, then pseudo-words up to ``size``.
    """

    def __init__(self, size: int = 512):
        base = len(SPECIAL_TOKENS) + len(NUMBER_WORDS) + len(MARKER_WORDS)
        if size < base + 1:
            raise ConfigError(f"vocab size {size} too small; need at least {base + 1}")
        words = ["<pad>", "<bos>", "<sep>", "<eos>"]
        words += NUMBER_WORDS
        words += MARKER_WORDS
        n_pseudo = size - len(words)
        words += [pseudo_word(i) for i in range(n_pseudo)]
        if len(set(words)) != len(words):
            raise ConfigError("vocabulary contains duplicate word forms")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        self.size = size

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(len(SPECIAL_TOKENS), self.size, dtype=np.int64)

    @property
    def pseudo_ids(self) -> np.ndarray:
        start = len(SPECIAL_TOKENS) + len(NUMBER_WORDS) + len(MARKER_WORDS)
        return np.arange(start, self.size, dtype=np.int64)

    def number_id(self, value: int) -> int:
        if not 0 <= value < len(NUMBER_WORDS):
            raise ConfigError(f"no single word for number {value}")
        return len(SPECIAL_TOKENS) + value

    def marker_id(self, marker: str) -> int:
        return self.index[marker]

    def encode(self, text: str) -> np.ndarray:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise InputError(f"word {word!r} not in vocabulary")
            ids.append(self.index[word])
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.size:
                raise InputError(f"token id {i} outside vocabulary")
            out.append(self.words[i])
        return " ".join(out)


@dataclass(frozen=True)
class ParallelExample:
    """One training record: ciphered source, language tag, base-language
    target, and the stage the record belongs to."""

    source_text: str
    source_lang: str
    target_text: str
    stage: str

    def __post_init__(self):
        if not self.source_text or not self.target_text:
            raise ConfigError("parallel example with empty text")
        if self.stage not in ("translation", "task"):
            raise ConfigError(f"unknown stage tag {self.stage!r}")


@dataclass(frozen=True)
class SynthSpec:
    """Shape of the synthetic multilingual world.

    ``languages`` maps name -> tier ("hrl" or "lrl"). Low-resource languages
    receive ``lrl_fraction`` of the high-resource stage-1 sample count. The
    base language is implicit: it is the target side everywhere and appears
    as the identity rendering in the parallel evaluation split.
    """

    vocab_size: int = 512
    languages: dict[str, str] = field(
        default_factory=lambda: {"lang1": "hrl", "lang2": "hrl", "lang3": "lrl"}
    )
    stage1_per_hrl: int = 800
    lrl_fraction: float = 0.10
    stage2_per_lang: int = 260
    # low-resource languages also see less task data; 1.0 means parity
    stage2_lrl_fraction: float = 1.0
    eval_per_lang: int = 60
    parallel_sentences: int = 40
    tasks: tuple[str, ...] = ("arithmetic", "copy", "classification")
    max_operand: int = 9
    copy_max_words: int = 3
    sentence_max_words: int = 5
    # sentences and tasks draw pseudo-words from a pool this large, so
    # stage-1 exposure can actually cover the working vocabulary
    active_words: int = 120
    explicit_ciphers: dict[str, dict[int, int]] | None = None

    def __post_init__(self):
        if len(self.languages) < 2:
            raise ConfigError("need at least two languages")
        for lang, tier in self.languages.items():
            if tier not in ("hrl", "lrl"):
                raise ConfigError(f"language {lang!r} has unknown tier {tier!r}")
            if lang == "base":
                raise ConfigError("'base' names the target language; pick another name")
        if not 0 < self.lrl_fraction <= 1:
            raise ConfigError(f"lrl_fraction must be in (0, 1], got {self.lrl_fraction}")
        if not 0 < self.stage2_lrl_fraction <= 1:
            raise ConfigError(
                f"stage2_lrl_fraction must be in (0, 1], got {self.stage2_lrl_fraction}"
            )
        unknown = set(self.tasks) - {"arithmetic", "copy", "classification"}
        if unknown:
            raise ConfigError(f"unknown tasks: {sorted(unknown)}")
        if not self.tasks:
            raise ConfigError("at least one task template required")
        if self.active_words < self.sentence_max_words:
            raise ConfigError(
                f"active_words {self.active_words} smaller than sentence_max_words {self.sentence_max_words}"
            )
        if self.explicit_ciphers is not None:
            # JSON round-trips turn int keys into strings; normalize here so
            # every ingestion path (config file, corpus dir) hits one code path
            fixed = {
                lang: {int(k): int(v) for k, v in mapping.items()}
                for lang, mapping in self.explicit_ciphers.items()
            }
            object.__setattr__(self, "explicit_ciphers", fixed)

    def stage1_count(self, lang: str) -> int:
        tier = self.languages[lang]
        if tier == "hrl":
            return self.stage1_per_hrl
        return max(1, int(round(self.stage1_per_hrl * self.lrl_fraction)))

    def stage2_count(self, lang: str) -> int:
        tier = self.languages[lang]
        if tier == "hrl":
            return self.stage2_per_lang
        return max(1, int(round(self.stage2_per_lang * self.stage2_lrl_fraction)))

    def tiers(self) -> dict[str, str]:
        return dict(self.languages)


def build_cipher(vocab: Vocabulary, spec: SynthSpec, lang: str, lang_index: int, seed: int) -> np.ndarray:
    """Length-vocab permutation array: identity on specials, bijection on
    content ids. Explicit ciphers are validated against the special range."""
    table = np.arange(vocab.size, dtype=np.int64)
    if spec.explicit_ciphers and lang in spec.explicit_ciphers:
        mapping = spec.explicit_ciphers[lang]
        for src, dst in mapping.items():
            if src < len(SPECIAL_TOKENS) or dst < len(SPECIAL_TOKENS):
                raise ConfigError(
                    f"cipher for {lang!r} touches special token range: {src}->{dst}"
                )
            if not (src < vocab.size and dst < vocab.size):
                raise ConfigError(f"cipher for {lang!r} outside vocabulary: {src}->{dst}")
            table[src] = dst
        content = table[len(SPECIAL_TOKENS):]
        if len(set(content.tolist())) != len(content):
            raise ConfigError(f"cipher for {lang!r} is not a bijection on content ids")
        return table
    rng = np.random.default_rng(np.random.SeedSequence([seed, lang_index, 0xC1F]))
    content = vocab.content_ids
    table[content] = rng.permutation(content)
    return table


def apply_cipher(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[np.asarray(ids, dtype=np.int64)]


@dataclass
class SynthCorpus:
    """All generated splits plus the cipher tables that produced them."""

    spec: SynthSpec
    vocab: Vocabulary
    ciphers: dict[str, np.ndarray]
    stage1: list[ParallelExample]
    stage2: list[ParallelExample]
    eval_task: list[ParallelExample]
    eval_parallel: list[dict]

    def tiers(self) -> dict[str, str]:
        return self.spec.tiers()


def _word_pool(vocab: Vocabulary, spec: SynthSpec) -> np.ndarray:
    pool = vocab.pseudo_ids[: spec.active_words]
    if len(pool) < spec.active_words:
        raise ConfigError(
            f"vocabulary holds {len(vocab.pseudo_ids)} pseudo-words, spec wants {spec.active_words}"
        )
    return pool


def _sentence(rng: np.random.Generator, vocab: Vocabulary, spec: SynthSpec) -> np.ndarray:
    """Base-language sentence: pseudo-words, or a spelled-out equation."""
    if rng.random() < 0.5:
        a = int(rng.integers(0, spec.max_operand + 1))
        b = int(rng.integers(0, spec.max_operand + 1))
        return np.array(
            [vocab.number_id(a), vocab.marker_id("plus"), vocab.number_id(b),
             vocab.marker_id("equals"), vocab.number_id(a + b)],
            dtype=np.int64,
        )
    k = int(rng.integers(2, spec.sentence_max_words + 1))
    return rng.choice(_word_pool(vocab, spec), size=k, replace=False)


def _task_item(rng: np.random.Generator, vocab: Vocabulary, spec: SynthSpec,
               task: str, arith_pool: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """(prompt ids, answer ids) in base-language form."""
    if task == "arithmetic":
        a, b = arith_pool[int(rng.integers(0, len(arith_pool)))]
        prompt = np.array(
            [vocab.number_id(a), vocab.marker_id("plus"), vocab.number_id(b), vocab.marker_id("equals")],
            dtype=np.int64,
        )
        answer = np.array([vocab.number_id(a + b)], dtype=np.int64)
        return prompt, answer
    if task == "copy":
        k = int(rng.integers(1, spec.copy_max_words + 1))
        words = rng.choice(_word_pool(vocab, spec), size=k, replace=False)
        prompt = np.concatenate([[vocab.marker_id("copy")], words])
        return prompt.astype(np.int64), words.astype(np.int64)
    if task == "classification":
        word = int(rng.choice(_word_pool(vocab, spec)))
        label = "red" if word % 2 == 0 else "blue"
        prompt = np.array([vocab.marker_id("class"), word], dtype=np.int64)
        answer = np.array([vocab.marker_id(label)], dtype=np.int64)
        return prompt, answer
    raise ConfigError(f"unknown task {task!r}")


def generate_synthetic_corpus(spec: SynthSpec, seed: int) -> SynthCorpus:
    """Build all splits deterministically from (spec, seed).

    Stage-1: (ciphered sentence -> base sentence). Stage-2 and the task eval
    split: (ciphered prompt -> base answer), with arithmetic operand pairs
    partitioned so evaluation pairs never occur in training. The parallel
    split renders each held-out sentence in the base language and every
    cipher language under a shared sentence id.
    """
    vocab = Vocabulary(spec.vocab_size)
    langs = list(spec.languages)
    ciphers = {
        lang: build_cipher(vocab, spec, lang, i, seed) for i, lang in enumerate(langs)
    }
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))

    # partition arithmetic operand pairs between train and eval
    all_pairs = [(a, b) for a in range(spec.max_operand + 1) for b in range(spec.max_operand + 1)]
    order = rng.permutation(len(all_pairs))
    n_eval_pairs = max(4, len(all_pairs) // 5)
    eval_pairs = [all_pairs[i] for i in order[:n_eval_pairs]]
    train_pairs = [all_pairs[i] for i in order[n_eval_pairs:]]

    stage1: list[ParallelExample] = []
    for lang in langs:
        table = ciphers[lang]
        for _ in range(spec.stage1_count(lang)):
            base_ids = _sentence(rng, vocab, spec)
            stage1.append(
                ParallelExample(
                    source_text=vocab.decode(apply_cipher(table, base_ids)),
                    source_lang=lang,
                    target_text=vocab.decode(base_ids),
                    stage="translation",
                )
            )

    def task_split(counts: dict[str, int], pool: list[tuple[int, int]], stage_tag: str,
                   seen: set[tuple[str, str]] | None = None) -> list[ParallelExample]:
        out = []
        for lang in langs:
            n_per_lang = counts[lang]
            table = ciphers[lang]
            made = 0
            attempts = 0
            budget = 100 * n_per_lang + 1000
            while made < n_per_lang:
                attempts += 1
                if attempts > budget:
                    raise ConfigError(
                        f"cannot draw {n_per_lang} distinct {stage_tag} prompts for {lang!r}; "
                        f"template space too small for the requested split sizes"
                    )
                task = spec.tasks[int(rng.integers(0, len(spec.tasks)))]
                prompt_ids, answer_ids = _task_item(rng, vocab, spec, task, pool)
                src = vocab.decode(apply_cipher(table, prompt_ids))
                tgt = vocab.decode(answer_ids)
                if seen is not None:
                    key = (lang, src)
                    if key in seen:
                        continue
                    seen.add(key)
                out.append(
                    ParallelExample(source_text=src, source_lang=lang, target_text=tgt, stage=stage_tag)
                )
                made += 1
        return out

    train_keys: set[tuple[str, str]] = set()
    stage2 = task_split(
        {lang: spec.stage2_count(lang) for lang in langs}, train_pairs, "task", seen=train_keys
    )
    # eval prompts must not repeat training prompts; arithmetic is held out by
    # operand-pair partition, copy/classification by prompt-string rejection
    eval_seen = set(train_keys)
    eval_task = task_split(
        {lang: spec.eval_per_lang for lang in langs}, eval_pairs, "task", seen=eval_seen
    )

    eval_parallel: list[dict] = []
    for sid in range(spec.parallel_sentences):
        base_ids = _sentence(rng, vocab, spec)
        base_text = vocab.decode(base_ids)
        eval_parallel.append({"sid": sid, "lang": "base", "src": base_text, "base": base_text})
        for lang in langs:
            eval_parallel.append(
                {
                    "sid": sid,
                    "lang": lang,
                    "src": vocab.decode(apply_cipher(ciphers[lang], base_ids)),
                    "base": base_text,
                }
            )
    return SynthCorpus(
        spec=spec,
        vocab=vocab,
        ciphers=ciphers,
        stage1=stage1,
        stage2=stage2,
        eval_task=eval_task,
        eval_parallel=eval_parallel,
    )


# ---------------------------------------------------------------------------
# corpus file IO: one JSON record per line, fields {src, tgt, lang, stage}
# ---------------------------------------------------------------------------

RECORD_FIELDS = ("src", "tgt", "lang", "stage")


def write_corpus(path: str | Path, examples: list[ParallelExample]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {"src": ex.source_text, "tgt": ex.target_text, "lang": ex.source_lang, "stage": ex.stage},
                    sort_keys=True,
                )
                + "\n"
            )
    tmp.replace(path)


def read_corpus(path: str | Path) -> list[ParallelExample]:
    path = Path(path)
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as err:
        raise IngestionError(f"{path}: cannot read corpus file: {err}") from err
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise IngestionError(f"{path}:{lineno}: not valid JSON ({err.msg})") from None
            missing = [k for k in RECORD_FIELDS if k not in record]
            if missing:
                raise IngestionError(f"{path}:{lineno}: missing fields {missing}")
            try:
                out.append(
                    ParallelExample(
                        source_text=record["src"],
                        source_lang=record["lang"],
                        target_text=record["tgt"],
                        stage=record["stage"],
                    )
                )
            except ConfigError as err:
                raise IngestionError(f"{path}:{lineno}: {err}") from None
    return out


def write_parallel(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)


def read_parallel(path: str | Path) -> list[dict]:
    path = Path(path)
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as err:
        raise IngestionError(f"{path}: cannot read parallel file: {err}") from err
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise IngestionError(f"{path}:{lineno}: not valid JSON ({err.msg})") from None
            for key in ("sid", "lang", "src", "base"):
                if key not in row:
                    raise IngestionError(f"{path}:{lineno}: missing field {key!r}")
            out.append(row)
    return out

CORPUS_FILES = ("stage1.jsonl", "stage2.jsonl", "eval_task.jsonl", "eval_parallel.jsonl")


def write_corpus_dir(out_dir: str | Path, corpus: SynthCorpus, seed: int) -> list[Path]:
    """Persist all splits plus the generating spec; every file write is atomic.

    The cipher tables are not stored: they are re-derived from (spec, seed)
    on load, which also guards against a hand-edited spec silently pairing
    with stale ciphertext.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec_payload = {"seed": seed, "spec": dataclasses.asdict(corpus.spec)}
    spec_path = out_dir / "spec.json"
    tmp = spec_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(spec_payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    tmp.replace(spec_path)
    write_corpus(out_dir / "stage1.jsonl", corpus.stage1)
    write_corpus(out_dir / "stage2.jsonl", corpus.stage2)
    write_corpus(out_dir / "eval_task.jsonl", corpus.eval_task)
    write_parallel(out_dir / "eval_parallel.jsonl", corpus.eval_parallel)
    return [spec_path] + [out_dir / name for name in CORPUS_FILES]


def load_corpus_dir(corpus_dir: str | Path) -> SynthCorpus:
    corpus_dir = Path(corpus_dir)
    spec_path = corpus_dir / "spec.json"
    try:
        payload = json.loads(spec_path.read_text(encoding="utf-8"))
    except OSError as err:
        raise IngestionError(f"{spec_path}: cannot read corpus spec: {err}") from err
    except json.JSONDecodeError as err:
        raise IngestionError(f"{spec_path}:{err.lineno}: invalid JSON: {err.msg}") from None
    raw = dict(payload.get("spec", {}))
    if "tasks" in raw:
        raw["tasks"] = tuple(raw["tasks"])
    try:
        spec = SynthSpec(**raw)
    except TypeError as err:
        raise IngestionError(f"{spec_path}: {err}") from None
    seed = payload.get("seed", 0)
    vocab = Vocabulary(spec.vocab_size)
    ciphers = {
        lang: build_cipher(vocab, spec, lang, i, seed) for i, lang in enumerate(spec.languages)
    }
    return SynthCorpus(
        spec=spec,
        vocab=vocab,
        ciphers=ciphers,
        stage1=read_corpus(corpus_dir / "stage1.jsonl"),
        stage2=read_corpus(corpus_dir / "stage2.jsonl"),
        eval_task=read_corpus(corpus_dir / "eval_task.jsonl"),
        eval_parallel=read_parallel(corpus_dir / "eval_parallel.jsonl"),
    )
