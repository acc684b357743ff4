"""Byte-level text corpora, calibration sampling and instruction prompts."""

from __future__ import annotations

import gzip
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

EOT = 0x04  # end-of-text byte appended after every completion
BUNDLED_CORPUS = "shakespeare.txt.gz"
BUNDLED_INSTRUCTIONS = "instructions.jsonl"


class CorpusTooSmallError(ValueError):
    pass


class InstructionFormatError(ValueError):
    pass


def encode(text: Union[str, bytes]) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode(tokens) -> str:
    return bytes(np.asarray(tokens, dtype=np.uint8).tolist()).decode("utf-8", errors="replace")


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("qlrec.data").joinpath(name)))


@dataclass
class TextCorpus:
    """Raw bytes with ordered, disjoint train/val/test ranges."""
    data: np.ndarray
    splits: dict = field(default_factory=dict)
    source: str = ""

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "", fractions: Tuple[float, float, float] = (0.9, 0.05, 0.05)):
        data = np.frombuffer(raw, dtype=np.uint8)
        n = data.size
        a = int(n * fractions[0])
        b = a + int(n * fractions[1])
        return cls(data, {"train": (0, a), "val": (a, b), "test": (b, n)}, source)

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; available: {sorted(self.splits)}")
        lo, hi = self.splits[name]
        return self.data[lo:hi].astype(np.int64)

    def __len__(self) -> int:
        return int(self.data.size)


def load_corpus(path: Optional[Union[str, Path]] = None) -> TextCorpus:
    """Load a text file (optionally gzipped); the bundled corpus by default."""
    path = bundled_path(BUNDLED_CORPUS) if path is None else Path(path)
    return TextCorpus.from_bytes(_read_bytes(path), source=path.name)


def sample_calibration(corpus: Union[TextCorpus, np.ndarray], n: int, ctx_len: int, seed: int,
                       split: str = "train") -> np.ndarray:
    """``n`` windows of exactly ``ctx_len`` contiguous tokens, uniform start positions."""
    tokens = corpus.split(split) if isinstance(corpus, TextCorpus) else np.asarray(corpus, dtype=np.int64)
    if tokens.size < ctx_len:
        raise CorpusTooSmallError(f"split has {tokens.size} tokens, fewer than ctx_len={ctx_len}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, tokens.size - ctx_len + 1, size=n)
    return np.stack([tokens[s:s + ctx_len] for s in starts]) if n else np.zeros((0, ctx_len), np.int64)


# ---------------------------------------------------------------------------
# instruction data


@dataclass
class InstructionSample:
    instruction: str
    output: str
    input: str = ""

    def __post_init__(self):
        if not self.output:
            raise InstructionFormatError("instruction sample has an empty output")


def parse_instructions(lines: Sequence[str], source: str = "<memory>") -> List[InstructionSample]:
    samples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InstructionFormatError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise InstructionFormatError(f"{source}:{lineno}: expected a JSON object")
        missing = [k for k in ("instruction", "output") if not isinstance(obj.get(k), str)]
        if missing:
            raise InstructionFormatError(f"{source}:{lineno}: missing string field(s) {missing}")
        extra = obj.get("input", "")
        if extra is None:
            extra = ""
        if not isinstance(extra, str):
            raise InstructionFormatError(f"{source}:{lineno}: 'input' must be a string")
        try:
            samples.append(InstructionSample(obj["instruction"], obj["output"], extra))
        except InstructionFormatError as exc:
            raise InstructionFormatError(f"{source}:{lineno}: {exc}") from exc
    return samples


def load_instructions(path: Optional[Union[str, Path]] = None) -> List[InstructionSample]:
    """Read JSON-lines with ``instruction``/``input``/``output`` keys."""
    path = bundled_path(BUNDLED_INSTRUCTIONS) if path is None else Path(path)
    return parse_instructions(path.read_text(encoding="utf-8").splitlines(), source=str(path))


@dataclass(frozen=True)
class PromptTemplate:
    """Boilerplate wrapped around each sample; the response follows ``suffix``."""
    with_input: str = "### Instruction:\n{instruction}\n### Input:\n{input}\n### Response:\n"
    no_input: str = "### Instruction:\n{instruction}\n### Response:\n"

    def prompt(self, sample: InstructionSample) -> str:
        if sample.input:
            return self.with_input.format(instruction=sample.instruction, input=sample.input)
        return self.no_input.format(instruction=sample.instruction)


DEFAULT_TEMPLATE = PromptTemplate()


def render_prompt(sample: InstructionSample, template: PromptTemplate = DEFAULT_TEMPLATE,
                  ctx_len: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Tokens of prompt + completion + EOT and a mask marking the completion.

    If the rendering is longer than ``ctx_len`` the prompt loses bytes from its
    left end; the completion is never truncated.
    """
    prompt = encode(template.prompt(sample))
    completion = np.concatenate([encode(sample.output), np.array([EOT], dtype=np.int64)])
    if ctx_len is not None:
        if completion.size > ctx_len:
            raise ValueError(f"completion of {completion.size} tokens does not fit ctx_len={ctx_len}")
        room = ctx_len - completion.size
        if prompt.size > room:
            prompt = prompt[prompt.size - room:]
    tokens = np.concatenate([prompt, completion])
    mask = np.zeros(tokens.size, dtype=bool)
    mask[prompt.size:] = True
    return tokens, mask


def split_instructions(samples: Sequence[InstructionSample], test_fraction: float = 0.1):
    n_test = max(1, int(round(len(samples) * test_fraction)))
    return list(samples[:-n_test]), list(samples[-n_test:])
