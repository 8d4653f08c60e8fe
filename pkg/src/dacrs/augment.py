"""Two-stage dialogue augmentation: LLM rewrite/summarize, then word and utterance edits."""
from __future__ import annotations

import hashlib
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import requests

STAGE1_CHOICES = ("rephrase", "summarize", "none")
STAGE2_STRUCTURED = ("word_delete", "word_swap", "word_crop", "utt_delete", "utt_swap", "none")
STAGE2_FLAT = ("word_delete", "word_swap", "word_crop", "none")

REPHRASE_PROMPT = (
    "You are given a dialogue between a user and a recommender system. "
    "Here is the dialogue: {dialogue}. Rephrase the dialogue using as "
    "different words and styles as possible. Output ONLY the rephrased content."
)
SUMMARIZE_PROMPT = (
    "You are given a dialogue between a user and a recommender system. "
    "Here is the dialogue: {dialogue}. Summarize the user's preference for "
    "movie recommendations in a compact and informative manner."
)

_SPEAKER_LABELS = {"user": "User", "recommender": "Recommender"}


class ProviderError(RuntimeError):
    """A rewrite provider failed; carries the hash of the offending prompt."""

    def __init__(self, message: str, prompt_hash: str) -> None:
        super().__init__(message)
        self.prompt_hash = prompt_hash


class RewriteProvider(Protocol):
    def complete(self, prompt: str) -> str: ...


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def serialize_dialogue(utterances: Sequence) -> str:
    """Speaker-prefixed lines, one utterance per line."""
    return "\n".join(
        f"{_SPEAKER_LABELS[utt.speaker]}: {utt.text}" for utt in utterances
    )


def parse_serialized(text: str) -> list[tuple[str, str]]:
    """Invert :func:`serialize_dialogue`, tolerating continuation lines.

    Lines without a speaker prefix extend the previous utterance; if the text
    has no recognizable prefix at all it becomes a single user utterance.
    """
    turns: list[tuple[str, str]] = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        lowered = stripped.lower()
        matched = None
        for speaker, label in _SPEAKER_LABELS.items():
            prefix = label.lower() + ":"
            if lowered.startswith(prefix):
                matched = (speaker, stripped[len(prefix):].strip())
                break
        if matched:
            turns.append(matched)
        elif turns:
            speaker, prev = turns[-1]
            turns[-1] = (speaker, f"{prev} {stripped}".strip())
        else:
            turns.append(("user", stripped))
    if not turns and text.strip():
        turns.append(("user", text.strip()))
    return turns


@dataclass
class AugmentConfig:
    rate: float = 0.2
    stage1_enabled: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentedDialogue:
    """Output of the pipeline: structured turns, or flat text after summarization."""

    stage1_choice: str
    stage2_choice: str
    utterances: tuple[tuple[str, str], ...] = ()
    summary: str = ""
    stage1_failed: bool = False

    @property
    def is_flat(self) -> bool:
        return self.stage1_choice == "summarize"

    def serialized(self) -> str:
        if self.is_flat:
            return self.summary
        return "\n".join(f"{_SPEAKER_LABELS[s]}: {t}" for s, t in self.utterances)


def stage1_rewrite(utterances: Sequence, mode: str, provider: Optional[RewriteProvider]) -> str:
    """Run the stage-1 rewrite for a dialogue; mode ``none`` is the identity."""
    serialized = serialize_dialogue(utterances)
    if mode == "none":
        return serialized
    if mode == "rephrase":
        template = REPHRASE_PROMPT
    elif mode == "summarize":
        template = SUMMARIZE_PROMPT
    else:
        raise ValueError(f"unknown stage-1 mode {mode!r}")
    if provider is None:
        raise ProviderError("no rewrite provider configured", prompt_hash(serialized))
    prompt = template.replace("{dialogue}", serialized)
    completion = provider.complete(prompt)
    if not completion or not completion.strip():
        raise ProviderError("provider returned empty text", prompt_hash(prompt))
    return completion.strip()


def word_augment(
    tokens: Sequence[str], mode: str, rate: float, rng: np.random.Generator
) -> list[str]:
    """Word-level augmentation over one token sequence.

    delete removes floor(rate*n) tokens (always keeping one); swap applies
    floor(rate*n) adjacent transpositions; crop removes one contiguous
    segment of length floor(rate*n).
    """
    out = list(tokens)
    n = len(out)
    if n == 0:
        raise ValueError("token sequence must be non-empty")
    amount = int(np.floor(rate * n))
    if mode == "delete":
        k = min(amount, n - 1)
        if k > 0:
            drop = set(int(i) for i in rng.choice(n, size=k, replace=False))
            out = [tok for i, tok in enumerate(out) if i not in drop]
    elif mode == "swap":
        if n >= 2:
            for _ in range(amount):
                pos = int(rng.integers(n - 1))
                out[pos], out[pos + 1] = out[pos + 1], out[pos]
    elif mode == "crop":
        length = min(amount, n - 1)
        if length > 0:
            start = int(rng.integers(n - length + 1))
            del out[start : start + length]
    else:
        raise ValueError(f"unknown word mode {mode!r}")
    return out


def utterance_augment(
    utterances: Sequence, mode: str, rate: float, rng: np.random.Generator
) -> list:
    """Utterance-level augmentation: delete several turns or swap one pair."""
    out = list(utterances)
    n = len(out)
    if n == 0:
        raise ValueError("utterance sequence must be non-empty")
    if mode == "delete":
        if n > 1:
            k = min(max(1, int(np.floor(rate * n))), n - 1)
            drop = set(int(i) for i in rng.choice(n, size=k, replace=False))
            out = [utt for i, utt in enumerate(out) if i not in drop]
    elif mode == "swap":
        if n >= 2:
            i = int(rng.integers(n))
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            out[i], out[j] = out[j], out[i]
    else:
        raise ValueError(f"unknown utterance mode {mode!r}")
    return out


def _word_augment_text(text: str, mode: str, rate: float, rng: np.random.Generator) -> str:
    tokens = text.split()
    if not tokens:
        return text
    return " ".join(word_augment(tokens, mode, rate, rng))


def run_pipeline(
    utterances: Sequence,
    config: AugmentConfig,
    provider: Optional[RewriteProvider],
    rng: np.random.Generator,
) -> AugmentedDialogue:
    """Apply one uniformly drawn choice per stage (No Augmentation included).

    After summarization only word-level edits remain available. Provider
    failures fall back to the unmodified dialogue and are flagged on the
    result. rate == 0 makes stage 2 a no-op.
    """
    stage1_failed = False
    if config.stage1_enabled and len(utterances) > 0:
        stage1 = STAGE1_CHOICES[int(rng.integers(len(STAGE1_CHOICES)))]
    else:
        stage1 = "none"

    flat_text = ""
    turns: list[tuple[str, str]]
    if stage1 == "none":
        turns = [(utt.speaker, utt.text) for utt in utterances]
    else:
        try:
            rewritten = stage1_rewrite(utterances, stage1, provider)
        except ProviderError:
            stage1_failed = True
            stage1 = "none"
            turns = [(utt.speaker, utt.text) for utt in utterances]
        else:
            if stage1 == "summarize":
                flat_text = rewritten
                turns = []
            else:
                turns = parse_serialized(rewritten)

    flat = stage1 == "summarize"
    options = STAGE2_FLAT if flat else STAGE2_STRUCTURED
    if config.rate == 0:
        stage2 = "none"
    else:
        stage2 = options[int(rng.integers(len(options)))]
        if stage2 in ("word_delete", "word_swap", "word_crop"):
            word_mode = stage2.removeprefix("word_")
            if flat:
                flat_text = _word_augment_text(flat_text, word_mode, config.rate, rng)
            else:
                turns = [
                    (speaker, _word_augment_text(text, word_mode, config.rate, rng))
                    for speaker, text in turns
                ]
        elif stage2 in ("utt_delete", "utt_swap") and turns:
            turns = utterance_augment(turns, stage2.removeprefix("utt_"), config.rate, rng)

    return AugmentedDialogue(
        stage1_choice=stage1,
        stage2_choice=stage2,
        utterances=tuple(turns),
        summary=flat_text,
        stage1_failed=stage1_failed,
    )


@dataclass
class HttpRewriteProvider:
    """Chat-completion client; endpoint and credentials come from the environment
    (DACRS_LLM_BASE_URL, DACRS_LLM_MODEL, DACRS_LLM_API_KEY) unless given."""

    base_url: str = ""
    model: str = ""
    api_key: str = ""
    timeout: float = 30.0
    session: Optional[requests.Session] = None

    def __post_init__(self) -> None:
        self.base_url = self.base_url or os.environ.get("DACRS_LLM_BASE_URL", "")
        self.model = self.model or os.environ.get("DACRS_LLM_MODEL", "")
        self.api_key = self.api_key or os.environ.get("DACRS_LLM_API_KEY", "")

    def complete(self, prompt: str) -> str:
        digest = prompt_hash(prompt)
        if not self.base_url:
            raise ProviderError("no rewrite endpoint configured", digest)
        url = self.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        client = self.session or requests
        try:
            response = client.post(url, json=body, headers=headers, timeout=self.timeout)
            response.raise_for_status()
            payload = response.json()
            return payload["choices"][0]["message"]["content"]
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(f"rewrite request failed: {exc}", digest) from exc


class FixtureRewriteProvider:
    """Replays completions recorded on disk, keyed by prompt hash.

    With a fallback provider, cache misses are fetched once and recorded, so a
    live run can build the fixture set that later runs replay offline.
    """

    def __init__(self, directory: str | Path, fallback: Optional[RewriteProvider] = None) -> None:
        self.directory = Path(directory)
        self.fallback = fallback
        self._write_lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.directory / f"{digest}.txt"

    def complete(self, prompt: str) -> str:
        digest = prompt_hash(prompt)
        path = self._path(digest)
        if path.exists():
            return path.read_text(encoding="utf-8")
        if self.fallback is None:
            raise ProviderError(f"no fixture recorded for prompt {digest}", digest)
        completion = self.fallback.complete(prompt)
        with self._write_lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            path.write_text(completion, encoding="utf-8")
        return completion
