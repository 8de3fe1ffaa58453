"""Token-aligned feature extraction from pretrained models.

Every word in the corpus gets one vector per requested layer. Context
models see a sliding window of up to ``window`` words ending at the target
word (stride 1, recomputed per position); the word's vector is the hidden
state at its last sub-token. Masked bidirectional models get the mask token
appended after the window and are read at the token immediately preceding
it. Taggers contribute their pre-softmax logit layer; translation models
contribute encoder hidden states.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from .bundles import CorpusStory, ExtractedBundle

logger = logging.getLogger(__name__)

FAMILIES = (
    "word-embedding",
    "unidirectional-LM",
    "bidirectional-masked-LM",
    "tagger",
    "translation-encoder",
)


class AlignmentFailure(ValueError):
    """Some corpus words could not be mapped to model tokens."""

    def __init__(self, words):
        preview = ", ".join(repr(w) for w in words[:10])
        super().__init__(f"{len(words)} words failed token alignment: {preview}")
        self.words = list(words)


@dataclass(frozen=True)
class ExtractionSpec:
    family: str
    model: str
    layers: tuple[int, ...] | None = None  # None = every transformer layer
    window: int = 64
    batch_size: int = 16

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(x) for x in self.layers))
            if any(layer < 1 for layer in self.layers):
                raise ValueError("layer indices start at 1")


def safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name)


def extract(spec: ExtractionSpec, stories: list[CorpusStory]) -> list[ExtractedBundle]:
    """One bundle per requested layer, aligned to the corpus word order."""
    if spec.family == "word-embedding":
        return [_extract_word_embedding(spec, stories)]
    return _extract_from_model(spec, stories)


# -- word embedding tables -----------------------------------------------------

def _extract_word_embedding(spec, stories):
    table = {}
    dim = None
    with open(spec.model, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float32)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"inconsistent vector width in {spec.model}")
            table[parts[0]] = vec
    if not table:
        raise ValueError(f"no vectors found in {spec.model}")
    rows = []
    missing = 0
    for story in stories:
        for word in story.tokens:
            vec = table.get(word)
            if vec is None:
                vec = table.get(word.lower())
            if vec is None:
                missing += 1
                vec = np.zeros(dim, dtype=np.float32)
            rows.append(vec)
    if missing:
        logger.warning("word-embedding: %d/%d words missing from the table; "
                       "zero vectors substituted", missing, len(rows))
    return ExtractedBundle(
        id=safe_name(_model_label(spec.model)),
        values=np.vstack(rows),
        model_group=_model_label(spec.model),
        layer_index=None,
    )


def _model_label(model: str) -> str:
    cleaned = model.rstrip("/")
    return cleaned.rsplit("/", 1)[-1] if "/" in cleaned else cleaned


# -- neural model families -------------------------------------------------------

def _load_model(spec):
    # imported lazily so the word-embedding family works without torch
    import torch
    from transformers import (AutoModel, AutoModelForCausalLM, AutoModelForMaskedLM,
                              AutoModelForTokenClassification, AutoTokenizer)

    tokenizer = AutoTokenizer.from_pretrained(spec.model)
    if not tokenizer.is_fast:
        raise ValueError("extraction needs a fast tokenizer (word alignment)")
    if tokenizer.pad_token is None:
        tokenizer.pad_token = tokenizer.eos_token or tokenizer.unk_token
    loaders = {
        "unidirectional-LM": AutoModelForCausalLM,
        "bidirectional-masked-LM": AutoModelForMaskedLM,
        "tagger": AutoModelForTokenClassification,
        "translation-encoder": AutoModel,
    }
    model = loaders[spec.family].from_pretrained(spec.model)
    model.eval()
    torch.set_grad_enabled(False)
    return tokenizer, model


def _window_words(tokens, position, window):
    return list(tokens[max(0, position - window + 1): position + 1])


def _layer_count(model, family):
    if family == "translation-encoder":
        return model.config.encoder_layers if hasattr(model.config, "encoder_layers") \
            else model.config.num_hidden_layers
    if hasattr(model.config, "n_layer"):
        return model.config.n_layer
    return model.config.num_hidden_layers


def _extract_from_model(spec, stories):
    import torch

    tokenizer, model = _load_model(spec)
    if spec.family == "tagger":
        layers = [None]
        if spec.layers is not None:
            logger.warning("tagger family uses the logit layer; --layers ignored")
    else:
        total = _layer_count(model, spec.family)
        layers = list(spec.layers) if spec.layers is not None else list(range(1, total + 1))
        bad = [layer for layer in layers if layer > total]
        if bad:
            raise ValueError(f"model has {total} layers; invalid: {bad}")

    per_layer: dict[int | None, list[np.ndarray]] = {layer: [] for layer in layers}
    failed_words: list[str] = []

    masked = spec.family == "bidirectional-masked-LM"
    if masked and tokenizer.mask_token is None:
        raise ValueError("masked extraction needs a tokenizer with a mask token")

    encoder = model.get_encoder() if spec.family == "translation-encoder" \
        and hasattr(model, "get_encoder") else model

    for story in stories:
        positions = list(range(len(story.tokens)))
        for start in range(0, len(positions), spec.batch_size):
            chunk = positions[start: start + spec.batch_size]
            batch_words = []
            for pos in chunk:
                words = _window_words(story.tokens, pos, spec.window)
                if masked:
                    words = words + [tokenizer.mask_token]
                batch_words.append(words)
            enc = tokenizer(batch_words, is_split_into_words=True, padding=True,
                            return_tensors="pt")
            outputs = encoder(**enc, output_hidden_states=True)
            hidden = outputs.hidden_states
            for sample, pos in enumerate(chunk):
                word_ids = enc.word_ids(sample)
                target_word = len(batch_words[sample]) - 1 - (1 if masked else 0)
                token_positions = [t for t, w in enumerate(word_ids) if w == target_word]
                if not token_positions:
                    failed_words.append(story.tokens[pos])
                    continue
                token_pos = token_positions[-1]
                for layer in layers:
                    if layer is None:  # tagger logits
                        vec = outputs.logits[sample, token_pos]
                    else:
                        vec = hidden[layer][sample, token_pos]
                    per_layer[layer].append(vec.numpy().copy())
    if failed_words:
        raise AlignmentFailure(failed_words)

    label = _model_label(spec.model)
    bundles = []
    for layer in layers:
        suffix = "-logits" if layer is None else f"-l{layer:02d}"
        bundles.append(ExtractedBundle(
            id=safe_name(label + suffix),
            values=np.vstack(per_layer[layer]),
            model_group=label,
            layer_index=layer,
        ))
    return bundles


# -- future-shifted variant -------------------------------------------------------

def next_word_embedding(bundle: ExtractedBundle,
                        stories: list[CorpusStory]) -> ExtractedBundle:
    """Shift rows one word into the future, independently per story.

    The last word of each story repeats the story's own final row rather
    than borrowing the next story's first word.
    """
    total = sum(len(s.tokens) for s in stories)
    if bundle.token_count != total:
        raise ValueError(
            f"bundle has {bundle.token_count} rows, corpus has {total} tokens")
    if total < 2:
        raise ValueError("need at least 2 tokens to shift")
    shifted = np.empty_like(bundle.values)
    start = 0
    for story in stories:
        stop = start + len(story.tokens)
        shifted[start: stop - 1] = bundle.values[start + 1: stop]
        shifted[stop - 1] = bundle.values[stop - 1]
        start = stop
    logger.info("next-word shift: final row of each story repeats its own last row")
    return ExtractedBundle(
        id=bundle.id + "-nwe",
        values=shifted,
        model_group=bundle.model_group + "-nwe",  # a distinct representation family
        layer_index=bundle.layer_index,
    )
