"""Tiny locally-built pretrained models so tests run fully offline."""

import os

import pytest

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")

from repspace_extract.bundles import CorpusStory  # noqa: E402

WORDS_A = ("the quick brown fox jumps over the lazy dog while strange "
           "tokenization happens everywhere in language").split()
WORDS_B = "a small second story about representations and transfer".split()


@pytest.fixture(scope="session")
def corpus():
    return [
        CorpusStory(id="story-a", tokens=tuple(WORDS_A), role="train"),
        CorpusStory(id="story-b", tokens=tuple(WORDS_B), role="test"),
    ]


def _build_fast_tokenizer():
    from tokenizers import Tokenizer, models, pre_tokenizers, trainers
    from transformers import PreTrainedTokenizerFast

    text = " ".join(WORDS_A + WORDS_B)
    tok = Tokenizer(models.BPE(unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=True)
    trainer = trainers.BpeTrainer(
        vocab_size=90, special_tokens=["<unk>", "<pad>", "<mask>"])
    tok.train_from_iterator([text], trainer)
    return PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>",
                                   pad_token="<pad>", mask_token="<mask>")


@pytest.fixture(scope="session")
def tiny_causal_model(tmp_path_factory):
    import torch
    from transformers import GPT2Config, GPT2LMHeadModel

    tokenizer = _build_fast_tokenizer()
    config = GPT2Config(vocab_size=tokenizer.vocab_size + 8, n_positions=256,
                        n_embd=32, n_layer=3, n_head=2,
                        bos_token_id=0, eos_token_id=0)
    torch.manual_seed(11)
    model = GPT2LMHeadModel(config)
    path = tmp_path_factory.mktemp("tiny-causal")
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def tiny_masked_model(tmp_path_factory):
    import torch
    from transformers import BertConfig, BertForMaskedLM

    tokenizer = _build_fast_tokenizer()
    config = BertConfig(vocab_size=tokenizer.vocab_size + 8, hidden_size=24,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=48, max_position_embeddings=256)
    torch.manual_seed(12)
    model = BertForMaskedLM(config)
    path = tmp_path_factory.mktemp("tiny-masked")
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def tiny_tagger_model(tmp_path_factory):
    import torch
    from transformers import BertConfig, BertForTokenClassification

    tokenizer = _build_fast_tokenizer()
    config = BertConfig(vocab_size=tokenizer.vocab_size + 8, hidden_size=24,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=48, max_position_embeddings=256,
                        num_labels=7)
    torch.manual_seed(13)
    model = BertForTokenClassification(config)
    path = tmp_path_factory.mktemp("tiny-tagger")
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def tiny_translation_model(tmp_path_factory):
    import torch
    from transformers import BartConfig, BartForConditionalGeneration

    tokenizer = _build_fast_tokenizer()
    config = BartConfig(vocab_size=tokenizer.vocab_size + 8, d_model=20,
                        encoder_layers=2, decoder_layers=2,
                        encoder_attention_heads=2, decoder_attention_heads=2,
                        encoder_ffn_dim=40, decoder_ffn_dim=40,
                        max_position_embeddings=256,
                        pad_token_id=1, bos_token_id=0, eos_token_id=0,
                        decoder_start_token_id=0, forced_eos_token_id=None)
    torch.manual_seed(14)
    model = BartForConditionalGeneration(config)
    path = tmp_path_factory.mktemp("tiny-translation")
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def vectors_file(tmp_path_factory):
    import numpy as np

    rng = np.random.default_rng(15)
    path = tmp_path_factory.mktemp("vectors") / "vectors.txt"
    words = sorted(set(WORDS_A + WORDS_B) - {"dog"})  # leave one word unknown
    with open(path, "w", encoding="utf-8") as fh:
        for word in words:
            vec = rng.standard_normal(5)
            fh.write(word + " " + " ".join(f"{v:.6f}" for v in vec) + "\n")
    return str(path)
