import random

import pytest
import torch
import torch.nn.functional as F

from hyperpeft.codec import SentTPair
from hyperpeft.errors import ConfigError, ContractViolationError
from hyperpeft.host import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    ToyHostConfig,
    Vocabulary,
    build_toy_host,
    encode_texts,
    greedy_decode,
    make_seq2seq_batch,
    pad_id_rows,
    parameter_count,
)

CFG = ToyHostConfig(vocab_size=50, h=32, n_enc=2, n_dec=2, n_heads=4,
                    ff_width=64, max_len=10, n_sentinels=12)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def test_vocabulary_layout_and_round_trip(tmp_path):
    vocab = Vocabulary.build(["zebra", "apple", "apple"], n_sentinels=5)
    assert vocab.token_to_id["<pad>"] == PAD_ID
    assert vocab.token_to_id["<extra_id_0>"] == 4
    assert vocab.token_to_id["<extra_id_4>"] == 8
    assert vocab.token_to_id["apple"] == 9  # sorted words after the sentinel block
    ids = vocab.encode("<extra_id_0> apple <extra_id_1> zebra <extra_id_2>")
    assert vocab.decode(ids) == "<extra_id_0> apple <extra_id_1> zebra <extra_id_2>"
    assert vocab.encode("never_seen") == [UNK_ID]

    path = tmp_path / "vocab.json"
    vocab.save(path)
    reloaded = Vocabulary.load(path)
    assert reloaded.token_to_id == vocab.token_to_id
    assert reloaded.n_sentinels == vocab.n_sentinels


def test_vocabulary_decode_skips_control_tokens():
    vocab = Vocabulary.build(["x"], n_sentinels=2)
    ids = [BOS_ID, *vocab.encode("<extra_id_0> x <extra_id_1>"), EOS_ID, PAD_ID]
    assert vocab.decode(ids) == "<extra_id_0> x <extra_id_1>"


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        ToyHostConfig(vocab_size=50, h=30, n_heads=4)  # indivisible
    with pytest.raises(ConfigError):
        ToyHostConfig(vocab_size=50, max_len=20, n_sentinels=10)  # too few sentinels
    with pytest.raises(ConfigError):
        ToyHostConfig(vocab_size=5, n_sentinels=32)  # vocab cannot hold sentinels


def test_config_json_round_trip():
    assert ToyHostConfig.from_json(CFG.to_json()) == CFG


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def test_forward_shape_contract():
    cfg = ToyHostConfig(vocab_size=40, h=64, n_enc=2, n_dec=2, n_heads=4,
                        ff_width=128, max_len=10, n_sentinels=12)
    model = build_toy_host(cfg, seed=0)
    src = torch.randint(4, 40, (2, 12))
    mask = torch.ones(2, 12, dtype=torch.bool)
    dec = torch.randint(4, 40, (2, 12))
    logits = model(src, mask, dec)
    assert logits.shape == (2, 12, 40)


def test_fixed_seed_gives_identical_weights():
    m1 = build_toy_host(CFG, seed=7)
    m2 = build_toy_host(CFG, seed=7)
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2
        assert torch.equal(p1, p2)
    m3 = build_toy_host(CFG, seed=8)
    assert any(
        not torch.equal(p1, p3)
        for (_, p1), (_, p3) in zip(m1.named_parameters(), m3.named_parameters())
    )


def test_parameter_count_matches_analytic_formula():
    cfg = CFG
    v, h, f = cfg.vocab_size, cfg.h, cfg.ff_width
    embeddings = v * h + cfg.n_positions * h
    attn = 4 * h * h              # q, k, v, out projections, no bias
    ff = h * f + f + f * h + h
    enc_block = 2 * 2 * h + attn + ff          # two layer norms
    dec_block = 3 * 2 * h + 2 * attn + ff      # three layer norms, two attentions
    expected = (embeddings + cfg.n_enc * enc_block + cfg.n_dec * dec_block
                + 2 * 2 * h        # final encoder/decoder norms
                + h * v)           # lm head
    assert parameter_count(build_toy_host(cfg)) == expected


def test_sequence_length_guard():
    model = build_toy_host(CFG, seed=0)
    too_long = CFG.n_positions + 1
    src = torch.randint(4, 50, (1, too_long))
    with pytest.raises(ContractViolationError):
        model.encode(src, torch.ones(1, too_long, dtype=torch.bool))


def test_causal_masking():
    model = build_toy_host(CFG, seed=3)
    model.eval()
    src = torch.randint(4, 50, (1, 6))
    mask = torch.ones(1, 6, dtype=torch.bool)
    dec = torch.randint(4, 50, (1, 8))
    with torch.no_grad():
        base = model(src, mask, dec)
        mutated = dec.clone()
        mutated[0, 5:] = (mutated[0, 5:] + 1) % 46 + 4
        out = model(src, mask, mutated)
    assert torch.allclose(base[0, :5], out[0, :5], atol=1e-6)
    assert not torch.allclose(base[0, 5:], out[0, 5:], atol=1e-6)


def test_padding_does_not_change_valid_positions():
    model = build_toy_host(CFG, seed=4)
    model.eval()
    src = torch.randint(4, 50, (1, 5))
    mask = torch.ones(1, 5, dtype=torch.bool)
    padded_src = torch.cat([src, torch.zeros(1, 3, dtype=torch.long)], dim=1)
    padded_mask = torch.cat([mask, torch.zeros(1, 3, dtype=torch.bool)], dim=1)
    dec = torch.randint(4, 50, (1, 4))
    with torch.no_grad():
        a = model(src, mask, dec)
        b = model(padded_src, padded_mask, dec)
    assert torch.allclose(a, b, atol=1e-5)


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------

def test_pad_id_rows():
    out = pad_id_rows([[5, 6], [7]])
    assert out.tolist() == [[5, 6], [7, 0]]


def test_make_seq2seq_batch_layout():
    vocab = Vocabulary.build(["a", "b"], n_sentinels=4)
    pairs = [SentTPair("<extra_id_0> a <extra_id_1>", "<extra_id_0> b <extra_id_1>")]
    batch = make_seq2seq_batch(vocab, pairs)
    assert batch.dec_input_ids[0, 0].item() == BOS_ID
    assert batch.target_ids[0, -1].item() == EOS_ID
    assert batch.src_mask.all()
    assert batch.dec_input_ids.shape == batch.target_ids.shape


def test_encode_texts_rejects_empty():
    vocab = Vocabulary.build(["a"], n_sentinels=2)
    with pytest.raises(ContractViolationError):
        encode_texts(vocab, ["a", ""])


# ---------------------------------------------------------------------------
# greedy decoding
# ---------------------------------------------------------------------------

def test_greedy_decode_deterministic_and_capped():
    model = build_toy_host(CFG, seed=5)
    src = torch.randint(4, 50, (2, 6))
    mask = torch.ones(2, 6, dtype=torch.bool)
    a = greedy_decode(model, src, mask, max_new_tokens=7)
    b = greedy_decode(model, src, mask, max_new_tokens=7)
    assert a == b
    assert all(len(row) <= 7 for row in a)
    assert greedy_decode(model, src, mask, max_new_tokens=0) == [[], []]


def test_greedy_decode_after_copy_training():
    words = [f"w{i}" for i in range(10)]
    vocab = Vocabulary.build(words, n_sentinels=8)
    cfg = ToyHostConfig(vocab_size=len(vocab), h=32, n_enc=1, n_dec=1, n_heads=4,
                        ff_width=64, max_len=7, n_sentinels=8)
    model = build_toy_host(cfg, seed=0)
    rng = random.Random(0)

    def sample_pairs(n):
        pairs = []
        for _ in range(n):
            text = " ".join(rng.choices(words, k=rng.randint(3, 6)))
            pairs.append(SentTPair(text, text))
        return pairs

    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for _ in range(400):
        batch = make_seq2seq_batch(vocab, sample_pairs(32))
        logits = model(batch.src_ids, batch.src_mask, batch.dec_input_ids)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                               batch.target_ids.reshape(-1), ignore_index=PAD_ID)
        opt.zero_grad()
        loss.backward()
        opt.step()

    held_out = sample_pairs(40)
    ids, mask = encode_texts(vocab, [p.input_text for p in held_out])
    outputs = greedy_decode(model, ids, mask, max_new_tokens=10)
    accuracy = sum(vocab.decode(o) == p.input_text for o, p in zip(outputs, held_out)) / 40
    assert accuracy >= 0.9
