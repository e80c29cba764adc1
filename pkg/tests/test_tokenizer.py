import random
from collections import Counter

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_encoder import toy
from elastic_encoder.tokenizer import (
    SPECIAL_TOKENS,
    Vocab,
    build_transplant_plan,
    decode,
    encode,
    pretokenize,
    train_bpe,
    transplant_embeddings,
    vocab_overlap,
)

N_BASE = 256 + len(SPECIAL_TOKENS)


def brute_force_bpe(corpus, target_size):
    """Recount every pair from scratch after each merge; returns merges as byte pairs."""
    words = Counter()
    for doc in corpus:
        words.update(pretokenize(doc.encode()))
    seqs = {w: [bytes([b]) for b in w] for w in words}
    vocab = {bytes([i]) for i in range(256)}
    n_tokens = N_BASE
    merges = []
    while n_tokens < target_size:
        counts = Counter()
        for w, f in words.items():
            s = seqs[w]
            for pair in zip(s, s[1:]):
                counts[pair] += f
        if not counts:
            break
        best = min(counts, key=lambda p: (-counts[p], p[0], p[1]))
        if counts[best] < 2:
            break
        merges.append(best)
        joined = best[0] + best[1]
        if joined not in vocab:
            vocab.add(joined)
            n_tokens += 1
        for w in seqs:
            s, out, i = seqs[w], [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == best:
                    out.append(joined)
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            seqs[w] = out
    return merges, seqs


def merge_bytes(vocab):
    return [(vocab.tokens[a], vocab.tokens[b]) for a, b in vocab.merges]


def test_no_repeated_pairs_gives_base_vocab():
    v = train_bpe(["abcdefg"], N_BASE)
    assert v.size == N_BASE
    assert v.merges == []


def test_abab_first_merge_and_full_order_match_oracle():
    corpus = ["abab abab abab"]
    v = train_bpe(corpus, 264)
    assert merge_bytes(v)[0] == (b"a", b"b")
    oracle, seqs = brute_force_bpe(corpus, 264)
    assert merge_bytes(v) == oracle
    # encoding follows the same merges as the oracle's final segmentation
    ids = encode(v, "abab")
    assert [v.tokens[i] for i in ids] == seqs[b"abab"]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_merge_order_matches_oracle_on_toy_corpus(seed):
    corpus = toy.corpus(40, seed=seed)
    v = train_bpe(corpus, 400)
    oracle, _ = brute_force_bpe(corpus, 400)
    assert merge_bytes(v) == oracle


def test_training_is_deterministic():
    corpus = toy.corpus(200, seed=3)
    assert train_bpe(corpus, 500).merges == train_bpe(corpus, 500).merges


def test_errors():
    with pytest.raises(ValueError):
        train_bpe([], 300)
    with pytest.raises(ValueError):
        train_bpe(["abc"], 200)


def test_vocab_invariants_and_size_bound():
    v = train_bpe(toy.corpus(100, seed=5), 600)
    v.validate()
    assert v.size <= 600
    assert len(set(v.specials.values())) == 6
    assert len(set(v.tokens)) == v.size


@pytest.fixture(scope="module")
def toy_vocab():
    return train_bpe(toy.corpus(300, seed=11), 800)


def test_encode_empty(toy_vocab):
    assert encode(toy_vocab, "") == []


def test_roundtrip_random_strings(toy_vocab):
    rng = random.Random(0)
    alphabet = "abc ñé漢字🙂\n\t<|>" + "".join(chr(i) for i in range(32, 127))
    for _ in range(1000):
        s = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40)))
        assert decode(toy_vocab, encode(toy_vocab, s)) == s


@settings(max_examples=200, deadline=None)
@given(st.text())
def test_roundtrip_property(toy_vocab, s):
    assert decode(toy_vocab, encode(toy_vocab, s)) == s


def test_translation_token_is_single_id(toy_vocab):
    ids = encode(toy_vocab, "hola<|translation|>hello")
    assert ids.count(toy_vocab.id_of("TRANSLATION")) == 1


def test_json_roundtrip(tmp_path, toy_vocab):
    path = tmp_path / "vocab.json"
    toy_vocab.save(path)
    loaded = Vocab.load(path)
    assert loaded.tokens == toy_vocab.tokens
    assert loaded.merges == toy_vocab.merges
    assert loaded.specials == toy_vocab.specials


# --- overlap and transplant --------------------------------------------------------


def vocab_from_extra(extra: list[bytes]) -> Vocab:
    """Base vocabulary plus extra tokens, each built from two existing tokens."""
    v = train_bpe(["x"], N_BASE)
    tokens, merges = list(v.tokens), []
    for tok in extra:
        lookup = {t: i for i, t in enumerate(tokens)}
        merges.append((lookup[tok[:1]], lookup[tok[1:]]))
        tokens.append(tok)
    out = Vocab(tokens, merges, dict(v.specials))
    out.validate()
    return out


def test_overlap_identity(toy_vocab):
    assert vocab_overlap(toy_vocab, toy_vocab) == 1.0


def test_overlap_hand_computed():
    a = vocab_from_extra([b"xx", b"yy", b"zz", b"ww"])
    b = vocab_from_extra([b"xx", b"yy", b"qq", b"rr"])
    assert vocab_overlap(a, b) == (256 + 6 + 2) / (256 + 6 + 4)


def test_plan_identity(toy_vocab):
    plan = build_transplant_plan(toy_vocab, toy_vocab)
    assert plan.fresh == []
    assert plan.overlap == 1.0
    assert plan.shared == [(i, i) for i in range(toy_vocab.size)]


def test_fresh_recipe_by_construction():
    src = vocab_from_extra([])
    dst = vocab_from_extra([b"ab"])
    plan = build_transplant_plan(src, dst)
    assert plan.fresh == [(dst.size - 1, [ord("a"), ord("b")])]


def test_plan_overlap_matches_vocab_overlap():
    rng = random.Random(1)
    for _ in range(50):
        a = train_bpe(toy.corpus(rng.randint(5, 30), seed=rng.randint(0, 10**6)), rng.randint(280, 420))
        b = train_bpe(toy.corpus(rng.randint(5, 30), seed=rng.randint(0, 10**6), langs=("es",)), rng.randint(280, 420))
        plan = build_transplant_plan(a, b)
        assert plan.overlap == vocab_overlap(a, b)
        covered = sorted([d for _, d in plan.shared] + [d for d, _ in plan.fresh])
        assert covered == list(range(b.size))
        for s, d in plan.shared:
            assert a.tokens[s] == b.tokens[d]


def test_transplant_identity_is_bit_exact(toy_vocab):
    emb = torch.randn(toy_vocab.size, 16)
    out = transplant_embeddings(build_transplant_plan(toy_vocab, toy_vocab), emb)
    assert torch.equal(out, emb)


def test_transplant_mean_and_shared_rows():
    src = vocab_from_extra([])
    dst = vocab_from_extra([b"ab"])
    plan = build_transplant_plan(src, dst)
    emb = torch.randn(src.size, 8)
    out = transplant_embeddings(plan, emb, src_size=src.size)
    assert out.shape == (dst.size, 8)
    assert torch.equal(out[-1], (emb[ord("a")] + emb[ord("b")]) / 2)
    identical = sum(torch.equal(out[d], emb[s]) for s, d in plan.shared)
    assert identical / dst.size == plan.overlap


def test_transplant_empty_recipe_uses_matched_gaussian():
    from elastic_encoder.tokenizer import TransplantPlan

    emb = torch.randn(10, 64) * 3.0
    plan = TransplantPlan(shared=[(0, 0)], fresh=[(1, [])] + [(i, []) for i in range(2, 2000)], overlap=1 / 2000, dst_size=2000)
    out = transplant_embeddings(plan, emb)
    sigma = float(emb.double().norm(dim=1).mean()) / 8
    assert float(out[1:].std()) == pytest.approx(sigma, rel=0.05)


def test_transplant_dimension_mismatch():
    src = vocab_from_extra([])
    plan = build_transplant_plan(src, src)
    with pytest.raises(ValueError):
        transplant_embeddings(plan, torch.zeros(src.size - 1, 4), src_size=src.size)
    with pytest.raises(ValueError):
        transplant_embeddings(plan, torch.zeros(src.size - 1, 4))
