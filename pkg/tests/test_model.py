import numpy as np
import pytest
import torch

from crossalign.corpus import MaskRates, SentencePair, TokenizedSentence, mask_for_tlm
from crossalign.model import (
    AttentionBlock,
    CrossAlignModel,
    ModelConfig,
    cross_attention_layer,
    encode_pair,
    load_checkpoint,
    save_checkpoint,
    self_attention_layer,
    tlm_logits,
)

from .oracles import attention_block, block_params, layer_norm


def _sentence(ids):
    ids = (2, *ids, 3)
    return TokenizedSentence(tuple(f"w{i}" for i in ids[1:-1]), ids, (-1, *range(len(ids) - 2), -1))


def _pair(src, tgt):
    return SentencePair(_sentence(src), _sentence(tgt))


@pytest.fixture
def cfg():
    return ModelConfig(vocab_size=20, m=2, n=2, d_model=8, n_heads=2, max_positions=16, align_layer=3, dropout=0.0)


@pytest.fixture
def model(cfg):
    return CrossAlignModel(cfg, seed=3).eval()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, m=0, n=0, align_layer=1)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, m=2, n=1, align_layer=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, m=2, n=1, align_layer=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, m=1, n=1, d_model=10, n_heads=4, align_layer=1)
    c = ModelConfig(vocab_size=10)
    assert (c.m, c.n, c.align_layer, c.tau_stage1, c.tau_stage2) == (10, 2, 11, 0.001, 0.15)
    assert c.d_ff == 4 * c.d_model and c.d_k == c.d_model // c.n_heads


def test_parameter_count_is_deterministic(cfg):
    d, f, v, p = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_positions
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    expected = v * d + p * d + (cfg.m + cfg.n) * per_layer + v
    assert CrossAlignModel(cfg).n_parameters() == expected


def test_zero_sublayer_weights_give_double_layer_norm(cfg):
    block = AttentionBlock(cfg).eval()
    with torch.no_grad():
        for lin in (block.out, block.ff_out):
            lin.weight.zero_()
            lin.bias.zero_()
    h = torch.randn(5, cfg.d_model)
    out = self_attention_layer(h, block)
    ln = lambda t: torch.nn.functional.layer_norm(t, (cfg.d_model,), eps=cfg.ln_eps)
    assert out.shape == h.shape
    torch.testing.assert_close(out, ln(ln(h)), rtol=0, atol=1e-6)


def _hand_block(d, heads, values):
    cfg = ModelConfig(vocab_size=5, m=1, n=0, d_model=d, n_heads=heads, d_ff=2 * d, align_layer=1, dropout=0.0)
    block = AttentionBlock(cfg).double().eval()
    gen = np.random.default_rng(values)
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.as_tensor(gen.uniform(-1, 1, size=tuple(p.shape))))
    return block


def test_self_attention_two_tokens_hand_case():
    block = _hand_block(2, 1, 11)
    h = np.array([[0.3, -1.2], [0.9, 0.4]])
    want = attention_block(h, h, block_params(block))
    got = self_attention_layer(torch.as_tensor(h), block).detach().numpy()
    np.testing.assert_allclose(got, want, atol=1e-6)
    np.testing.assert_allclose(got, GOLD_SELF_2x2, atol=1e-6)


def test_self_attention_multi_head_matches_oracle():
    block = _hand_block(6, 3, 5)
    h = np.random.default_rng(0).normal(size=(4, 6))
    pad = np.array([False, False, False, True])
    want = attention_block(h, h, block_params(block), kv_pad=pad)
    got = self_attention_layer(torch.as_tensor(h), block, torch.as_tensor(pad)).detach().numpy()
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_pad_positions_do_not_leak(cfg):
    block = AttentionBlock(cfg).eval()
    h = torch.randn(6, cfg.d_model)
    pad = torch.tensor([False, False, False, False, True, True])
    out = self_attention_layer(h, block, pad)
    h2 = h.clone()
    h2[4], h2[5] = torch.randn(cfg.d_model) * 10, h[4]
    out2 = self_attention_layer(h2, block, pad)
    torch.testing.assert_close(out[:4], out2[:4], rtol=0, atol=1e-6)


def test_attention_shape_mismatch(cfg):
    block = AttentionBlock(cfg)
    with pytest.raises(ValueError):
        block(torch.randn(1, 3, cfg.d_model), torch.randn(1, 3, cfg.d_model + 1))
    with pytest.raises(ValueError):
        block(torch.randn(1, 3, cfg.d_model), torch.randn(1, 3, cfg.d_model), torch.zeros(1, 4, dtype=torch.bool))


def test_cross_attention_equal_inputs_symmetric(cfg):
    block = AttentionBlock(cfg).eval()
    h = torch.randn(4, cfg.d_model)
    ox, oy = cross_attention_layer(h, h.clone(), block)
    torch.testing.assert_close(ox, oy, rtol=0, atol=0)


def test_cross_attention_swap(cfg):
    block = AttentionBlock(cfg).eval()
    hx, hy = torch.randn(3, cfg.d_model), torch.randn(5, cfg.d_model)
    ox, oy = cross_attention_layer(hx, hy, block)
    sy, sx = cross_attention_layer(hy, hx, block)
    torch.testing.assert_close(ox, sx, rtol=0, atol=0)
    torch.testing.assert_close(oy, sy, rtol=0, atol=0)


def test_cross_attention_hand_case():
    block = _hand_block(2, 1, 17)
    hx = np.array([[1.0, 0.5], [-0.2, 0.7]])
    hy = np.array([[0.1, -0.4], [0.8, 0.3]])
    p = block_params(block)
    ox, oy = cross_attention_layer(torch.as_tensor(hx), torch.as_tensor(hy), block)
    np.testing.assert_allclose(ox.detach().numpy(), attention_block(hx, hy, p), atol=1e-6)
    np.testing.assert_allclose(oy.detach().numpy(), attention_block(hy, hx, p), atol=1e-6)


def test_cross_attention_directions_share_weights(model):
    block = model.cross_layers[0]
    hx, hy = torch.randn(3, 8), torch.randn(4, 8)
    before = cross_attention_layer(hx, hy, block)
    with torch.no_grad():
        block.query.weight.add_(0.5)
    after = cross_attention_layer(hx, hy, block)
    assert not torch.allclose(before[0], after[0])
    assert not torch.allclose(before[1], after[1])
    names = [n for n, _ in model.named_parameters() if n.startswith("cross_layers.0.query")]
    assert names == ["cross_layers.0.query.weight", "cross_layers.0.query.bias"]


def test_encode_tap_zero_is_embedding_lookup(model):
    pair = _pair([5, 6, 7], [8, 9])
    s, t = encode_pair(pair, model, 0)
    ids = torch.tensor(pair.src.ids)
    want = model.tok_emb.weight[ids] + model.pos_emb.weight[: len(ids)]
    torch.testing.assert_close(s, want, rtol=0, atol=0)
    assert t.shape == (4, 8)


def test_encode_tap_out_of_range(model):
    with pytest.raises(IndexError):
        encode_pair(_pair([5], [6]), model, 5)
    with pytest.raises(IndexError):
        encode_pair(_pair([5], [6]), model, -1)


def test_monolingual_independence(model, cfg):
    x = [5, 6, 7, 8]
    s1 = [encode_pair(_pair(x, [9, 10]), model, l)[0] for l in range(cfg.m + 1)]
    s2 = [encode_pair(_pair(x, [11, 12, 13, 14, 15]), model, l)[0] for l in range(cfg.m + 1)]
    for a, b in zip(s1, s2):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)
    top1 = encode_pair(_pair(x, [9, 10]), model, cfg.m + 1)[0]
    top2 = encode_pair(_pair(x, [11, 12, 13, 14, 15]), model, cfg.m + 1)[0]
    assert not torch.allclose(top1, top2)


def test_transpose_symmetry(model, cfg):
    x, y = [5, 6, 7], [8, 9, 10, 11]
    for layer in range(cfg.n_layers + 1):
        s, t = encode_pair(_pair(x, y), model, layer)
        t2, s2 = encode_pair(_pair(y, x), model, layer)
        torch.testing.assert_close(s, s2, rtol=0, atol=1e-6)
        torch.testing.assert_close(t, t2, rtol=0, atol=1e-6)


def test_batched_forward_matches_single(model):
    from crossalign.model import pad_batch

    pairs = [_pair([5, 6], [7, 8, 9]), _pair([10, 11, 12, 13], [14])]
    x, xp = pad_batch([p.src.ids for p in pairs])
    y, yp = pad_batch([p.tgt.ids for p in pairs])
    with torch.no_grad():
        sx, sy = model(x, xp, y, yp).cross_lingual
    for k, p in enumerate(pairs):
        s, t = encode_pair(p, model, model.config.n_layers)
        torch.testing.assert_close(sx[k, : len(p.src)], s, rtol=0, atol=1e-5)
        torch.testing.assert_close(sy[k, : len(p.tgt)], t, rtol=0, atol=1e-5)


def _masked(vocab_size, pair, choose):
    from crossalign.corpus import Vocab, SPECIAL_TOKENS

    vocab = Vocab([*SPECIAL_TOKENS, *[f"t{i}" for i in range(vocab_size - 5)]])
    return mask_for_tlm(pair, vocab, np.random.default_rng(0), MaskRates(choose=choose))


def test_tlm_logits_shapes(model, cfg):
    pair = _pair([5, 6, 7, 8, 9, 10], [11, 12, 13])
    logits, targets = tlm_logits(_masked(cfg.vocab_size, pair, 0.0), model)
    assert logits.shape == (0, cfg.vocab_size) and targets.numel() == 0
    mp = _masked(cfg.vocab_size, pair, 0.5)
    logits, targets = tlm_logits(mp, model)
    assert logits.shape == (mp.n_labels, cfg.vocab_size)
    assert targets.tolist() == [*mp.src_labels[mp.src_labels >= 0], *mp.tgt_labels[mp.tgt_labels >= 0]]


def test_checkpoint_round_trip_bit_exact(tmp_path, model):
    from crossalign.corpus import SPECIAL_TOKENS, Vocab

    vocab = Vocab([*SPECIAL_TOKENS, *[f"t{i}" for i in range(15)]])
    save_checkpoint(tmp_path / "m.safetensors", model, vocab, {"stage": 1})
    loaded, v2, extra = load_checkpoint(tmp_path / "m.safetensors")
    assert v2 == vocab and extra == {"stage": 1} and loaded.config == model.config
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    pair = _pair([5, 6, 7], [8, 9])
    for layer in range(model.config.n_layers + 1):
        a, b = encode_pair(pair, model, layer), encode_pair(pair, loaded.eval(), layer)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_checkpoint_rejects_foreign_files(tmp_path):
    from safetensors.torch import save_file

    save_file({"a": torch.zeros(2)}, str(tmp_path / "x.safetensors"))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.safetensors")


# frozen from tests/oracles.py; with d_model=2 layer norm maps every row to the same point
GOLD_SELF_2x2 = np.array([[-0.81009584, -0.54981961], [-0.81009584, -0.54981961]])
