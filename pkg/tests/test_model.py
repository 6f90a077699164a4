import numpy as np
import pytest

from sfnet.model import (
    MetaFrameFeatures,
    ModelConfig,
    SFNet,
    framing,
    meta_frame_count,
    transfer_parameters,
)
from sfnet.tensor import ShapeError, Tensor, no_grad


def tiny_config(**overrides):
    base = dict(
        vocab_size=5,
        in_channels=2,
        input_hw=(8, 8),
        stem_channels=4,
        stem_kernel=3,
        stem_stride=2,
        block_channels=(4, 6),
        block_strides=(2, 2),
        window=4,
        window_stride=2,
        gloss_hidden=6,
        sentence_hidden=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def video(rng, batch, frames, cfg):
    h, w = cfg.input_hw
    return Tensor(rng.normal(size=(batch, frames, cfg.in_channels, h, w)))


def test_framing_paper_cases():
    feats = Tensor(np.zeros((1, 24, 3)))
    _, counts = framing(feats, 12, 3, [24])
    assert counts[0] == 5
    feats = Tensor(np.zeros((1, 12, 3)))
    for stride in (1, 3, 7):
        _, counts = framing(feats, 12, stride, [12])
        assert counts[0] == 1


def test_framing_window_contents():
    feats = Tensor(np.arange(10.0)[None, :, None])
    windows, counts = framing(feats, 4, 2, [10])
    assert counts[0] == 4
    assert np.array_equal(windows.data[0, 2, :, 0], [4.0, 5.0, 6.0, 7.0])


def test_framing_short_sample_rejected():
    feats = Tensor(np.zeros((2, 12, 3)))
    with pytest.raises(ShapeError, match="sample 1"):
        framing(feats, 4, 2, [12, 3])


def test_framing_count_formula_property():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        window = int(rng.integers(1, 20))
        stride = int(rng.integers(1, 10))
        length = int(rng.integers(window, 200))
        # direct sliding-window enumeration
        count = 0
        start = 0
        while start + window <= length:
            count += 1
            start += stride
        assert meta_frame_count(length, window, stride) == count


def test_framing_batch_padding_uses_valid_lengths():
    rng = np.random.default_rng(1)
    feats = Tensor(rng.normal(size=(2, 10, 3)))
    windows, counts = framing(feats, 4, 2, [10, 6])
    assert list(counts) == [4, 2]
    assert windows.data.shape == (2, 4, 4, 3)


def test_forward_full_shape_contract():
    rng = np.random.default_rng(2)
    cfg = tiny_config(window=12, window_stride=3, vocab_size=20)
    net = SFNet(cfg, rng).train()
    logits_sl, logits_gl, meta = net.forward_full(video(rng, 2, 24, cfg), [24, 24])
    assert logits_sl.data.shape == (2, 5, 21)
    assert logits_gl.data.shape == (2, 5, 21)
    assert meta.features.data.shape == (2, 5, cfg.gloss_hidden)


def test_distribution_rows_sum_to_one():
    rng = np.random.default_rng(3)
    cfg = tiny_config()
    net = SFNet(cfg, rng).train()
    logits_sl, logits_gl, meta = net.forward_full(video(rng, 2, 9, cfg), [9, 7])
    for logits in (logits_sl, logits_gl):
        p = net.probabilities(logits).data
        assert np.all(p >= 0)
        valid = p[meta.mask]
        assert np.allclose(valid.sum(axis=-1), 1.0, atol=1e-9)


def test_no_framing_uses_frame_axis():
    rng = np.random.default_rng(4)
    cfg = tiny_config(no_framing=True)
    net = SFNet(cfg, rng).train()
    logits_sl, logits_gl, meta = net.forward_full(video(rng, 2, 9, cfg), [9, 6])
    assert logits_sl.data.shape[1] == 9
    assert logits_gl is None
    assert list(meta.counts) == [9, 6]


def test_no_gloss_lstm_concatenates_window():
    rng = np.random.default_rng(5)
    cfg = tiny_config(no_gloss_lstm=True)
    net = SFNet(cfg, rng).eval()
    vid = video(rng, 1, 8, cfg)
    meta = net.gloss_features(vid, [8])
    k = net.frame_channels
    assert meta.features.data.shape[2] == cfg.window * k
    # meta frame 1 must literally be the window of normalized frame features
    feats = net.gloss_bn(net.frame_features(vid, [8]),
                         mask=np.ones((1, 8), dtype=bool))
    start = cfg.window_stride
    want = feats.data[0, start:start + cfg.window].reshape(-1)
    assert np.allclose(meta.features.data[0, 1], want, atol=1e-12)


def test_zeroed_3d_branches_equal_no_3d_ablation():
    rng = np.random.default_rng(6)
    cfg_full = tiny_config()
    full = SFNet(cfg_full, np.random.default_rng(7)).train()
    for i in (1, 2):
        full._modules()[f"block{i}"].conv3d.kernel.data[:] = 0.0
        full._modules()[f"block{i}"].conv3d.bias.data[:] = 0.0
    ablated = SFNet(tiny_config(no_3d=True), np.random.default_rng(8)).train()
    abl_params = ablated.parameters()
    for name, tensor in full.parameters().items():
        if name in abl_params:
            abl_params[name].data[...] = tensor.data
    rngv = np.random.default_rng(9)
    vid = video(rngv, 2, 8, cfg_full)
    out_full, _, _ = full.forward_full(vid, [8, 8])
    out_abl, _, _ = ablated.forward_full(vid, [8, 8])
    assert np.array_equal(out_full.data, out_abl.data)


def test_meta_frame_invariant_to_far_frames():
    rng = np.random.default_rng(10)
    cfg = tiny_config()
    net = SFNet(cfg, rng)
    net.train()
    warm = video(rng, 1, 12, cfg)
    net.forward_full(warm, [12])  # populate running stats
    net.eval()
    vid = warm.data.copy()
    with no_grad():
        base = net.gloss_features(Tensor(vid), [12])
    # window 0 covers frames [0, 4); 3D stacks reach 1 frame per block beyond it
    receptive_margin = len(cfg.block_channels) * (cfg.temporal_kernel // 2)
    far = 4 + receptive_margin + 1
    vid[0, far:] += 3.0
    with no_grad():
        poked = net.gloss_features(Tensor(vid), [12])
    assert np.allclose(base.features.data[0, 0], poked.features.data[0, 0], atol=1e-12)
    assert not np.allclose(base.features.data[0, -1], poked.features.data[0, -1])


def test_word_level_forward():
    rng = np.random.default_rng(11)
    cfg = tiny_config(word_level=True, window=4, window_stride=2)
    net = SFNet(cfg, rng)
    net.train()
    net.forward_word_level(video(rng, 2, 4, cfg), [4, 4])
    net.eval()
    clip = video(rng, 1, 4, cfg)
    doubled = Tensor(np.concatenate([clip.data, clip.data], axis=0))
    with no_grad():
        logits = net.forward_word_level(doubled, [4, 4])
    assert logits.data.shape == (2, cfg.vocab_size)
    assert np.array_equal(logits.data[0], logits.data[1])
    assert np.all(np.isfinite(logits.data))


def test_word_level_rejects_multi_meta_frame_clips():
    rng = np.random.default_rng(12)
    cfg = tiny_config(word_level=True, window=4, window_stride=2)
    net = SFNet(cfg, rng).train()
    with pytest.raises(ShapeError, match="one meta frame"):
        net.forward_word_level(video(rng, 1, 8, cfg), [8])


def test_word_level_gradcheck():
    from sfnet.gradcheck import check_gradients
    rng = np.random.default_rng(13)
    cfg = tiny_config(word_level=True, window=4, window_stride=2,
                      block_channels=(3,), block_strides=(2,), gloss_hidden=3)
    net = SFNet(cfg, rng).train()
    vid = video(rng, 1, 4, cfg)
    target = Tensor(np.eye(cfg.vocab_size)[2][None, :])

    def loss():
        logits = net.forward_word_level(vid, [4])
        return ((logits - target) ** 2).mean()

    params = [net.gloss_lstm.w_ih, net.word_head.weight, net.stem.kernel]
    assert check_gradients(loss, params, max_elements=6) < 1e-4


def test_transfer_copies_frame_and_gloss_levels():
    rng = np.random.default_rng(14)
    word_cfg = tiny_config(word_level=True)
    sent_cfg = tiny_config()
    word = SFNet(word_cfg, np.random.default_rng(20))
    word.train()
    word.forward_word_level(video(rng, 2, 4, word_cfg), [4, 4])  # move BN stats
    sent = SFNet(sent_cfg, np.random.default_rng(21))
    before_head = sent.sent_head.weight.data.copy()
    transfer_parameters(word, sent)
    word.eval()
    sent.eval()
    vid = video(rng, 1, 6, word_cfg)
    with no_grad():
        a = word.gloss_features(vid, [6])
        b = sent.gloss_features(vid, [6])
    assert np.array_equal(a.features.data, b.features.data)
    assert np.array_equal(sent.sent_head.weight.data, before_head)


def test_transfer_mismatched_hidden_errors():
    word = SFNet(tiny_config(word_level=True, gloss_hidden=6), np.random.default_rng(0))
    sent = SFNet(tiny_config(gloss_hidden=8), np.random.default_rng(1))
    with pytest.raises(ShapeError, match="gloss_lstm"):
        transfer_parameters(word, sent)


def test_config_text_round_trip():
    cfg = tiny_config(no_3d=True, vocab_size=9)
    text = cfg.to_text()
    back = ModelConfig.from_text(text)
    assert back == cfg
    assert "window = 4" in text


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_text("vocab_size = 3\nbogus_key = 1\n")


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(window=0).validate()
    with pytest.raises(ValueError):
        tiny_config(no_framing=True, no_gloss_lstm=True).validate()
    with pytest.raises(ValueError):
        tiny_config(vocab_size=0).validate()


def test_meta_mask():
    meta = MetaFrameFeatures(Tensor(np.zeros((2, 4, 3))), np.array([4, 2]))
    assert np.array_equal(meta.mask,
                          [[True, True, True, True], [True, True, False, False]])
