import numpy as np
import pytest

from mremq import autograd as ag
from mremq.autograd import Tensor
from mremq.checkpoint import CheckpointError, load_model, load_tensors, save_model, save_tensors
from mremq.model import (
    Bits,
    Encoder,
    ModelConfig,
    QuantizedModel,
    embed,
    forward_fp,
    forward_quantized,
    layer_forward,
    logits,
    placement_sites,
    skipped_components,
)
from mremq.quant import ASYMMETRIC, SYMMETRIC, TERNARY, frozen_rounding
from oracles import central_diff, gelu_ref, layer_norm_ref, rel_err


def numpy_forward(P, cfg, tokens):
    """Plain numpy re-derivation of the encoder, used as the forward oracle."""
    x = P["embed/tok"][tokens] + P["embed/pos"][: tokens.shape[1]]
    hs = [x]
    B, S, d = x.shape
    h, dh = cfg.heads, cfg.head_dim
    for l in range(cfg.layers):
        p = f"layer{l}/"
        q = (x @ P[p + "wq"] + P[p + "bq"]).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        k = (x @ P[p + "wk"] + P[p + "bk"]).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        v = (x @ P[p + "wv"] + P[p + "bv"]).reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        sc = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        e = np.exp(sc - sc.max(-1, keepdims=True))
        a = (e / e.sum(-1, keepdims=True)) @ v
        a = a.transpose(0, 2, 1, 3).reshape(B, S, d) @ P[p + "wo"] + P[p + "bo"]
        x1 = layer_norm_ref(x + a, P[p + "ln1/gamma"], P[p + "ln1/beta"])
        f = gelu_ref(x1 @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]
        x = layer_norm_ref(x1 + f, P[p + "ln2/gamma"], P[p + "ln2/beta"])
        hs.append(x)
    return hs, x.mean(1) @ P["head/w"] + P["head/b"]


def test_forward_matches_numpy_oracle(tiny_cfg, tokens):
    m = Encoder.random(tiny_cfg, seed=3, dtype=np.float64)
    hs, lg = forward_fp(m, tokens)
    ref_hs, ref_lg = numpy_forward(m.arrays(), tiny_cfg, tokens)
    for a, b in zip(hs, ref_hs):
        np.testing.assert_allclose(a.data, b, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(lg.data, ref_lg, rtol=1e-10, atol=1e-12)


def test_shorter_sequences_and_bad_tokens(tiny_cfg):
    m = Encoder.random(tiny_cfg)
    assert forward_fp(m, np.zeros((2, 3), dtype=int))[1].shape == (2, 2)
    with pytest.raises(IndexError):
        embed(m, np.full((1, 3), tiny_cfg.vocab))
    with pytest.raises(ValueError):
        embed(m, np.zeros((1, tiny_cfg.max_seq_len + 1), dtype=int))
    with pytest.raises(ValueError):
        embed(m, np.zeros(4, dtype=int))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)


def test_bits_parse():
    assert Bits.parse("2,2,8") == Bits(2, 2, 8)
    assert Bits.parse("4-4-8") == Bits(4, 4, 8)
    assert Bits.parse("off,4,off") == Bits(None, 4, None)
    with pytest.raises(ValueError):
        Bits.parse("2,2")


def test_placement_counts_and_modes(tiny_cfg):
    sites = placement_sites(tiny_cfg)
    names = [s.name for s in sites]
    assert names[0] == "embed/tok"
    assert len(names) == len(set(names)) == 1 + tiny_cfg.layers * (6 + 8)
    asym = [s.name for s in sites if s.kind == "activation_asymmetric"]
    assert asym == [f"layer{l}/act/{a}" for l in range(tiny_cfg.layers) for a in ("probs", "gelu")]
    skipped = skipped_components(tiny_cfg)
    assert "head/w" in skipped and "embed/pos" in skipped
    assert not set(skipped) & set(names)


def test_every_site_visited_once_per_forward(tiny_cfg, tokens):
    q = QuantizedModel(tiny_cfg, Encoder.random(tiny_cfg).arrays(), Bits(4, 4, 8))
    q.calibrate(tokens)
    q.reset_audit()
    forward_fp(q, tokens)
    assert set(q.audit) == {s.name for s in placement_sites(tiny_cfg)}
    assert set(q.audit.values()) == {1}


def test_site_modes(tiny_cfg):
    q = QuantizedModel(tiny_cfg, Encoder.random(tiny_cfg).arrays(), Bits(2, 4, 8))
    assert q.sites["layer0/wq"].mode == TERNARY
    assert q.sites["embed/tok"].mode == SYMMETRIC and q.sites["embed/tok"].bits == 4
    assert q.sites["layer1/act/gelu"].mode == ASYMMETRIC
    assert q.sites["layer1/act/in"].bits == 8


def test_uncalibrated_activation_raises(tiny_cfg, tokens):
    q = QuantizedModel(tiny_cfg, Encoder.random(tiny_cfg).arrays(), Bits(4, 4, 8))
    assert not q.calibrated
    with pytest.raises(RuntimeError, match="calibrate"):
        forward_fp(q, tokens)
    q.calibrate(tokens)
    assert q.calibrated


def test_identity_reduction(tiny_cfg, tokens):
    fp = Encoder.random(tiny_cfg, seed=5)
    q = QuantizedModel.from_fp(fp, Bits.off())
    q.calibrate(tokens)
    a, b = forward_fp(fp, tokens), forward_fp(q, tokens)
    for x, y in zip(a[0] + [a[1]], b[0] + [b[1]]):
        assert x.data.tobytes() == y.data.tobytes()


def test_forward_quantized_range(tiny_cfg, tokens):
    m = Encoder.random(tiny_cfg)
    hs, _ = forward_fp(m, tokens)
    outs = forward_quantized(m, hs[0], (0, 2))
    assert outs[-1].data.tobytes() == hs[2].data.tobytes()
    with pytest.raises(ValueError):
        forward_quantized(m, hs[0], (1, 1))


def test_quantized_two_layer_model_gradcheck(tiny_cfg, tokens):
    """Backprop through the whole quantized network against finite differences
    of the frozen-rounding surrogate (equal to the real network at the point)."""
    fp = Encoder.random(tiny_cfg, seed=7, dtype=np.float64)
    q = QuantizedModel.from_fp(fp, Bits(4, 2, 8))
    q.calibrate(tokens)
    wts = np.random.default_rng(0).normal(size=(tokens.shape[0], tiny_cfg.num_classes))
    with frozen_rounding():
        with ag.no_grad():
            base = forward_fp(q, tokens)[1].data
        lg = forward_fp(q, tokens)[1]
        np.testing.assert_allclose(lg.data, base, rtol=1e-12, atol=1e-14)
        grads = ag.backward(ag.sum_all(ag.mul(lg, Tensor(wts, dtype=np.float64))))

        def f():
            with ag.no_grad():
                return float((forward_fp(q, tokens)[1].data * wts).sum())

        names = ["layer0/wq", "layer1/w2", "layer0/ln1/gamma", "embed/tok", "qspec/layer1/wo",
                 "qspec/layer0/act/probs", "qspec/layer1/act/gelu", "qspec/layer0/act/in"]
        tens = {**q.params, **q.step_tensors()}
        for n in names:
            t = tens[n]
            num = central_diff(f, [t.data])[0]
            assert rel_err(grads[t], num) < 1e-4, n


def test_checkpoint_round_trip(tiny_cfg, tokens, tmp_path):
    q = QuantizedModel.from_fp(Encoder.random(tiny_cfg, seed=2), Bits(4, 2, 8), pcq=True)
    q.calibrate(tokens)
    save_model(tmp_path / "q.mrmq", q)
    r = load_model(tmp_path / "q.mrmq")
    assert isinstance(r, QuantizedModel) and r.bits == q.bits and r.pcq and r.calibrated
    for k, t in q.params.items():
        assert t.data.tobytes() == r.params[k].data.tobytes()
    for k, t in q.step_tensors().items():
        assert t.data.tobytes() == r.step_tensors()[k].data.tobytes()
    assert logits(q, tokens).tobytes() == logits(r, tokens).tobytes()
    fp = Encoder.random(tiny_cfg)
    save_model(tmp_path / "fp.mrmq", fp)
    assert type(load_model(tmp_path / "fp.mrmq")) is Encoder


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "missing.mrmq")
    (tmp_path / "bad").write_bytes(b"NOPE0000")
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "bad")
    with pytest.raises(CheckpointError):
        save_tensors(tmp_path / "x", {"a": np.zeros(2, dtype=np.float64)})
    save_tensors(tmp_path / "t", {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    data = (tmp_path / "t").read_bytes()
    (tmp_path / "t2").write_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "t2")


def test_checkpoint_byte_layout(tmp_path):
    save_tensors(tmp_path / "t", {"ab": np.array([1.5], dtype=np.float32)})
    raw = (tmp_path / "t").read_bytes()
    expect = (b"MRMQ" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
              + b"ab" + (1).to_bytes(4, "little") + (1).to_bytes(8, "little") + b"\x00"
              + np.array([1.5], dtype="<f4").tobytes())
    assert raw == expect


def test_layer_forward_accepts_arrays(tiny_cfg, tokens):
    m = Encoder.random(tiny_cfg)
    x = embed(m, tokens).data
    assert layer_forward(m, 0, x).shape == x.shape
