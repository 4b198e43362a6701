import math

import numpy as np
import pytest

from lcs2s import autodiff as ad
from lcs2s.autodiff import Tape, Tensor
from lcs2s.corpus import STOP_ID, Example
from lcs2s.errors import CheckpointError, ContractError, VocabError
from lcs2s.model import (
    ModelConfig,
    Seq2Seq,
    load_checkpoint,
    lstm_cell_step,
    param_shapes,
    save_checkpoint,
)
from lcs2s.training import nll_loss


@pytest.fixture(autouse=True)
def _float64():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float32)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        src_vocab_size=6,
        tgt_vocab_size=6,
        num_charges=3,
        embed_dim=4,
        label_embed_dim=4,
        hidden_dim=4,
        label_mode="full",
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_example(src_ids, tgt_ids, charge_id=0) -> Example:
    return Example(
        fact=[f"s{i}" for i in src_ids],
        rationale=[f"t{i}" for i in tgt_ids[:-1]],
        charge=f"c{charge_id}",
        src_ids=list(src_ids),
        tgt_ids=list(tgt_ids),
        charge_id=charge_id,
    )


# --- LSTM cell ---------------------------------------------------------------


def _zero_weights(hidden, in_dim):
    return (
        Tensor(np.zeros((4 * hidden, in_dim))),
        Tensor(np.zeros((4 * hidden, hidden))),
        Tensor(np.zeros(4 * hidden)),
    )


def test_lstm_cell_all_zero():
    w_x, w_h, b = _zero_weights(1, 1)
    h, c = lstm_cell_step(Tensor([0.3]), Tensor([0.0]), Tensor([0.0]), w_x, w_h, b)
    assert h.data.tolist() == [0.0]
    assert c.data.tolist() == [0.0]


def test_lstm_cell_zero_weights_nonzero_cell():
    # Gates all sigmoid(0)=0.5, candidate tanh(0)=0:
    # c = 0.5 * 1 = 0.5, h = 0.5 * tanh(0.5)
    w_x, w_h, b = _zero_weights(1, 1)
    h, c = lstm_cell_step(Tensor([0.3]), Tensor([0.0]), Tensor([1.0]), w_x, w_h, b)
    assert math.isclose(c.data[0], 0.5, abs_tol=1e-12)
    assert math.isclose(h.data[0], 0.5 * math.tanh(0.5), abs_tol=1e-12)


def test_lstm_cell_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    hidden, in_dim = 3, 2
    w_x = Tensor(rng.uniform(-1, 1, (4 * hidden, in_dim)), requires_grad=True)
    w_h = Tensor(rng.uniform(-1, 1, (4 * hidden, hidden)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 4 * hidden), requires_grad=True)
    x = Tensor(rng.uniform(-1, 1, in_dim))
    h_prev = Tensor(rng.uniform(-1, 1, hidden))
    c_prev = Tensor(rng.uniform(-1, 1, hidden))

    def f():
        h, _ = lstm_cell_step(x, h_prev, c_prev, w_x, w_h, b)
        return ad.sum_all(h)

    err = ad.grad_check(f, [("w_x", w_x), ("w_h", w_h), ("b", b)], eps=1e-4)
    assert err < 1e-4, err


# --- encoder ------------------------------------------------------------------


def test_encode_single_token():
    net = Seq2Seq.init(tiny_config(), seed=0)
    enc = net.encode([4])
    assert enc.states.data.shape == (1, 2 * net.config.hidden_dim)
    assert enc.init_h.data.shape == (net.config.hidden_dim,)


def test_encode_state_width():
    net = Seq2Seq.init(tiny_config(), seed=1)
    enc = net.encode([1, 2, 3, 4, 5])
    assert enc.states.data.shape == (5, 2 * net.config.hidden_dim)


def test_encode_rejects_empty_and_overlong_and_bad_ids():
    net = Seq2Seq.init(tiny_config(), seed=0)
    with pytest.raises(ContractError):
        net.encode([])
    with pytest.raises(VocabError):
        net.encode([99])
    with pytest.raises(ContractError):
        net.encode([1] * 257)


def test_encode_palindrome_with_tied_directions():
    net = Seq2Seq.init(tiny_config(), seed=3)
    p = net.params
    for direction in ("wx", "wh", "b"):
        getattr(p, f"enc_bwd_{direction}").data[...] = getattr(p, f"enc_fwd_{direction}").data
    src = [1, 4, 2, 4, 1]  # palindrome
    states = net.encode(src).states.data
    hidden = net.config.hidden_dim
    n = len(src)
    for j in range(n):
        np.testing.assert_allclose(
            states[j, :hidden], states[n - 1 - j, hidden:], atol=1e-12
        )


# --- attention ----------------------------------------------------------------


def test_attention_single_state():
    net = Seq2Seq.init(tiny_config(), seed=4)
    enc = net.encode([2])
    context, alpha = net.attention(enc.init_h, enc.states)
    assert alpha.data.tolist() == [1.0]
    np.testing.assert_array_equal(context.data, enc.states.data[0])


def test_attention_identical_states_uniform():
    net = Seq2Seq.init(tiny_config(), seed=5)
    state_row = np.arange(8, dtype=np.float64) / 10.0
    states = Tensor(np.tile(state_row, (3, 1)))
    context, alpha = net.attention(Tensor(np.ones(4)), states)
    np.testing.assert_allclose(alpha.data, [1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(context.data, state_row, atol=1e-12)


def test_attention_zero_bilinear_uniform():
    net = Seq2Seq.init(tiny_config(), seed=6)
    net.params.attn_w.data[...] = 0.0
    enc = net.encode([1, 2, 3, 4])
    _, alpha = net.attention(enc.init_h, enc.states)
    np.testing.assert_allclose(alpha.data, [0.25] * 4, atol=1e-12)


# --- decoder step -------------------------------------------------------------


def test_decoder_step_distribution_is_normalized():
    net = Seq2Seq.init(tiny_config(), seed=7)
    enc = net.encode([1, 2, 3])
    dist, _, alpha = net.decoder_step(2, (enc.init_h, enc.init_c), 1, enc)
    assert abs(dist.data.sum() - 1.0) < 1e-6
    assert (dist.data >= 0).all()
    assert abs(alpha.data.sum() - 1.0) < 1e-6


def test_decoder_step_rejects_bad_charge():
    net = Seq2Seq.init(tiny_config(), seed=7)
    enc = net.encode([1])
    with pytest.raises(VocabError):
        net.decoder_step(2, (enc.init_h, enc.init_c), 17, enc)


def test_no_charge_mode_ignores_charge_id():
    net = Seq2Seq.init(tiny_config(label_mode="no_charge"), seed=8)
    enc = net.encode([1, 2])
    state = (enc.init_h, enc.init_c)
    d0, _, _ = net.decoder_step(4, state, 0, enc)
    d2, _, _ = net.decoder_step(4, state, 2, enc)
    assert np.array_equal(d0.data, d2.data)


def test_full_mode_distinguishes_charges():
    net = Seq2Seq.init(tiny_config(), seed=9)
    enc = net.encode([1, 2])
    state = (enc.init_h, enc.init_c)
    d0, _, _ = net.decoder_step(4, state, 0, enc)
    d1, _, _ = net.decoder_step(4, state, 1, enc)
    assert np.abs(d0.data - d1.data).max() > 0.0


def test_no_attention_depends_on_encoder_only_through_init_state():
    net = Seq2Seq.init(tiny_config(attention_enabled=False), seed=10)
    enc_a = net.encode([1, 2, 3])
    enc_b = net.encode([5, 4, 1, 2])
    # Same init state, different per-position states: output must not change.
    enc_b.init_h, enc_b.init_c = enc_a.init_h, enc_a.init_c
    state = (enc_a.init_h, enc_a.init_c)
    da, _, alpha_a = net.decoder_step(3, state, 1, enc_a)
    db, _, alpha_b = net.decoder_step(3, state, 1, enc_b)
    assert alpha_a is None and alpha_b is None
    assert np.array_equal(da.data, db.data)


def test_output_width_tracks_label_mode():
    h, l = 4, 4
    for mode, has_label_block in (
        ("full", True), ("no_hidden", True), ("no_softmax", False), ("no_charge", False),
    ):
        shapes = param_shapes(tiny_config(label_mode=mode))
        expected = h + 2 * h + (l if has_label_block else 0)
        assert shapes["out_w0"] == (h, expected), mode
        assert ("merge_w" in shapes) == (mode in ("full", "no_softmax"))


# --- teacher forcing ----------------------------------------------------------


def test_forward_logprob_uniform_model():
    net = Seq2Seq.init(tiny_config(), seed=11)
    net.params.out_w1.data[...] = 0.0
    ex = make_example([1, 2], [4, 5, STOP_ID], charge_id=1)
    logps = [lp.item() for lp in net.forward_logprob(ex)]
    assert len(logps) == 3
    for lp in logps:
        assert math.isclose(lp, -math.log(6), abs_tol=1e-12)


def test_forward_logprob_sum_identity():
    net = Seq2Seq.init(tiny_config(), seed=12)
    ex = make_example([1, 2, 3], [4, 5, STOP_ID], charge_id=2)
    logps = [lp.item() for lp in net.forward_logprob(ex)]
    assert all(lp <= 0 for lp in logps)
    product = 1.0
    for lp in logps:
        product *= math.exp(lp)
    assert abs(sum(logps) - math.log(product)) < 1e-9


def test_forward_logprob_requires_stop_terminated_target():
    net = Seq2Seq.init(tiny_config(), seed=12)
    with pytest.raises(ContractError):
        net.forward_logprob(make_example([1], [4, 5]))
    with pytest.raises(ContractError):
        net.forward_logprob(make_example([1], []))


def test_charge_embedding_gradient_by_mode():
    ex = make_example([1, 2], [4, STOP_ID], charge_id=1)
    for mode, expect_nonzero in (("full", True), ("no_charge", False)):
        net = Seq2Seq.init(tiny_config(label_mode=mode), seed=13)
        with Tape() as tape:
            loss = nll_loss(net, [ex])
            tape.backward(loss)
        magnitude = np.abs(net.params.charge_embedding.grad).max()
        if expect_nonzero:
            assert magnitude > 0.0
        else:
            assert magnitude == 0.0


def test_charge_row_perturbation_is_local_to_that_charge():
    net = Seq2Seq.init(tiny_config(), seed=14)
    ex0 = make_example([1, 2], [4, STOP_ID], charge_id=0)
    ex1 = make_example([1, 2], [4, STOP_ID], charge_id=1)
    before0 = [lp.item() for lp in net.forward_logprob(ex0)]
    before1 = [lp.item() for lp in net.forward_logprob(ex1)]
    net.params.charge_embedding.data[0] += 0.25
    after0 = [lp.item() for lp in net.forward_logprob(ex0)]
    after1 = [lp.item() for lp in net.forward_logprob(ex1)]
    assert before1 == after1
    assert before0 != after0


def test_end_to_end_gradient_check_tiny_config():
    cfg = ModelConfig(
        src_vocab_size=5, tgt_vocab_size=5, num_charges=2,
        embed_dim=4, label_embed_dim=4, hidden_dim=4, label_mode="full",
    )
    net = Seq2Seq.init(cfg, seed=15)
    ex = make_example([1, 4, 2], [4, 2, STOP_ID], charge_id=1)

    def f():
        return nll_loss(net, [ex])

    # eps=1e-3: central differencing at eps=1e-4 bottoms out at ~2e-12 of
    # rounding noise, which the 1e-8 relative floor turns into ~2e-4 on
    # near-dead entries.
    err = ad.grad_check(f, net.params.named(), eps=1e-3)
    assert err < 1e-4, err


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    ad.set_default_dtype(np.float32)
    cfg = tiny_config(label_mode="no_softmax")
    net = Seq2Seq.init(cfg, seed=16)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, net.params)
    loaded_cfg, loaded = load_checkpoint(path)
    assert loaded_cfg == cfg
    for (name_a, a), (name_b, b) in zip(net.params.named(), loaded.named()):
        assert name_a == name_b
        assert np.array_equal(a.data, b.data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    cfg = tiny_config()
    save_checkpoint(path, cfg, Seq2Seq.init(cfg, seed=0).params)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_unknown_parameter(tmp_path):
    path = tmp_path / "model.ckpt"
    cfg = tiny_config()
    save_checkpoint(path, cfg, Seq2Seq.init(cfg, seed=0).params)
    blob = path.read_bytes().replace(b"attn_w", b"attn_q")
    path.write_bytes(blob)
    with pytest.raises(CheckpointError, match="unknown parameter"):
        load_checkpoint(path)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    path = tmp_path / "model.ckpt"
    cfg = tiny_config()
    save_checkpoint(path, cfg, Seq2Seq.init(cfg, seed=0).params)
    # Same-length header edit: claimed hidden_dim no longer matches the data.
    blob = path.read_bytes().replace(b"hidden_dim=4", b"hidden_dim=8")
    path.write_bytes(blob)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)
