"""Label-conditioned encoder-decoder with global attention.

The encoder is a one-layer bidirectional LSTM over source token embeddings;
each source position j carries the concatenation [fwd_h_j; bwd_h_j]. The
decoder is an LSTM whose output distribution at step t is

    softmax(W1 tanh(W0 [s_t; c_t; E_v]))

where c_t is the attention context sum_j alpha_j h_j with bilinear scores
s_t^T W2 h_j, and E_v is the charge-label embedding row. The label enters at
two switchable points: inside the output concatenation above, and by merging
it into the previous hidden state before the LSTM update,

    s_prev' = tanh(Wv [s_prev; E_v] + bv)

(cell state untouched, applied at every step including the first). The four
label modes select these injections: ``full`` both, ``no_softmax`` only the
hidden merge, ``no_hidden`` only the output injection, ``no_charge`` neither.
Disabling attention drops c_t entirely, leaving the encoder to influence the
decoder only through its initial state.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MAX_SOURCE_LEN, SOS_ID, STOP_ID, Example
from .errors import CheckpointError, ContractError, VocabError

LABEL_MODES = ("full", "no_softmax", "no_hidden", "no_charge")

CHECKPOINT_MAGIC = b"LCS2S"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    num_charges: int
    embed_dim: int = 64
    label_embed_dim: int = 64
    hidden_dim: int = 128
    label_mode: str = "full"
    attention_enabled: bool = True

    def __post_init__(self):
        for name in ("src_vocab_size", "tgt_vocab_size", "num_charges",
                     "embed_dim", "label_embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelConfig.{name} must be >= 1")
        if self.label_mode not in LABEL_MODES:
            raise ContractError(f"unknown label_mode {self.label_mode!r}")

    @property
    def softmax_inject(self) -> bool:
        return self.label_mode in ("full", "no_hidden")

    @property
    def hidden_merge(self) -> bool:
        return self.label_mode in ("full", "no_softmax")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape map implied by a configuration."""
    h, e, l = cfg.hidden_dim, cfg.embed_dim, cfg.label_embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "src_embedding": (cfg.src_vocab_size, e),
        "tgt_embedding": (cfg.tgt_vocab_size, e),
        "charge_embedding": (cfg.num_charges, l),
        "enc_fwd_wx": (4 * h, e),
        "enc_fwd_wh": (4 * h, h),
        "enc_fwd_b": (4 * h,),
        "enc_bwd_wx": (4 * h, e),
        "enc_bwd_wh": (4 * h, h),
        "enc_bwd_b": (4 * h,),
        "dec_wx": (4 * h, e),
        "dec_wh": (4 * h, h),
        "dec_b": (4 * h,),
        "init_w": (h, 2 * h),
        "init_b": (h,),
    }
    if cfg.attention_enabled:
        shapes["attn_w"] = (h, 2 * h)
    out_in = h + (2 * h if cfg.attention_enabled else 0) + (l if cfg.softmax_inject else 0)
    shapes["out_w0"] = (h, out_in)
    shapes["out_w1"] = (cfg.tgt_vocab_size, h)
    if cfg.hidden_merge:
        shapes["merge_w"] = (h, h + l)
        shapes["merge_b"] = (h,)
    return shapes


INIT_RANGE = 0.08


class ModelParams:
    """All trainable weights, addressable by name in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    @classmethod
    def init_uniform(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dtype = ad.get_default_dtype()
        tensors = {}
        for name, shape in param_shapes(cfg).items():
            data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(dtype)
            tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
        return cls(tensors)

    def __getattr__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise AttributeError(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._tensors.values())).data.dtype


@dataclass
class EncoderOutput:
    """Per-position encoder states stacked as rows, plus the decoder init."""

    states: Tensor  # (source_len, 2 * hidden_dim)
    init_h: Tensor  # (hidden_dim,)
    init_c: Tensor  # (hidden_dim,)


def lstm_cell_step(
    x: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM cell update with gate layout [input; forget; output; candidate].

    c = f * c_prev + i * g,  h = o * tanh(c)
    """
    return ad.lstm_cell(x, h_prev, c_prev, w_x, w_h, b)


class Seq2Seq:
    """Configured model: parameters plus the forward computations."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Seq2Seq":
        return cls(config, ModelParams.init_uniform(config, seed))

    def _zeros(self, n: int) -> Tensor:
        return Tensor._wrap(np.zeros(n, dtype=self.params.dtype))

    def encode(self, src_ids: list[int]) -> EncoderOutput:
        """Run the bidirectional encoder over a source id sequence.

        The decoder init applies the learned projection to the encoder's last
        states: tanh(init_w [fwd_last; bwd_first] + init_b), independently for
        the hidden and the cell part.
        """
        cfg, p = self.config, self.params
        if not src_ids:
            raise ContractError("encode: empty source sequence")
        if len(src_ids) > MAX_SOURCE_LEN:
            raise ContractError(
                f"encode: source length {len(src_ids)} exceeds {MAX_SOURCE_LEN}"
            )
        for i in src_ids:
            if not (0 <= i < cfg.src_vocab_size):
                raise VocabError(f"encode: source id {i} outside vocabulary")
        hidden = cfg.hidden_dim
        x_mat = ad.embed_rows(p.src_embedding, src_ids)
        h0 = self._zeros(hidden)
        c0 = self._zeros(hidden)
        fwd_h, fwd_last_c = ad.lstm_sequence(
            x_mat, h0, c0, p.enc_fwd_wx, p.enc_fwd_wh, p.enc_fwd_b
        )
        # The backward direction runs over the reversed source; flipping its
        # outputs back puts bwd_h[j] at source position j.
        bwd_h_rev, bwd_last_c = ad.lstm_sequence(
            ad.flip_rows(x_mat), h0, c0, p.enc_bwd_wx, p.enc_bwd_wh, p.enc_bwd_b
        )
        bwd_h = ad.flip_rows(bwd_h_rev)
        states = ad.hconcat(fwd_h, bwd_h)

        n = len(src_ids)
        last_h = ad.concat(ad.row(fwd_h, n - 1), ad.row(bwd_h, 0))
        last_c = ad.concat(fwd_last_c, bwd_last_c)
        init_h = ad.tanh(ad.add(ad.matmul(p.init_w, last_h), p.init_b))
        init_c = ad.tanh(ad.add(ad.matmul(p.init_w, last_c), p.init_b))
        return EncoderOutput(states=states, init_h=init_h, init_c=init_c)

    def attention(self, s: Tensor, states: Tensor) -> tuple[Tensor, Tensor]:
        """Context vector and attention weights for one decoder state.

        score_j = s^T W2 h_j, alpha = softmax(scores), context = sum alpha_j h_j.
        """
        scores = ad.matmul(states, ad.matmul(s, self.params.attn_w))
        alpha = ad.softmax(scores)
        context = ad.matmul(ad.transpose(states), alpha)
        return context, alpha

    def _step(
        self,
        y_prev_id: int,
        h_prev: Tensor,
        c_prev: Tensor,
        charge_id: int,
        enc: EncoderOutput,
    ) -> tuple[Tensor, tuple[Tensor, Tensor], Tensor | None]:
        """One decoder step returning output logits, new state and weights."""
        cfg, p = self.config, self.params
        if not (0 <= charge_id < cfg.num_charges):
            raise VocabError(f"decoder step: charge id {charge_id} outside {cfg.num_charges} labels")
        if not (0 <= y_prev_id < cfg.tgt_vocab_size):
            raise VocabError(f"decoder step: token id {y_prev_id} outside vocabulary")
        if cfg.hidden_merge:
            label = ad.row(p.charge_embedding, charge_id)
            h_prev = ad.tanh(ad.add(ad.matmul(p.merge_w, ad.concat(h_prev, label)), p.merge_b))
        x = ad.row(p.tgt_embedding, y_prev_id)
        s, c = lstm_cell_step(x, h_prev, c_prev, p.dec_wx, p.dec_wh, p.dec_b)
        parts = [s]
        alpha = None
        if cfg.attention_enabled:
            context, alpha = self.attention(s, enc.states)
            parts.append(context)
        if cfg.softmax_inject:
            parts.append(ad.row(p.charge_embedding, charge_id))
        logits = ad.matmul(p.out_w1, ad.tanh(ad.matmul(p.out_w0, ad.concat(*parts))))
        return logits, (s, c), alpha

    def decoder_step(
        self,
        y_prev_id: int,
        state: tuple[Tensor, Tensor],
        charge_id: int,
        enc: EncoderOutput,
    ) -> tuple[Tensor, tuple[Tensor, Tensor], Tensor | None]:
        """One decoder step returning the next-token distribution."""
        logits, new_state, alpha = self._step(y_prev_id, state[0], state[1], charge_id, enc)
        return ad.softmax(logits), new_state, alpha

    def forward_logprob(self, example: Example) -> list[Tensor]:
        """Teacher-forced per-token log-probabilities of the target sequence."""
        if not example.tgt_ids:
            raise ContractError("forward_logprob: empty target")
        if example.tgt_ids[-1] != STOP_ID:
            raise ContractError("forward_logprob: target must end with the stop token")
        enc = self.encode(example.src_ids)
        h, c = enc.init_h, enc.init_c
        prev = SOS_ID
        logps = []
        for tok in example.tgt_ids:
            if not (0 <= tok < self.config.tgt_vocab_size):
                raise VocabError(f"forward_logprob: target id {tok} outside vocabulary")
            logits, (h, c), _ = self._step(prev, h, c, example.charge_id, enc)
            logps.append(ad.pick(ad.log_softmax(logits), tok))
            prev = tok
        return logps


# --- checkpoint io ----------------------------------------------------------

_CONFIG_FIELDS = (
    "src_vocab_size", "tgt_vocab_size", "num_charges",
    "embed_dim", "label_embed_dim", "hidden_dim",
    "label_mode", "attention_enabled",
)


def _config_header(cfg: ModelConfig) -> bytes:
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = int(value)
        lines.append(f"{name}={value}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_header(blob: bytes) -> ModelConfig:
    fields: dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            fields[key] = value
    try:
        return ModelConfig(
            src_vocab_size=int(fields["src_vocab_size"]),
            tgt_vocab_size=int(fields["tgt_vocab_size"]),
            num_charges=int(fields["num_charges"]),
            embed_dim=int(fields["embed_dim"]),
            label_embed_dim=int(fields["label_embed_dim"]),
            hidden_dim=int(fields["hidden_dim"]),
            label_mode=fields["label_mode"],
            attention_enabled=bool(int(fields["attention_enabled"])),
        )
    except (KeyError, ValueError, ContractError) as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from exc


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams) -> None:
    """Write magic, version, config header and named float32 parameters."""
    try:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        header = _config_header(cfg)
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        named = params.named()
        buf.write(struct.pack("<I", len(named)))
        for name, tensor in named:
            encoded = name.encode("utf-8")
            buf.write(struct.pack("<H", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<B", tensor.data.ndim))
            for dim in tensor.data.shape:
                buf.write(struct.pack("<I", dim))
            buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    """Read a checkpoint, validating magic, names and shapes against its config."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    view = io.BytesIO(blob)

    def take(n: int) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"truncated checkpoint {path}")
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", take(4))
    cfg = _parse_header(take(header_len))
    expected = param_shapes(cfg)
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        if name not in expected:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {shape}, expected {expected[name]}"
            )
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        dtype = ad.get_default_dtype()
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing}")
    return cfg, ModelParams(tensors)
