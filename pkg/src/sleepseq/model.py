"""The sleep stage scoring network.

Two 1-D CNN branches per 30-s epoch (short filters for waveform shape,
long filters for frequency content), a bidirectional LSTM encoder over the
epoch sequence, and an attention decoder that emits one stage per epoch.
The decoder consumes the previous stage symbol (teacher-forced from the
target sequence during training, its own greedy prediction at inference),
attends over all encoder states, and projects to stage-plus-EOD logits.

Every trainable array lives in ``params`` under a unique dotted name;
bias names end in ``.b`` so the L2 penalty can skip them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .pipeline import EOD, N_CLASSES, N_DECODER_OUTPUTS, N_DECODER_SYMBOLS, SOD

logger = logging.getLogger(__name__)


@dataclass
class ConvSpec:
    filters: int
    width: int
    stride: int = 1
    padding: int = 0


@dataclass
class BranchConfig:
    convs: list[ConvSpec]
    pool_first: tuple[int, int]  # (window, stride) after the first conv
    pool_last: tuple[int, int]  # after the last conv


def _small_branch() -> BranchConfig:
    return BranchConfig(
        convs=[ConvSpec(64, 50, 6, 0), ConvSpec(128, 8, 1, 4),
               ConvSpec(128, 8, 1, 4), ConvSpec(128, 8, 1, 4)],
        pool_first=(8, 8),
        pool_last=(4, 4),
    )


def _large_branch() -> BranchConfig:
    return BranchConfig(
        convs=[ConvSpec(64, 400, 50, 0), ConvSpec(128, 6, 1, 3),
               ConvSpec(128, 6, 1, 3), ConvSpec(128, 6, 1, 3)],
        pool_first=(4, 4),
        pool_last=(2, 2),
    )


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Branch filter sizes default to the inherited prior CNN layout (not
    fixed by the training recipe itself); encoder/decoder widths and the
    dropout rate are explicit guesses, all overridable.
    """

    epoch_samples: int = 3000
    small: BranchConfig = field(default_factory=_small_branch)
    large: BranchConfig = field(default_factory=_large_branch)
    dropout: float = 0.5
    encoder_hidden: int = 128
    encoder_output: int = 128
    decoder_hidden: int = 128
    attention_dim: int = 64
    maxtime: int = 10
    n_classes: int = N_CLASSES

    @classmethod
    def tiny(cls, epoch_samples: int = 64, maxtime: int = 3) -> "ModelConfig":
        """Reduced configuration for gradient checks and fast tests."""
        return cls(
            epoch_samples=epoch_samples,
            small=BranchConfig(convs=[ConvSpec(2, 5, 3, 0), ConvSpec(3, 3, 1, 1)],
                               pool_first=(2, 2), pool_last=(2, 2)),
            large=BranchConfig(convs=[ConvSpec(2, 16, 8, 0), ConvSpec(3, 3, 1, 1)],
                               pool_first=(2, 2), pool_last=(2, 2)),
            dropout=0.5,
            encoder_hidden=8,
            encoder_output=8,
            decoder_hidden=8,
            attention_dim=6,
            maxtime=maxtime,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        def branch(d):
            return BranchConfig(
                convs=[ConvSpec(**c) for c in d["convs"]],
                pool_first=tuple(d["pool_first"]),
                pool_last=tuple(d["pool_last"]),
            )

        data = dict(data)
        for key in ("small", "large"):
            if key in data and isinstance(data[key], dict):
                data[key] = branch(data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class EncoderStates:
    """Per-timestep encoder outputs plus final states per direction."""

    outputs: list[Tensor]  # maxtime tensors of shape (batch, encoder_output)
    final_h: Tensor  # (batch, 2*encoder_hidden): [forward T; backward 1]
    final_c: Tensor

    @property
    def n(self) -> int:
        return len(self.outputs)


@dataclass
class AttentionRecord:
    """Attention weights and context captured at one decode step."""

    weights: np.ndarray  # (batch, n) rows summing to 1
    context: np.ndarray  # (batch, encoder_output)


class SleepScorer:
    """CNN + BiLSTM encoder + attention decoder over epoch sequences."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._premature_eod = 0
        self._build()

    # -- parameter registration -------------------------------------------

    def _register(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = Tensor(np.ascontiguousarray(values.astype(self.dtype)), requires_grad=True)
        self.params[name] = t
        return t

    def _glorot(self, name: str, shape: tuple[int, ...]) -> Tensor:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        fan_out = shape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self._register(name, self._rng.uniform(-limit, limit, size=shape))

    def _zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._register(name, np.zeros(shape))

    def _lstm_params(self, prefix: str, in_dim: int, hidden: int) -> None:
        self._glorot(f"{prefix}.W", (in_dim, 4 * hidden))
        self._glorot(f"{prefix}.U", (hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget-gate bias starts open
        self._register(f"{prefix}.b", b)

    def _build(self) -> None:
        cfg = self.config
        for branch_name, branch in (("small", cfg.small), ("large", cfg.large)):
            in_ch = 1
            for i, conv in enumerate(branch.convs):
                self._glorot(f"cnn.{branch_name}.conv{i}.k", (conv.filters, in_ch, conv.width))
                self._zeros(f"cnn.{branch_name}.conv{i}.b", (conv.filters, 1))
                in_ch = conv.filters

        feat_dim = self.feature_dim()
        self._lstm_params("enc.fwd", feat_dim, cfg.encoder_hidden)
        self._lstm_params("enc.bwd", feat_dim, cfg.encoder_hidden)
        self._glorot("enc.out.U", (2 * cfg.encoder_hidden, cfg.encoder_output))
        self._zeros("enc.out.b", (cfg.encoder_output,))

        self._glorot("att.Wh", (cfg.decoder_hidden, cfg.attention_dim))
        self._glorot("att.We", (cfg.encoder_output, cfg.attention_dim))
        self._glorot("att.v", (cfg.attention_dim, 1))

        self._glorot("dec.embed", (N_DECODER_SYMBOLS, cfg.decoder_hidden))
        self._lstm_params("dec.lstm", cfg.decoder_hidden + cfg.encoder_output, cfg.decoder_hidden)
        self._glorot("dec.init_h.W", (2 * cfg.encoder_hidden, cfg.decoder_hidden))
        self._zeros("dec.init_h.b", (cfg.decoder_hidden,))
        self._glorot("dec.init_c.W", (2 * cfg.encoder_hidden, cfg.decoder_hidden))
        self._zeros("dec.init_c.b", (cfg.decoder_hidden,))
        self._glorot("dec.out.W", (cfg.decoder_hidden, N_DECODER_OUTPUTS))
        self._zeros("dec.out.b", (N_DECODER_OUTPUTS,))

    # -- shape bookkeeping -------------------------------------------------

    @staticmethod
    def _conv_len(length: int, width: int, stride: int, padding: int) -> int:
        out = (length + 2 * padding - width) // stride + 1
        if out < 1:
            raise ValueError(f"layer output collapses: length {length}, width {width}")
        return out

    def _branch_dim(self, branch: BranchConfig) -> int:
        length = self.config.epoch_samples
        for i, conv in enumerate(branch.convs):
            length = self._conv_len(length, conv.width, conv.stride, conv.padding)
            if i == 0:
                length = self._conv_len(length, branch.pool_first[0], branch.pool_first[1], 0)
        length = self._conv_len(length, branch.pool_last[0], branch.pool_last[1], 0)
        return branch.convs[-1].filters * length

    def feature_dim(self) -> int:
        return self._branch_dim(self.config.small) + self._branch_dim(self.config.large)

    # -- forward pieces ------------------------------------------------------

    def _run_branch(self, x: Tensor, branch_name: str, branch: BranchConfig,
                    training: bool, rng) -> Tensor:
        out = x
        for i, conv in enumerate(branch.convs):
            k = self.params[f"cnn.{branch_name}.conv{i}.k"]
            b = self.params[f"cnn.{branch_name}.conv{i}.b"]
            out = ad.relu(ad.conv1d(out, k, stride=conv.stride, padding=conv.padding) + b)
            if i == 0:
                out = ad.maxpool1d(out, *branch.pool_first)
                out = ad.dropout(out, self.config.dropout, training, rng)
        out = ad.maxpool1d(out, *branch.pool_last)
        out = ad.dropout(out, self.config.dropout, training, rng)
        batch = out.shape[0]
        return ad.reshape(out, (batch, -1))

    def cnn_features(self, epochs, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Feature vectors for a batch of epochs: (batch, samples) -> (batch, D)."""
        x = epochs if isinstance(epochs, Tensor) else Tensor(np.asarray(epochs, dtype=self.dtype))
        if x.values.ndim == 2:
            x = ad.reshape(x, (x.shape[0], 1, x.shape[1]))
        if x.shape[2] != self.config.epoch_samples:
            raise ValueError(f"epochs have {x.shape[2]} samples, expected {self.config.epoch_samples}")
        small = self._run_branch(x, "small", self.config.small, training, rng)
        large = self._run_branch(x, "large", self.config.large, training, rng)
        feats = ad.concat([small, large], axis=1)
        return ad.dropout(feats, self.config.dropout, training, rng)

    def _lstm_sequence(self, prefix: str, inputs: list[Tensor]):
        hidden = self.config.encoder_hidden
        batch = inputs[0].shape[0]
        h = Tensor(np.zeros((batch, hidden), dtype=self.dtype))
        c = Tensor(np.zeros((batch, hidden), dtype=self.dtype))
        outs = []
        for x in inputs:
            h, c = ad.lstm_cell(x, h, c,
                                self.params[f"{prefix}.W"],
                                self.params[f"{prefix}.U"],
                                self.params[f"{prefix}.b"])
            outs.append(h)
        return outs, h, c

    def birnn_encode(self, features: list[Tensor]) -> EncoderStates:
        """Run the bidirectional encoder over per-timestep feature batches.

        Forward pass over t = 1..T, backward pass over t = T..1; per-step
        output is a linear map of the concatenated direction states.
        """
        if not features:
            raise ValueError("cannot encode an empty sequence")
        fwd_outs, fwd_h, fwd_c = self._lstm_sequence("enc.fwd", features)
        bwd_outs_rev, bwd_h, bwd_c = self._lstm_sequence("enc.bwd", features[::-1])
        bwd_outs = bwd_outs_rev[::-1]

        U = self.params["enc.out.U"]
        b = self.params["enc.out.b"]
        outputs = [ad.concat([hf, hb], axis=1) @ U + b for hf, hb in zip(fwd_outs, bwd_outs)]
        return EncoderStates(
            outputs=outputs,
            final_h=ad.concat([fwd_h, bwd_h], axis=1),
            final_c=ad.concat([fwd_c, bwd_c], axis=1),
        )

    def attend(self, h_prev: Tensor, states: EncoderStates) -> tuple[Tensor, Tensor]:
        """Additive attention: score_i = v . tanh(Wh h_prev + We e_i).

        Returns (weights (batch, n), context (batch, encoder_output)).  The
        simplex invariant on the weights is checked on every call.
        """
        if states.n == 0:
            raise ValueError("no encoder states to attend over")
        Wh, We, v = self.params["att.Wh"], self.params["att.We"], self.params["att.v"]
        query = h_prev @ Wh
        scores = [ad.tanh(query + (e @ We)) @ v for e in states.outputs]  # each (batch, 1)
        alpha = ad.softmax(ad.concat(scores, axis=1), axis=1)

        aw = alpha.values
        if not np.all(np.isfinite(aw)) or aw.min() < 0 or np.abs(aw.sum(axis=1) - 1.0).max() > 1e-6:
            raise NumericError("attention weights violate the simplex invariant")

        context = None
        for i, e in enumerate(states.outputs):
            term = ad.narrow(alpha, 1, i, 1) * e
            context = term if context is None else context + term
        return alpha, context

    def _decoder_init(self, states: EncoderStates) -> tuple[Tensor, Tensor]:
        h = ad.tanh(states.final_h @ self.params["dec.init_h.W"] + self.params["dec.init_h.b"])
        c = ad.tanh(states.final_c @ self.params["dec.init_c.W"] + self.params["dec.init_c.b"])
        return h, c

    def _decode_step(self, symbol_ids: np.ndarray, h: Tensor, c: Tensor,
                     states: EncoderStates):
        emb = ad.embedding(self.params["dec.embed"], symbol_ids)
        alpha, context = self.attend(h, states)
        x = ad.concat([emb, context], axis=1)
        h, c = ad.lstm_cell(x, h, c, self.params["dec.lstm.W"],
                            self.params["dec.lstm.U"], self.params["dec.lstm.b"])
        logits = h @ self.params["dec.out.W"] + self.params["dec.out.b"]
        record = AttentionRecord(weights=alpha.values.copy(), context=context.values.copy())
        return logits, h, c, record

    def decode_teacher_forced(self, states: EncoderStates, symbols: np.ndarray
                              ) -> tuple[list[Tensor], list[AttentionRecord]]:
        """Decode with the given symbol stream as inputs (training mode).

        ``symbols`` is (batch, steps) starting with SOD; one logit row of
        size n_classes+1 comes back per step.  Passing [SOD, l_1..l_T]
        yields T+1 steps so the final step is scored against EOD.
        """
        symbols = np.asarray(symbols)
        if symbols.ndim != 2:
            raise ValueError("symbols must be (batch, steps)")
        if not np.all(symbols[:, 0] == SOD):
            raise ValueError("decoder input must begin with the SOD symbol")
        if symbols.min() < 0 or symbols.max() >= N_DECODER_SYMBOLS:
            raise ValueError("decoder input symbol out of vocabulary")
        h, c = self._decoder_init(states)
        logits_seq, records = [], []
        for t in range(symbols.shape[1]):
            logits, h, c, record = self._decode_step(symbols[:, t], h, c, states)
            logits_seq.append(logits)
            records.append(record)
        return logits_seq, records

    def decode_inference(self, states: EncoderStates
                         ) -> tuple[np.ndarray, list[AttentionRecord]]:
        """Greedy decoding: each predicted stage feeds the next step.

        Runs exactly maxtime steps so every epoch gets a label.  If EOD is
        the argmax before the end, the best stage class is emitted instead
        and a counter is bumped.  Ties resolve to the lowest class index.
        """
        batch = states.outputs[0].shape[0]
        steps = states.n
        h, c = self._decoder_init(states)
        symbols = np.full(batch, SOD, dtype=np.int64)
        labels = np.zeros((batch, steps), dtype=np.int64)
        records = []
        for t in range(steps):
            logits, h, c, record = self._decode_step(symbols, h, c, states)
            records.append(record)
            probs = ad.softmax(logits, axis=1).values
            pick = probs.argmax(axis=1)
            premature = pick == EOD
            if premature.any():
                self._premature_eod += int(premature.sum())
                pick[premature] = probs[premature, :N_CLASSES].argmax(axis=1)
            labels[:, t] = pick
            symbols = pick
        return labels, records

    @property
    def premature_eod_count(self) -> int:
        return self._premature_eod

    def forward_sequences(self, x: np.ndarray, symbols: np.ndarray,
                          training: bool = False, rng: np.random.Generator | None = None
                          ) -> tuple[list[Tensor], list[AttentionRecord]]:
        """cnn -> encode -> teacher-forced decode for (batch, T, samples)."""
        states = self.encode_epochs(x, training=training, rng=rng)
        return self.decode_teacher_forced(states, symbols)

    def encode_epochs(self, x: np.ndarray, training: bool = False,
                      rng: np.random.Generator | None = None) -> EncoderStates:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3:
            raise ValueError("expected (batch, maxtime, samples)")
        batch, steps, samples = x.shape
        # time-major packing so each timestep is a contiguous row block
        flat = x.transpose(1, 0, 2).reshape(batch * steps, samples)
        feats = self.cnn_features(flat, training=training, rng=rng)
        per_step = [ad.narrow(feats, 0, t * batch, batch) for t in range(steps)]
        return self.birnn_encode(per_step)
