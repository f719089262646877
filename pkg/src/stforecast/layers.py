"""Building blocks: local CNN, masked (bi)LSTM, attention scorer and fusion layer."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numeric as nx
from .numeric import DimensionError, Param, Tensor

FORGET_BIAS = 1.0


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


class Module:
    """Minimal parameter container; subclasses list their children in ``_children``."""

    _children: tuple[str, ...] = ()
    _own: tuple[str, ...] = ()

    def parameters(self) -> list[Param]:
        out = [getattr(self, name) for name in self._own]
        for name in self._children:
            child = getattr(self, name)
            out.extend(child.parameters())
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


class LocalCnn(Module):
    """K same-padded conv + tanh stages, then an affine map of the flattened map to ``hidden``."""

    def __init__(self, patch_size: int, conv_layers: int, filters: int, hidden: int,
                 rng: np.random.Generator, kernel_size: int = 3, in_channels: int = 2,
                 name: str = "cnn"):
        if patch_size % 2 == 0:
            raise nx.ConfigurationError(f"patch size must be odd, got {patch_size}")
        if kernel_size % 2 == 0:
            raise nx.ConfigurationError(f"kernel size must be odd, got {kernel_size}")
        if conv_layers < 1:
            raise nx.ConfigurationError("local CNN needs at least one conv layer")
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernels: list[Param] = []
        self.biases: list[Param] = []
        cin = in_channels
        k = kernel_size
        for stage in range(conv_layers):
            self.kernels.append(Param(
                glorot(rng, (k, k, cin, filters), k * k * cin, k * k * filters),
                f"{name}.conv{stage}.kernel",
            ))
            self.biases.append(Param(np.zeros(filters), f"{name}.conv{stage}.bias"))
            cin = filters
        flat = patch_size * patch_size * filters
        self.proj_weight = Param(glorot(rng, (hidden, flat), flat, hidden), f"{name}.proj.weight")
        self.proj_bias = Param(np.zeros(hidden), f"{name}.proj.bias")

    def parameters(self) -> list[Param]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out += [k, b]
        return out + [self.proj_weight, self.proj_bias]

    def __call__(self, patches) -> Tensor:
        """Encode patches of shape [..., S, S, C] into features [..., hidden]."""
        x = nx.as_tensor(patches)
        s, c = self.patch_size, self.in_channels
        if x.ndim < 3 or x.shape[-3:] != (s, s, c):
            raise DimensionError(f"local CNN expects patches [..., {s}, {s}, {c}], got {x.shape}")
        lead = x.shape[:-3]
        h = x.reshape((-1, s, s, c))
        for kernel, bias in zip(self.kernels, self.biases):
            h = nx.tanh(nx.conv2d_same(h, kernel, bias))
        h = h.reshape((h.shape[0], -1))
        out = nx.linear(h, self.proj_weight, self.proj_bias)
        return out.reshape(lead + (self.hidden,))


def local_cnn_forward(cnn: LocalCnn, patch) -> Tensor:
    return cnn(patch)


class LstmCell(Module):
    """Standard LSTM cell (input, forget, output gates and tanh candidate)."""

    _own = ("w_input", "w_hidden", "bias")

    def __init__(self, input_size: int, hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.input_size = input_size
        self.hidden = hidden
        d = hidden
        self.w_input = Param(glorot(rng, (input_size, 4 * d), input_size, 4 * d), f"{name}.w_input")
        self.w_hidden = Param(glorot(rng, (d, 4 * d), d, 4 * d), f"{name}.w_hidden")
        bias = np.zeros(4 * d)
        bias[d:2 * d] = FORGET_BIAS
        self.bias = Param(bias, f"{name}.bias")

    def step(self, x, hc, valid=None) -> Tensor:
        """Batched step on the packed state ``[h ; c]``."""
        return nx.lstm_cell(x, hc, self.w_input, self.w_hidden, self.bias, valid)

    def zero_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, 2 * self.hidden)))


def lstm_step(cell: LstmCell, x, h_prev, c_prev, valid=True) -> tuple[Tensor, Tensor]:
    """One step; an invalid step returns ``(h_prev, c_prev)`` untouched.

    Accepts unbatched vectors ([p], [d], [d]) or batches ([B, p], ...);
    ``valid`` is a flag or a per-row bool array.
    """
    x, h_prev, c_prev = nx.as_tensor(x), nx.as_tensor(h_prev), nx.as_tensor(c_prev)
    if np.isscalar(valid) or np.ndim(valid) == 0:
        if not bool(valid):
            return h_prev, c_prev
        valid = None
    single = x.ndim == 1
    if single:
        x, h_prev, c_prev = x.reshape((1, -1)), h_prev.reshape((1, -1)), c_prev.reshape((1, -1))
    hc = cell.step(x, nx.concat([h_prev, c_prev], axis=-1), valid)
    d = cell.hidden
    h, c = hc[:, :d], hc[:, d:]
    if single:
        h, c = h.reshape((d,)), c.reshape((d,))
    return h, c


class BdLstm(Module):
    """Forward and backward LSTMs with independent weights over one sequence."""

    _children = ("forward_cell", "backward_cell")

    def __init__(self, input_size: int, hidden: int, rng: np.random.Generator, name: str = "bdlstm"):
        self.input_size = input_size
        self.hidden = hidden
        self.forward_cell = LstmCell(input_size, hidden, rng, f"{name}.fwd")
        self.backward_cell = LstmCell(input_size, hidden, rng, f"{name}.bwd")

    def __call__(self, xs, valid=None) -> tuple[Tensor, Tensor]:
        """Run both directions over ``xs`` [B, L, p].

        Args:
            xs: input sequence batch.
            valid: bool [B, L]; invalid steps carry the previous state.

        Returns:
            (outputs [B, L, 2d], final [B, 2d]) where ``final`` joins the
            forward state after the last step with the backward state after
            the first step.
        """
        xs = nx.as_tensor(xs)
        if xs.ndim != 3 or xs.shape[1] == 0:
            raise DimensionError(f"BDLSTM expects a non-empty [B, L, p] sequence, got {xs.shape}")
        if xs.shape[2] != self.input_size:
            raise DimensionError(f"BDLSTM input size {self.input_size}, got features {xs.shape[2]}")
        batch, length, _ = xs.shape
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != (batch, length):
                raise DimensionError(f"valid mask {valid.shape} does not match sequence {(batch, length)}")
            if valid.all():
                valid = None
        d = self.hidden
        steps = [xs[:, t] for t in range(length)]

        def run(cell: LstmCell, order) -> list[Tensor]:
            hc = cell.zero_state(batch)
            hs: list[Tensor | None] = [None] * length
            for t in order:
                hc = cell.step(steps[t], hc, None if valid is None else valid[:, t])
                hs[t] = hc[:, :d]
            return hs

        fwd = run(self.forward_cell, range(length))
        bwd = run(self.backward_cell, range(length - 1, -1, -1))
        outputs = nx.concat([nx.stack(fwd, axis=1), nx.stack(bwd, axis=1)], axis=-1)
        final = nx.concat([fwd[-1], bwd[0]], axis=-1)
        return outputs, final


def bdlstm_forward(layer: BdLstm, xs: Sequence, valids: Sequence[bool] | None = None) -> list[Tensor]:
    """Per-step [2d] outputs for one unbatched sequence of [p] vectors."""
    if len(xs) == 0:
        raise ValueError("bdlstm_forward: empty sequence")
    seq = nx.stack([nx.as_tensor(x) for x in xs], axis=0).reshape((1, len(xs), -1))
    mask = None if valids is None else np.asarray(valids, dtype=bool).reshape(1, -1)
    if mask is not None and mask.shape[1] != len(xs):
        raise ValueError(f"bdlstm_forward: {len(xs)} inputs but {mask.shape[1]} validity flags")
    outputs, _ = layer(seq, mask)
    return [outputs[0, t] for t in range(len(xs))]


class AttentionScorer(Module):
    """``V . tanh(W_gamma x_cand + W_beta x_ctx + b_beta)``; one instance per branch."""

    _own = ("w_gamma", "w_beta", "b_beta", "v")

    def __init__(self, candidate_size: int, context_size: int, attn_size: int,
                 rng: np.random.Generator, name: str = "attn"):
        self.candidate_size = candidate_size
        self.context_size = context_size
        self.w_gamma = Param(glorot(rng, (attn_size, candidate_size), candidate_size, attn_size),
                             f"{name}.w_gamma")
        self.w_beta = Param(glorot(rng, (attn_size, context_size), context_size, attn_size),
                            f"{name}.w_beta")
        self.b_beta = Param(np.zeros(attn_size), f"{name}.b_beta")
        self.v = Param(glorot(rng, (attn_size,), attn_size, 1), f"{name}.v")

    def __call__(self, candidates, context) -> Tensor:
        """Score candidates [..., L, d_a] against one context [..., d_b] -> [..., L].

        Unbatched use (candidate [d_a], context [d_b]) returns a scalar tensor.
        """
        cand, ctx = nx.as_tensor(candidates), nx.as_tensor(context)
        if cand.shape[-1] != self.candidate_size or ctx.shape[-1] != self.context_size:
            raise DimensionError(
                f"attention score: candidate {cand.shape} / context {ctx.shape} do not match "
                f"scorer ({self.candidate_size}, {self.context_size})"
            )
        ctx_term = nx.linear(ctx, self.w_beta, self.b_beta)
        if cand.ndim == ctx.ndim + 1:
            ctx_term = ctx_term.reshape(ctx_term.shape[:-1] + (1, ctx_term.shape[-1]))
        hidden = nx.tanh(nx.linear(cand, self.w_gamma) + ctx_term)
        return nx.matmul(hidden, self.v)


def attention_score(scorer: AttentionScorer, candidate, context) -> Tensor:
    return scorer(candidate, context)


def attention_weights(scores) -> Tensor:
    """Softmax over the last axis (the window steps)."""
    s = nx.as_tensor(scores)
    if s.ndim == 0 or s.shape[-1] == 0:
        raise ValueError("attention_weights: need at least one score")
    if not np.all(np.isfinite(s.data)):
        raise nx.NumericError("attention_weights: scores must be finite")
    return nx.softmax(s, axis=-1)


def attention_pool(outputs, weights) -> Tensor:
    """Weighted sum over the step axis: outputs [..., L, D], weights [..., L] -> [..., D]."""
    x, w = nx.as_tensor(outputs), nx.as_tensor(weights)
    if x.ndim < 2 or x.shape[:-1] != w.shape:
        raise DimensionError(f"attention_pool: outputs {x.shape} and weights {w.shape} disagree")
    if not np.allclose(w.data.sum(axis=-1), 1.0, rtol=0.0, atol=1e-9):
        raise ValueError("attention_pool: weights must sum to 1")
    return nx.tsum(x * w.reshape(w.shape + (1,)), axis=-2)


class FusionLayer(Module):
    """``tanh(W_full [x_c ; external] + b_full)`` -> (start, end)."""

    _own = ("w_full", "b_full")

    def __init__(self, context_size: int, external_size: int, rng: np.random.Generator,
                 name: str = "fusion"):
        self.context_size = context_size
        self.external_size = external_size
        n_in = context_size + external_size
        self.w_full = Param(glorot(rng, (2, n_in), n_in, 2), f"{name}.w_full")
        self.b_full = Param(np.zeros(2), f"{name}.b_full")

    def __call__(self, x_c, external) -> Tensor:
        x_c, external = nx.as_tensor(x_c), nx.as_tensor(external)
        if x_c.shape[-1] != self.context_size or external.shape[-1] != self.external_size:
            raise DimensionError(
                f"fusion: got x_c {x_c.shape} and external {external.shape}, expected last dims "
                f"{self.context_size} and {self.external_size}"
            )
        return nx.tanh(nx.linear(nx.concat([x_c, external], axis=-1), self.w_full, self.b_full))


def fusion_forward(layer: FusionLayer, x_c, external) -> tuple[Tensor, Tensor]:
    out = layer(x_c, external)
    return out[..., 0], out[..., 1]
