"""Spatial-attention recognizer over aligned RoI features.

Encoder: stride-1 conv+BN+ReLU stack, then a GRU run down every column and a
second GRU run along every row. Decoder: a GRU whose input is the attention
context over the whole 2-D grid concatenated with the previous character's
embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .layers import ConvBNReLU, GRU, Linear, Module
from .roi import RoiBatch, RoiFeature
from .tensor import Tensor, concat, getitem, matmul, reshape, stack, transpose, where_mask

_MASKED = -1e9


class VocabularyError(ValueError):
    pass


class CharVocab:
    """Characters ``0..n-1`` then ``EOS = n``, ``START = n + 1``, ``PAD = n + 2``.

    Classifier outputs cover the characters plus EOS (``n + 1`` classes).
    """

    def __init__(self, chars: str):
        if len(set(chars)) != len(chars):
            raise VocabularyError("duplicate characters in vocabulary")
        if not chars:
            raise VocabularyError("empty vocabulary")
        self.chars = chars
        self.index = {c: i for i, c in enumerate(chars)}
        self.eos = len(chars)
        self.start = len(chars) + 1
        self.pad = len(chars) + 2

    @classmethod
    def from_file(cls, path: str | Path) -> "CharVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls("".join(line for line in lines if line))

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.chars) + "\n", encoding="utf-8")

    @property
    def num_classes(self) -> int:
        return len(self.chars) + 1

    @property
    def num_inputs(self) -> int:
        return len(self.chars) + 2

    def __len__(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> list[int]:
        out = []
        for ch in text.lower():
            if ch not in self.index:
                raise VocabularyError(f"character {ch!r} not in vocabulary")
            out.append(self.index[ch])
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.chars[i] for i in ids if 0 <= i < len(self.chars))


@dataclass
class EncodedFeatureMap:
    features: Tensor          # [R, h, W, c_H]
    mask: np.ndarray          # [R, h, W] valid positions


@dataclass
class AttentionTrace:
    weights: list = field(default_factory=list)   # per step: [h, W] map
    indices: list = field(default_factory=list)
    truncated: bool = False


class Recognizer(Module):
    def __init__(self, rng, in_channels: int, vocab: CharVocab, conv_width: int = 128, conv_layers: int = 4,
                 enc_hidden: int = 128, dec_hidden: int = 128, embed: int = 64, attn: int = 128,
                 bidirectional: bool = False, dtype=np.float32):
        self.vocab = vocab
        chans = [in_channels] + [conv_width] * conv_layers
        self.convs = [ConvBNReLU(rng, 3, a, b, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        self.bidirectional = bidirectional
        self.gru_v = GRU(rng, chans[-1], enc_hidden, dtype)
        self.gru_h = GRU(rng, enc_hidden * (2 if bidirectional else 1), enc_hidden, dtype)
        if bidirectional:
            self.gru_v_rev = GRU(rng, chans[-1], enc_hidden, dtype)
            self.gru_h_rev = GRU(rng, 2 * enc_hidden, enc_hidden, dtype)
        self.feat_dim = enc_hidden * (2 if bidirectional else 1)
        self.att_h = Linear(rng, self.feat_dim, attn, bias=False, dtype=dtype)
        self.att_g = Linear(rng, dec_hidden, attn, dtype=dtype)
        self.att_v = Linear(rng, attn, 1, bias=False, dtype=dtype)
        self.embedding = Tensor((rng.standard_normal((vocab.num_inputs, embed)) * 0.1).astype(dtype),
                                requires_grad=True)
        self.dec = GRU(rng, self.feat_dim + embed, dec_hidden, dtype)
        self.out = Linear(rng, dec_hidden, vocab.num_classes, dtype=dtype)
        self.dec_hidden = dec_hidden
        self.dtype = dtype

    # ------------------------------------------------------------ encoder
    def _run_gru(self, gru: GRU, seq: Tensor, reverse: bool = False) -> Tensor:
        """Run ``gru`` over axis 0 of ``seq [T, B, D]`` from a zero state."""
        t_len, b, _ = seq.shape
        gx = gru.project(seq)
        h = Tensor(np.zeros((b, gru.hidden), dtype=seq.dtype))
        outs = [None] * t_len
        order = range(t_len - 1, -1, -1) if reverse else range(t_len)
        for t in order:
            h = gru.step(getitem(gx, t), h)
            outs[t] = h
        return stack(outs, axis=0)

    def encode_batch(self, rois: RoiBatch) -> EncodedFeatureMap:
        x = rois.features
        r, h, w, _ = x.shape
        mask = np.ascontiguousarray(rois.mask)
        mfloat = mask[..., None].astype(x.dtype)
        for layer in self.convs:
            x = layer(x, mask) * mfloat
        c = x.shape[-1]
        # columns: sequence over rows i, batch over (roi, column)
        cols = reshape(transpose(x, (1, 0, 2, 3)), (h, r * w, c))
        v = self._run_gru(self.gru_v, cols)
        if self.bidirectional:
            v = concat([v, self._run_gru(self.gru_v_rev, cols, reverse=True)], axis=-1)
        b_map = transpose(reshape(v, (h, r, w, v.shape[-1])), (1, 0, 2, 3))
        # rows: sequence over columns j, batch over (roi, row)
        rows = reshape(transpose(b_map, (2, 0, 1, 3)), (w, r * h, b_map.shape[-1]))
        hseq = self._run_gru(self.gru_h, rows)
        if self.bidirectional:
            rev = self._reverse_rows(rows, rois.widths, h)
            back = self._reverse_rows(self._run_gru(self.gru_h_rev, rev), rois.widths, h)
            hseq = concat([hseq, back], axis=-1)
        hmap = transpose(reshape(hseq, (w, r, h, hseq.shape[-1])), (1, 2, 0, 3))
        return EncodedFeatureMap(hmap, mask)

    @staticmethod
    def _reverse_rows(seq: Tensor, widths: np.ndarray, h: int) -> Tensor:
        # reverse each row within its valid width; padding stays in place
        w = seq.shape[0]
        wid = np.repeat(widths, h)
        j = np.arange(w)[:, None]
        idx = np.where(j < wid[None, :], wid[None, :] - 1 - j, j)
        return getitem(seq, (idx, np.arange(seq.shape[1])[None, :]))

    def encode(self, roi: RoiFeature) -> EncodedFeatureMap:
        feats = roi.features
        batch = RoiBatch(reshape(feats, (1, *feats.shape)), np.array([feats.shape[1]]))
        return self.encode_batch(batch)

    # ------------------------------------------------------------ decoder
    def prepare_attention(self, enc: EncodedFeatureMap) -> tuple[Tensor, Tensor, np.ndarray]:
        r, h, w, c = enc.features.shape
        flat = reshape(enc.features, (r, h * w, c))
        proj = self.att_h(flat)
        return flat, proj, enc.mask.reshape(r, h * w)

    def attention_step(self, flat: Tensor, proj: Tensor, mask: np.ndarray, g_prev: Tensor) -> tuple[Tensor, Tensor]:
        """Context vector and attention weights for one decoding step.

        ``e_ij = v . tanh(W_H H_ij + W_g g_prev + b)``, softmax over all valid
        grid cells, context = weighted sum of ``H``.
        """
        r, l, _ = proj.shape
        q = self.att_g(g_prev)
        e = self.att_v((proj + reshape(q, (r, 1, q.shape[-1]))).tanh())
        e = where_mask(reshape(e, (r, l)), mask, _MASKED)
        alpha = F.softmax(e, axis=-1)
        ctx = reshape(matmul(reshape(alpha, (r, 1, l)), flat), (r, flat.shape[-1]))
        return ctx, alpha

    def decode_step(self, ctx: Tensor, y_prev: np.ndarray, g_prev: Tensor) -> tuple[Tensor, Tensor]:
        y_prev = np.asarray(y_prev, dtype=np.int64)
        if y_prev.min() < 0 or y_prev.max() >= self.vocab.num_inputs:
            raise VocabularyError(f"decoder input index out of range: {y_prev}")
        emb = getitem(self.embedding, y_prev)
        g = self.dec(concat([ctx, emb], axis=-1), g_prev)
        return self.out(g), g

    def initial_state(self, r: int) -> Tensor:
        return Tensor(np.zeros((r, self.dec_hidden), dtype=self.dtype))

    # -------------------------------------------------------------- losses
    def targets(self, transcripts: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Teacher-forcing inputs, targets (with EOS) and valid-step mask."""
        seqs = [self.vocab.encode(t) for t in transcripts]
        t_len = max(len(s) for s in seqs) + 1
        r = len(seqs)
        inputs = np.full((r, t_len), self.vocab.pad, dtype=np.int64)
        targets = np.zeros((r, t_len), dtype=np.int64)
        mask = np.zeros((r, t_len), dtype=np.float64)
        for k, s in enumerate(seqs):
            full = s + [self.vocab.eos]
            inputs[k, 0] = self.vocab.start
            inputs[k, 1:len(full)] = s
            inputs[k, len(full):] = self.vocab.start
            targets[k, :len(full)] = full
            mask[k, :len(full)] = 1.0
        return inputs, targets, mask

    def loss_batch(self, rois: RoiBatch, transcripts: Sequence[str]) -> Tensor:
        """Average negative log-likelihood over every valid (sample, step) pair."""
        if len(transcripts) == 0:
            return Tensor(np.zeros((), dtype=self.dtype))
        inputs, targets, mask = self.targets(transcripts)
        enc = self.encode_batch(rois)
        flat, proj, amask = self.prepare_attention(enc)
        r, t_len = inputs.shape
        g = self.initial_state(r)
        logits = []
        for t in range(t_len):
            ctx, _ = self.attention_step(flat, proj, amask, g)
            step_logits, g = self.decode_step(ctx, inputs[:, t], g)
            logits.append(step_logits)
        all_logits = reshape(stack(logits, axis=1), (r * t_len, self.vocab.num_classes))
        return F.cross_entropy(all_logits, targets.reshape(-1), mask.reshape(-1))

    def greedy_decode_batch(self, rois: RoiBatch, max_steps: int = 32) -> list[tuple[str, AttentionTrace]]:
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        r = rois.features.shape[0]
        if r == 0:
            return []
        enc = self.encode_batch(rois)
        flat, proj, amask = self.prepare_attention(enc)
        _, h, w, _ = enc.features.shape
        g = self.initial_state(r)
        y = np.full(r, self.vocab.start, dtype=np.int64)
        done = np.zeros(r, dtype=bool)
        traces = [AttentionTrace() for _ in range(r)]
        decoded: list[list[int]] = [[] for _ in range(r)]
        for _ in range(max_steps):
            ctx, alpha = self.attention_step(flat, proj, amask, g)
            logits, g = self.decode_step(ctx, y, g)
            y = np.argmax(logits.data, axis=-1)   # first maximum on ties
            for k in np.nonzero(~done)[0]:
                traces[k].weights.append(alpha.data[k].reshape(h, w)[:, :rois.widths[k]].copy())
                traces[k].indices.append(int(y[k]))
                if y[k] == self.vocab.eos:
                    done[k] = True
                else:
                    decoded[k].append(int(y[k]))
            if done.all():
                break
            y = np.where(y == self.vocab.eos, self.vocab.start, y)
        for k in range(r):
            traces[k].truncated = not done[k]
        return [(self.vocab.decode(d), tr) for d, tr in zip(decoded, traces)]

    def greedy_decode(self, roi: RoiFeature, max_steps: int = 32) -> tuple[str, AttentionTrace]:
        feats = roi.features
        batch = RoiBatch(reshape(feats, (1, *feats.shape)), np.array([feats.shape[1]]))
        return self.greedy_decode_batch(batch, max_steps)[0]
