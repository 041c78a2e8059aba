"""Weight-shared pairwise similarity classifier and its regularized cross-entropy loss.

The output ``p`` is a *similarity*: values near 1 mean the two images are
judged to belong to the same class.
"""

from __future__ import annotations

import logging

import numpy as np

from . import nn
from .errors import EmptySetError, ShapeError

log = logging.getLogger(__name__)

EPS = 1e-7
POLARITY = "similarity"


def head_stack(embed_dim, rng, hidden=32):
    return nn.LayerStack(
        (embed_dim,),
        [nn.Dense(embed_dim, hidden, rng=rng), nn.ReLU(), nn.Dense(hidden, 1, rng=rng), nn.Sigmoid()],
    )


class SiameseModel:
    """One encoder applied to both inputs, ``|e1 - e2|`` merge, dense head to a sigmoid."""

    def __init__(self, encoder, head, l2_lambda=1e-4):
        if encoder.output_shape != head.input_shape:
            raise ShapeError(f"encoder output {encoder.output_shape} does not feed head {head.input_shape}")
        self.encoder = encoder
        self.head = head
        self.l2_lambda = float(l2_lambda)

    @classmethod
    def create(cls, input_hw, seed=0, l2_lambda=1e-4):
        rng = np.random.default_rng(seed)
        encoder = nn.encoder_stack(input_hw, rng)
        return cls(encoder, head_stack(encoder.output_shape[0], rng), l2_lambda)

    @property
    def input_hw(self):
        return self.encoder.input_shape[1:]

    @property
    def branches(self):
        """The two towers; both are the same object, so weights are shared by construction."""
        return self.encoder, self.encoder

    @property
    def stacks(self):
        return {"encoder": self.encoder, "head": self.head}

    def l2_norm_sq(self):
        return self.encoder.l2_norm_sq() + self.head.l2_norm_sq()

    # ------------------------------------------------------------ inference

    def as_batch(self, images):
        hw = self.input_hw
        arrs = []
        for img in images:
            px = img.pixels if hasattr(img, "pixels") else np.asarray(img)
            if px.shape != hw:
                raise ShapeError(f"image {getattr(img, 'id', '?')} is {px.shape}, model expects {hw}")
            arrs.append(px)
        return np.stack(arrs)[:, None, :, :]

    def embed(self, images, chunk=512):
        """Encoder outputs for a list of images, ``(n, embed_dim)``."""
        x = self.as_batch(images)
        return np.concatenate([self.encoder.predict(x[i : i + chunk]) for i in range(0, len(x), chunk)])

    def similarity_from_embeddings(self, e1, e2):
        """``p`` for each aligned row of two ``(n, d)`` embedding arrays."""
        return self.head.predict(np.abs(e1 - e2))[:, 0]

    def similarity_table(self, rows, cols):
        """``table[i, j] = p(rows[i], cols[j])`` given embeddings."""
        n, m = len(rows), len(cols)
        diff = np.abs(rows[:, None, :] - cols[None, :, :]).reshape(n * m, -1)
        return self.head.predict(diff)[:, 0].reshape(n, m)

    def forward_pair(self, a, b):
        # embed separately: a row's result must not depend on its batch position
        ea, eb = self.embed([a]), self.embed([b])
        return float(self.similarity_from_embeddings(ea, eb)[0])

    # ------------------------------------------------------------- training

    def batch_loss(self, first, second, y):
        """Mean loss over a batch plus gradients of the data term.

        ``first``/``second`` are arrays ``(B, 1, H, W)``.  The returned loss
        includes ``lambda * ||w||^2``; the gradients cover only the
        cross-entropy part because :func:`nn.sgd_step` adds ``2*lambda*w``.
        """
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        bsz = len(y)
        if bsz == 0:
            raise EmptySetError("empty batch")
        e = self.encoder.forward(np.concatenate([first, second]))
        e1, e2 = e[:bsz], e[bsz:]
        d = e1 - e2
        p = self.head.forward(np.abs(d))[:, 0]
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("non-finite activation in forward pass")
        pc = np.clip(p, EPS, 1.0 - EPS)
        ce = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
        loss = float(ce.mean()) + self.l2_lambda * self.l2_norm_sq()

        inside = (p > EPS) & (p < 1.0 - EPS)
        dp = np.where(inside, -(y / pc - (1.0 - y) / (1.0 - pc)), 0.0) / bsz
        d_abs, head_grads = self.head.backward(dp[:, None])
        de1 = d_abs * np.sign(d)
        _, enc_grads = self.encoder.backward(np.concatenate([de1, -de1]))
        return loss, {"encoder": enc_grads, "head": head_grads}, p

    def pair_loss(self, pair):
        x = self.as_batch([pair.first, pair.second])
        loss, grads, _ = self.batch_loss(x[:1], x[1:], [pair.y])
        return loss, grads

    def apply_gradients(self, grads, cfg):
        nn.sgd_step(self.encoder, grads["encoder"], cfg)
        nn.sgd_step(self.head, grads["head"], cfg)

    def train_minibatch(self, pairs, cfg):
        """One SGD step on the mean gradient of ``pairs``; returns the pre-step mean loss."""
        if not pairs:
            raise EmptySetError("empty minibatch")
        if len(pairs) != cfg.batch_size:
            log.debug("ragged minibatch of %d (batch_size %d)", len(pairs), cfg.batch_size)
        first = self.as_batch([p.first for p in pairs])
        second = self.as_batch([p.second for p in pairs])
        loss, grads, _ = self.batch_loss(first, second, [p.y for p in pairs])
        self.apply_gradients(grads, cfg)
        return self, loss

    # ---------------------------------------------------------- persistence

    def save(self, path, sgd=None, meta=None):
        meta = dict(meta or {})
        meta.update({"polarity": POLARITY, "input_hw": list(self.input_hw), "l2_lambda": self.l2_lambda})
        return nn.save_checkpoint(path, self.stacks, sgd, meta)

    @classmethod
    def load(cls, path):
        stacks, sgd, meta = nn.load_checkpoint(path)
        if meta.get("polarity") != POLARITY:
            raise ValueError(f"checkpoint polarity {meta.get('polarity')!r} is not {POLARITY!r}")
        return cls(stacks["encoder"], stacks["head"], meta["l2_lambda"]), sgd, meta


def forward_pair(model, a, b):
    return model.forward_pair(a, b)


def pair_loss(model, pair):
    return model.pair_loss(pair)


def train_minibatch(model, pairs, cfg):
    return model.train_minibatch(pairs, cfg)
