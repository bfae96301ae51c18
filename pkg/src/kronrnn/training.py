"""Losses, optimizers, schedules, and BPTT over a full sequence.

Parameters and gradients travel as flat dicts whose values are ndarrays
or lists of ndarrays (Kronecker factors).  Optimizers update the real and
imaginary halves of complex parameters independently, viewing each
complex array as interleaved float64 pairs, which matches the split-real
gradient packing produced by the cells.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeMismatchError


# -- parameter trees -------------------------------------------------------

def tree_leaves(tree):
    """Yield (name, array) in insertion order; list values get '.i' suffixes."""
    for key, value in tree.items():
        if isinstance(value, list):
            for i, arr in enumerate(value):
                yield f"{key}.{i}", arr
        else:
            yield key, value


def tree_map(fn, tree):
    out = {}
    for key, value in tree.items():
        if isinstance(value, list):
            out[key] = [fn(a) for a in value]
        else:
            out[key] = fn(value)
    return out


def zeros_like_tree(tree):
    return tree_map(np.zeros_like, tree)


def tree_add_(accum, other, scale=1.0):
    """accum += scale * other for the keys present in ``other`` (in place)."""
    for key, value in other.items():
        if isinstance(value, list):
            for a, b in zip(accum[key], value):
                a += scale * b
        else:
            accum[key] += scale * value
    return accum


def global_grad_norm(grads):
    total = 0.0
    for _, g in tree_leaves(grads):
        total += float(np.sum(np.abs(g) ** 2))
    return float(np.sqrt(total))


def clip_gradients(grads, threshold):
    """Global-norm rescaling; identity when already inside the ball."""
    if threshold <= 0:
        raise ValueError(f"clip threshold must be > 0, got {threshold}")
    norm = global_grad_norm(grads)
    if norm <= threshold:
        return grads
    return tree_map(lambda g: g * (threshold / norm), grads)


def _real_view(arr):
    if np.iscomplexobj(arr):
        return arr.view(np.float64)
    return arr


# -- losses ----------------------------------------------------------------

def cross_entropy(logits, target_class):
    """Softmax cross-entropy in nats.

    Accepts a single logit vector with an integer target, or a (B, C)
    batch with a (B,) target vector.  Returns per-example loss and the
    unscaled gradient softmax(logits) - onehot(target).
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    lg = logits[None, :] if single else logits
    targets = np.atleast_1d(np.asarray(target_class, dtype=np.int64))
    shifted = lg - lg.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    rows = np.arange(lg.shape[0])
    logz = np.log(expd.sum(axis=1))
    loss = logz - shifted[rows, targets]
    dlogits = probs.copy()
    dlogits[rows, targets] -= 1.0
    if single:
        return float(loss[0]), dlogits[0]
    return loss, dlogits


def mse(pred, target):
    """Mean squared error and its gradient."""
    pred = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"mse: prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff ** 2))
    dpred = 2.0 * diff / diff.size
    return loss, dpred


# -- optimizers --------------------------------------------------------------

class RmsProp:
    """v <- rho v + (1-rho) g^2;  theta <- theta - lr g / (sqrt(v) + eps)."""

    def __init__(self, params, learning_rate=1e-3, decay=0.9, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.decay = decay
        self.epsilon = epsilon
        self.step_count = 0
        self._v = {name: np.zeros_like(_real_view(arr))
                   for name, arr in tree_leaves(params)}

    def step(self, params, grads):
        self.step_count += 1
        gmap = dict(tree_leaves(grads))
        for name, arr in tree_leaves(params):
            g = _real_view(gmap[name])
            v = self._v[name]
            v *= self.decay
            v += (1.0 - self.decay) * g * g
            _real_view(arr)[...] -= self.learning_rate * g / (np.sqrt(v) + self.epsilon)


class Adam:
    """Bias-corrected Adam with the usual (0.9, 0.999) betas."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._m = {name: np.zeros_like(_real_view(arr))
                   for name, arr in tree_leaves(params)}
        self._v = {name: np.zeros_like(_real_view(arr))
                   for name, arr in tree_leaves(params)}

    def step(self, params, grads):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        gmap = dict(tree_leaves(grads))
        for name, arr in tree_leaves(params):
            g = _real_view(gmap[name])
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            _real_view(arr)[...] -= self.learning_rate * update


def make_optimizer(params, kind, learning_rate, decay=0.9, beta1=0.9,
                   beta2=0.999, epsilon=1e-8):
    if kind == "rmsprop":
        return RmsProp(params, learning_rate, decay, epsilon)
    if kind == "adam":
        return Adam(params, learning_rate, beta1, beta2, epsilon)
    raise ValueError(f"unknown optimizer {kind!r}")


def plateau_decay(metric_history, learning_rate, decay_factor=0.3):
    """Multiply the rate by ``decay_factor`` when the latest metric fails to
    improve on the best seen before it (lower is better)."""
    if len(metric_history) < 2:
        return learning_rate
    best_before = min(metric_history[:-1])
    if metric_history[-1] >= best_before:
        return learning_rate * decay_factor
    return learning_rate


# -- BPTT --------------------------------------------------------------------

@dataclass
class BpttResult:
    loss: float            # task loss + penalty
    task_loss: float
    penalty: float
    grads: dict
    logits: np.ndarray     # (B, T, M), useful for metrics
    final_state: tuple     # (h,) or (h, c) for window carryover
    gradient_trace: np.ndarray  # per-step ||dL/dh_t||, or None


def masked_loss_and_grad(batch, logits):
    """Average loss over unmasked positions and matching dL/dlogits.

    A window with no masked positions (possible under truncated BPTT)
    contributes zero loss and zero gradient.
    """
    mask = batch.loss_mask
    if batch.loss_kind == "ce":
        b, t, m = logits.shape
        flat_mask = mask.reshape(b * t)
        sel = np.nonzero(flat_mask)[0]
        glogits = np.zeros((b * t, m))
        if sel.size == 0:
            return 0.0, glogits.reshape(b, t, m)
        lg = logits.reshape(b * t, m)[sel]
        tg = batch.targets.reshape(b * t)[sel]
        losses, dsel = cross_entropy(lg, tg)
        glogits[sel] = dsel / sel.size
        return float(losses.sum() / sel.size), glogits.reshape(b, t, m)
    if batch.loss_kind == "mse":
        b, t, m = logits.shape
        if m != 1:
            raise ShapeMismatchError("mse tasks require a single output unit")
        rows, cols = np.nonzero(mask)
        glogits = np.zeros_like(logits)
        if rows.size == 0:
            return 0.0, glogits
        preds = logits[rows, cols, 0]
        loss, dpred = mse(preds, batch.targets[rows])
        glogits[rows, cols, 0] = dpred
        return loss, glogits
    raise ValueError(f"unknown loss kind {batch.loss_kind!r}")


def bptt_loss_and_grads(cell, params, batch, unitary_amplitude=0.0,
                        h0=None, c0=None, record_trace=False,
                        penalty_override=False):
    """Forward the whole batch, reverse-accumulate every gradient.

    The soft unitary penalty (scaled by ``unitary_amplitude``) is added to
    the loss and its gradient merged into the recurrent factors, except
    for gated cells unless ``penalty_override`` is set.
    """
    if cell.has_cell_state:
        cache = cell.forward_sequence(params, batch.inputs, h0, c0)
        final_state = (cache.final_h.copy(), cache.final_c.copy())
    else:
        cache = cell.forward_sequence(params, batch.inputs, h0)
        final_state = (cache.final_h.copy(),)
    logits = cell.output_sequence(params, cache)
    task_loss, glogits = masked_loss_and_grad(batch, logits)
    if not np.isfinite(task_loss):
        raise DivergenceError(f"non-finite task loss {task_loss}",
                              diagnostics={"task_loss": float(task_loss)})
    grads, _, trace = cell.backward_sequence(params, cache, glogits,
                                             record_trace=record_trace)
    penalty = 0.0
    if unitary_amplitude > 0.0 and (cell.penalty_allowed or penalty_override):
        penalty, pgrads = cell.recurrent_penalty(params, unitary_amplitude)
        tree_add_(grads, pgrads)
    loss = task_loss + penalty
    if not np.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss {loss}",
            diagnostics={"task_loss": float(task_loss), "penalty": float(penalty)})
    return BpttResult(loss=loss, task_loss=task_loss, penalty=penalty,
                      grads=grads, logits=logits, final_state=final_state,
                      gradient_trace=trace)


def zero_recurrent_grads(cell, grads):
    """Discard recurrent-operator gradients (frozen-recurrence mode)."""
    for name in cell.recurrent_param_names:
        g = grads[name]
        if isinstance(g, list):
            for a in g:
                a[...] = 0.0
        else:
            g[...] = 0.0
    return grads
