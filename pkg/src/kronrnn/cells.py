"""Recurrent cells with explicit reverse-mode steps.

Two cell families cover the four model variants:

* ``RecurrentCell`` -- h_t = act(W h_{t-1} + U x_t + b).  Real cells use
  tanh, complex cells use modrelu with a learnable per-unit real bias;
  both also accept an identity activation for gradient-flow diagnostics.
* ``LstmCell`` -- the standard gated cell (forget/input/output gates plus
  a candidate), real-valued.

In either family the recurrent operator(s) may be a dense (N x N) matrix
or a ``KroneckerMatrix``; everything else is agnostic to that choice.
Inputs are real; predictions are real.  A complex hidden state enters the
output head as the concatenation [Re(h); Im(h)] with a real (M x 2N) map.

Complex gradients are packed split-real (see kron.py), so parameter
updates treat re/im as independent real coordinates.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .kron import (KroneckerMatrix, kron_apply, kron_backward, kron_forward,
                   near_identity_factors, random_unitary_factors,
                   soft_unitary_grad, soft_unitary_penalty)
from .linalg import COMPLEX, REAL, dtype_for
from .rng import STREAM_INIT, generator


def modrelu(z, bias):
    """Rescale |z| by relu(|z| + bias) while preserving phase; 0 maps to 0."""
    mag = np.abs(z)
    gate = mag + bias
    safe = np.where(mag > 0.0, mag, 1.0)
    return np.where(gate > 0.0, z * (gate / safe), np.zeros_like(z))


def modrelu_backward(z, bias, gh):
    """Gradients of modrelu: (dL/dz packed complex, per-entry dL/dbias)."""
    mag = np.abs(z)
    active = (mag + bias > 0.0) & (mag > 0.0)
    safe = np.where(active, mag, 1.0)
    g = (safe + bias) / safe
    redot = gh.real * z.real + gh.imag * z.imag
    gz = np.where(active, g * gh - (bias / safe**3) * redot * z,
                  np.zeros_like(gh))
    gbias = np.where(active, redot / safe, 0.0)
    return gz, gbias


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _uniform_fan_in(rng, shape, fan_in, field):
    s = 1.0 / np.sqrt(fan_in)
    a = rng.uniform(-s, s, shape)
    if field == COMPLEX:
        a = a + 1j * rng.uniform(-s, s, shape)
    return np.ascontiguousarray(a.astype(dtype_for(field)))


def _as_operator(w, frozen=False):
    if isinstance(w, list):
        return KroneckerMatrix(w, frozen=frozen)
    return w


def _rec_apply(w, h):
    if isinstance(w, KroneckerMatrix):
        return kron_apply(h, w)
    return h @ w.T


def _rec_backward(w, h_prev, gz):
    """Gradients of z = h_prev @ W.T: returns (gW, gh_prev).

    For dense W the caller may prefer the bulk formula over all steps;
    this helper is the per-step path used for Kronecker operators.
    """
    if isinstance(w, KroneckerMatrix):
        _, cache = kron_forward(h_prev, w)
        kg = kron_backward(h_prev, w, cache, gz)
        return kg.gw, kg.gx
    return gz.T @ h_prev.conj(), gz @ w.conj()


KRON_CACHE_BUDGET_ENTRIES = 16_000_000   # per-sequence stage-cache cap (~256 MB)


def _keep_kron_caches(w, b, t):
    if not isinstance(w, KroneckerMatrix):
        return False
    per_step = b * w.out_dim * w.num_factors
    return per_step * t <= KRON_CACHE_BUDGET_ENTRIES


@dataclass
class RecurrentSeqCache:
    inputs: np.ndarray     # (B, T, D) real
    h0: np.ndarray         # (B, N)
    z: np.ndarray          # (B, T, N) pre-activations
    h: np.ndarray          # (B, T, N) hidden states
    kron_caches: list = None   # per-step stage caches, when memory allows

    @property
    def final_h(self):
        return self.h[:, -1]


class RecurrentCell:
    """Single-gate recurrent cell over a dense or Kronecker operator."""

    VALID_ACTIVATIONS = {REAL: ("tanh", "identity"),
                         COMPLEX: ("modrelu", "identity")}

    def __init__(self, n, d, m, field=REAL, factor_shapes=None,
                 activation=None, frozen_recurrent=False):
        self.n, self.d, self.m = n, d, m
        self.field = field
        self.factor_shapes = factor_shapes
        self.frozen_recurrent = frozen_recurrent
        self.activation = activation or ("modrelu" if field == COMPLEX else "tanh")
        if self.activation not in self.VALID_ACTIVATIONS[field]:
            raise ValueError(
                f"activation {self.activation!r} unsupported for {field} cells")
        if factor_shapes is not None:
            pn = int(np.prod([p for p, _ in factor_shapes]))
            qn = int(np.prod([q for _, q in factor_shapes]))
            if pn != n or qn != n:
                raise ShapeMismatchError(
                    f"factor shapes {factor_shapes} do not multiply to {n}x{n}")
        self.has_cell_state = False
        self.penalty_allowed = True
        self.recurrent_param_names = ("w",)

    @property
    def head_in(self):
        return 2 * self.n if self.field == COMPLEX else self.n

    def init_params(self, seed):
        rng = generator(seed, STREAM_INIT)
        params = {}
        params["u"] = _uniform_fan_in(rng, (self.n, self.d), self.d, self.field)
        if self.factor_shapes is None:
            w = random_unitary_factors([(self.n, self.n)], rng, field=self.field)
            params["w"] = w.factors[0]
        else:
            params["w"] = random_unitary_factors(
                self.factor_shapes, rng, field=self.field).factors
        params["b"] = np.zeros(self.n, dtype=dtype_for(self.field))
        if self.activation == "modrelu":
            params["beta"] = np.zeros(self.n)
        params["v"] = _uniform_fan_in(rng, (self.m, self.head_in), self.head_in, REAL)
        params["c"] = np.zeros(self.m)
        return params

    def operator(self, params):
        return _as_operator(params["w"], frozen=self.frozen_recurrent)

    def zero_state(self, batch_size):
        return np.zeros((batch_size, self.n), dtype=dtype_for(self.field))

    # -- single step ------------------------------------------------------

    def step(self, params, h_prev, x_t):
        z = _rec_apply(self.operator(params), h_prev) + x_t @ params["u"].T + params["b"]
        return self._act(params, z)

    def step_with_cache(self, params, h_prev, x_t):
        z = _rec_apply(self.operator(params), h_prev) + x_t @ params["u"].T + params["b"]
        h = self._act(params, z)
        return h, (h_prev, x_t, z, h)

    def step_backward(self, params, cache, gh):
        """Exact reverse of one step: (parameter grads, dL/dh_prev)."""
        h_prev, x_t, z, h = cache
        gz, gbeta = self._act_backward(params, z, h, gh)
        gw, gh_prev = _rec_backward(self.operator(params), h_prev, gz)
        grads = {
            "u": gz.T @ x_t,
            "w": gw,
            "b": gz.sum(axis=0),
        }
        if self.activation == "modrelu":
            grads["beta"] = gbeta.sum(axis=0)
        return grads, gh_prev

    def _act(self, params, z):
        if self.activation == "tanh":
            return np.tanh(z)
        if self.activation == "modrelu":
            return modrelu(z, params["beta"])
        return z

    def _act_backward(self, params, z, h, gh):
        if self.activation == "tanh":
            return gh * (1.0 - h * h), None
        if self.activation == "modrelu":
            return modrelu_backward(z, params["beta"], gh)
        return gh, None

    # -- output head ------------------------------------------------------

    def output_head(self, params, h):
        """Affine map to prediction space; complex h enters as [Re; Im]."""
        if self.field == COMPLEX:
            h = np.concatenate([h.real, h.imag], axis=-1)
        return h @ params["v"].T + params["c"]

    # -- full sequence ----------------------------------------------------

    def forward_sequence(self, params, inputs, h0=None):
        b, t, d = inputs.shape
        if d != self.d:
            raise ShapeMismatchError(f"inputs have D={d}, cell expects {self.d}")
        h = self.zero_state(b) if h0 is None else h0
        w = self.operator(params)
        # Input contributions for every step in one product.
        pre = inputs.reshape(b * t, d) @ params["u"].T
        pre = pre.reshape(b, t, self.n) + params["b"]
        zs = np.empty((b, t, self.n), dtype=dtype_for(self.field))
        hs = np.empty_like(zs)
        h0_saved = h
        kcaches = [] if _keep_kron_caches(w, b, t) else None
        for k in range(t):
            if kcaches is not None:
                wh, kc = kron_forward(h, w)
                kcaches.append(kc)
            else:
                wh = _rec_apply(w, h)
            z = wh + pre[:, k]
            h = self._act(params, z)
            zs[:, k] = z
            hs[:, k] = h
        return RecurrentSeqCache(inputs=inputs, h0=h0_saved, z=zs, h=hs,
                                 kron_caches=kcaches)

    def output_sequence(self, params, cache):
        b, t, _ = cache.h.shape
        h = cache.h.reshape(b * t, self.n)
        return self.output_head(params, h).reshape(b, t, self.m)

    def backward_sequence(self, params, cache, glogits, record_trace=False):
        """Reverse-mode through head and recurrence.

        Returns (grads, dL/dh0, trace) where trace[t] = ||dL/dh_t||_F when
        requested (None otherwise).
        """
        b, t, _ = glogits.shape
        w = self.operator(params)
        complex_mode = self.field == COMPLEX

        gflat = glogits.reshape(b * t, self.m)
        if complex_mode:
            hr = np.concatenate([cache.h.real, cache.h.imag], axis=-1)
            gv = gflat.T @ hr.reshape(b * t, 2 * self.n)
            ghr = (gflat @ params["v"]).reshape(b, t, 2 * self.n)
            ghead = ghr[..., :self.n] + 1j * ghr[..., self.n:]
        else:
            gv = gflat.T @ cache.h.reshape(b * t, self.n)
            ghead = (gflat @ params["v"]).reshape(b, t, self.n)
        gc = gflat.sum(axis=0)

        gzs = np.empty_like(cache.z)
        gbeta = None
        if self.activation == "modrelu":
            gbeta = np.zeros(self.n)
        gw_kron = None
        if isinstance(w, KroneckerMatrix):
            gw_kron = [np.zeros_like(f) for f in w.factors]
        trace = np.empty(t) if record_trace else None

        gcarry = np.zeros((b, self.n), dtype=dtype_for(self.field))
        for k in range(t - 1, -1, -1):
            gh = ghead[:, k] + gcarry
            if record_trace:
                trace[k] = np.linalg.norm(gh)
            gz, gb_elem = self._act_backward(params, cache.z[:, k], cache.h[:, k], gh)
            gzs[:, k] = gz
            if gbeta is not None:
                gbeta += gb_elem.sum(axis=0)
            h_prev = cache.h0 if k == 0 else cache.h[:, k - 1]
            if gw_kron is not None:
                if cache.kron_caches is not None:
                    kcache = cache.kron_caches[k]
                else:
                    _, kcache = kron_forward(h_prev, w)
                kg = kron_backward(h_prev, w, kcache, gz)
                for acc, g in zip(gw_kron, kg.gw):
                    acc += g
                gcarry = kg.gx
            else:
                gcarry = gz @ w.conj()

        gz_flat = gzs.reshape(b * t, self.n)
        grads = {"u": gz_flat.T @ cache.inputs.reshape(b * t, self.d)}
        if gw_kron is not None:
            grads["w"] = gw_kron
        else:
            h_prev_all = np.concatenate([cache.h0[:, None], cache.h[:, :-1]], axis=1)
            grads["w"] = gz_flat.T @ h_prev_all.reshape(b * t, self.n).conj()
        grads["b"] = gz_flat.sum(axis=0)
        if gbeta is not None:
            grads["beta"] = gbeta
        grads["v"] = gv
        grads["c"] = gc
        return grads, gcarry, trace

    # -- penalty ----------------------------------------------------------

    def recurrent_penalty(self, params, amplitude):
        """Soft unitary penalty on the recurrent operator and its gradient."""
        w = params["w"]
        op = w if isinstance(w, list) else [w]
        km = KroneckerMatrix(op)
        value = soft_unitary_penalty(km, amplitude)
        grad = soft_unitary_grad(km, amplitude)
        return value, {"w": grad if isinstance(w, list) else grad[0]}


@dataclass
class LstmSeqCache:
    inputs: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    gates: dict            # each (B, T, N): f, i, o, cand
    c: np.ndarray          # (B, T, N) cell states
    h: np.ndarray          # (B, T, N) hidden states
    kron_caches: dict = None   # gate -> per-step stage caches

    @property
    def final_h(self):
        return self.h[:, -1]

    @property
    def final_c(self):
        return self.c[:, -1]


class LstmCell:
    """Gated cell; real-valued.  Kronecker variant swaps each recurrent map."""

    GATES = ("f", "i", "o", "cand")

    def __init__(self, n, d, m, factor_shapes=None):
        self.n, self.d, self.m = n, d, m
        self.field = REAL
        self.factor_shapes = factor_shapes
        self.frozen_recurrent = False
        self.has_cell_state = True
        # Gating already stabilizes gradient flow, so the trainer applies
        # no unitarity penalty here unless explicitly overridden.
        self.penalty_allowed = False
        self.recurrent_param_names = tuple(f"w_{g}" for g in self.GATES)
        if factor_shapes is not None:
            pn = int(np.prod([p for p, _ in factor_shapes]))
            qn = int(np.prod([q for _, q in factor_shapes]))
            if pn != n or qn != n:
                raise ShapeMismatchError(
                    f"factor shapes {factor_shapes} do not multiply to {n}x{n}")

    @property
    def head_in(self):
        return self.n

    def init_params(self, seed):
        rng = generator(seed, STREAM_INIT)
        params = {}
        for g in self.GATES:
            if self.factor_shapes is None:
                params[f"w_{g}"] = random_unitary_factors(
                    [(self.n, self.n)], rng, field=REAL).factors[0]
            else:
                params[f"w_{g}"] = near_identity_factors(
                    self.factor_shapes, rng, field=REAL).factors
            params[f"u_{g}"] = _uniform_fan_in(rng, (self.n, self.d), self.d, REAL)
            params[f"b_{g}"] = np.zeros(self.n)
        params["v"] = _uniform_fan_in(rng, (self.m, self.n), self.n, REAL)
        params["c"] = np.zeros(self.m)
        return params

    def operator(self, params, gate):
        return _as_operator(params[f"w_{gate}"])

    def zero_state(self, batch_size):
        z = np.zeros((batch_size, self.n))
        return z, z.copy()

    def _gate_pre(self, params, gate, h_prev, x_t):
        return (_rec_apply(self.operator(params, gate), h_prev)
                + x_t @ params[f"u_{gate}"].T + params[f"b_{gate}"])

    def step(self, params, h_prev, c_prev, x_t):
        h, c, _ = self.step_with_cache(params, h_prev, c_prev, x_t)
        return h, c

    def step_with_cache(self, params, h_prev, c_prev, x_t):
        f = _sigmoid(self._gate_pre(params, "f", h_prev, x_t))
        i = _sigmoid(self._gate_pre(params, "i", h_prev, x_t))
        o = _sigmoid(self._gate_pre(params, "o", h_prev, x_t))
        cand = np.tanh(self._gate_pre(params, "cand", h_prev, x_t))
        c = c_prev * f + cand * i
        h = np.tanh(c) * o
        cache = (h_prev, c_prev, x_t, f, i, o, cand, c)
        return h, c, cache

    def _gate_grads(self, params, gh, gc_in, cache):
        """Shared gate calculus: returns per-gate pre-activation grads and
        (gh_prev, gc_prev)."""
        h_prev, c_prev, x_t, f, i, o, cand, c = cache
        th = np.tanh(c)
        go = gh * th * o * (1.0 - o)
        gc = gc_in + gh * o * (1.0 - th * th)
        gf = gc * c_prev * f * (1.0 - f)
        gi = gc * cand * i * (1.0 - i)
        gcand = gc * i * (1.0 - cand * cand)
        gc_prev = gc * f
        return {"f": gf, "i": gi, "o": go, "cand": gcand}, gc_prev

    def step_backward(self, params, cache, gh, gc_in=None):
        h_prev, c_prev, x_t = cache[0], cache[1], cache[2]
        if gc_in is None:
            gc_in = np.zeros_like(c_prev)
        gpre, gc_prev = self._gate_grads(params, gh, gc_in, cache)
        grads = {}
        gh_prev = np.zeros_like(h_prev)
        for g in self.GATES:
            gw, ghp = _rec_backward(self.operator(params, g), h_prev, gpre[g])
            grads[f"w_{g}"] = gw
            grads[f"u_{g}"] = gpre[g].T @ x_t
            grads[f"b_{g}"] = gpre[g].sum(axis=0)
            gh_prev += ghp
        return grads, gh_prev, gc_prev

    def output_head(self, params, h):
        return h @ params["v"].T + params["c"]

    def forward_sequence(self, params, inputs, h0=None, c0=None):
        b, t, d = inputs.shape
        if d != self.d:
            raise ShapeMismatchError(f"inputs have D={d}, cell expects {self.d}")
        if h0 is None:
            h0 = np.zeros((b, self.n))
        if c0 is None:
            c0 = np.zeros((b, self.n))
        h, c = h0, c0
        ops = {g: self.operator(params, g) for g in self.GATES}
        pre_in = {}
        for g in self.GATES:
            p = inputs.reshape(b * t, d) @ params[f"u_{g}"].T
            pre_in[g] = p.reshape(b, t, self.n) + params[f"b_{g}"]
        gates = {g: np.empty((b, t, self.n)) for g in self.GATES}
        cs = np.empty((b, t, self.n))
        hs = np.empty((b, t, self.n))
        kcaches = None
        if self.factor_shapes is not None and \
                _keep_kron_caches(ops["f"], b, t * len(self.GATES)):
            kcaches = {g: [] for g in self.GATES}

        def rec(gate, h_prev):
            if kcaches is None:
                return _rec_apply(ops[gate], h_prev)
            wh, kc = kron_forward(h_prev, ops[gate])
            kcaches[gate].append(kc)
            return wh

        for k in range(t):
            f = _sigmoid(rec("f", h) + pre_in["f"][:, k])
            i = _sigmoid(rec("i", h) + pre_in["i"][:, k])
            o = _sigmoid(rec("o", h) + pre_in["o"][:, k])
            cand = np.tanh(rec("cand", h) + pre_in["cand"][:, k])
            c = c * f + cand * i
            h = np.tanh(c) * o
            for name, val in (("f", f), ("i", i), ("o", o), ("cand", cand)):
                gates[name][:, k] = val
            cs[:, k] = c
            hs[:, k] = h
        return LstmSeqCache(inputs=inputs, h0=h0, c0=c0, gates=gates, c=cs,
                            h=hs, kron_caches=kcaches)

    def output_sequence(self, params, cache):
        b, t, _ = cache.h.shape
        return (cache.h.reshape(b * t, self.n) @ params["v"].T
                + params["c"]).reshape(b, t, self.m)

    def backward_sequence(self, params, cache, glogits, record_trace=False):
        b, t, _ = glogits.shape
        gflat = glogits.reshape(b * t, self.m)
        gv = gflat.T @ cache.h.reshape(b * t, self.n)
        gc_head = gflat.sum(axis=0)
        ghead = (gflat @ params["v"]).reshape(b, t, self.n)

        ops = {g: self.operator(params, g) for g in self.GATES}
        kron_mode = self.factor_shapes is not None
        gpre_all = {g: np.empty((b, t, self.n)) for g in self.GATES}
        gw_kron = None
        if kron_mode:
            gw_kron = {g: [np.zeros_like(f) for f in ops[g].factors]
                       for g in self.GATES}
        trace = np.empty(t) if record_trace else None

        gh_carry = np.zeros((b, self.n))
        gc_carry = np.zeros((b, self.n))
        for k in range(t - 1, -1, -1):
            gh = ghead[:, k] + gh_carry
            if record_trace:
                trace[k] = np.linalg.norm(gh)
            h_prev = cache.h0 if k == 0 else cache.h[:, k - 1]
            c_prev = cache.c0 if k == 0 else cache.c[:, k - 1]
            step_cache = (h_prev, c_prev, cache.inputs[:, k],
                          cache.gates["f"][:, k], cache.gates["i"][:, k],
                          cache.gates["o"][:, k], cache.gates["cand"][:, k],
                          cache.c[:, k])
            gpre, gc_carry = self._gate_grads(params, gh, gc_carry, step_cache)
            gh_carry = np.zeros((b, self.n))
            for g in self.GATES:
                gpre_all[g][:, k] = gpre[g]
                if kron_mode:
                    if cache.kron_caches is not None:
                        kc = cache.kron_caches[g][k]
                    else:
                        _, kc = kron_forward(h_prev, ops[g])
                    kg = kron_backward(h_prev, ops[g], kc, gpre[g])
                    for acc, gw in zip(gw_kron[g], kg.gw):
                        acc += gw
                    gh_carry += kg.gx
                else:
                    gh_carry += gpre[g] @ ops[g]

        h_prev_all = np.concatenate([cache.h0[:, None], cache.h[:, :-1]],
                                    axis=1).reshape(b * t, self.n)
        x_flat = cache.inputs.reshape(b * t, self.d)
        grads = {}
        for g in self.GATES:
            gp = gpre_all[g].reshape(b * t, self.n)
            grads[f"w_{g}"] = gw_kron[g] if kron_mode else gp.T @ h_prev_all
            grads[f"u_{g}"] = gp.T @ x_flat
            grads[f"b_{g}"] = gp.sum(axis=0)
        grads["v"] = gv
        grads["c"] = gc_head
        return grads, gh_carry, trace

    def recurrent_penalty(self, params, amplitude):
        value = 0.0
        grads = {}
        for g in self.GATES:
            w = params[f"w_{g}"]
            km = KroneckerMatrix(w if isinstance(w, list) else [w])
            value += soft_unitary_penalty(km, amplitude)
            grad = soft_unitary_grad(km, amplitude)
            grads[f"w_{g}"] = grad if isinstance(w, list) else grad[0]
        return value, grads


def make_cell(model, n, d, m, factor_shapes=None, activation=None,
              frozen_recurrent=False):
    """Build the cell for a model name: rnn, kru, lstm, or kru-lstm."""
    if model == "rnn":
        return RecurrentCell(n, d, m, field=REAL, activation=activation,
                             frozen_recurrent=frozen_recurrent)
    if model == "kru":
        if factor_shapes is None:
            raise ShapeMismatchError("kru requires factor shapes")
        return RecurrentCell(n, d, m, field=COMPLEX, factor_shapes=factor_shapes,
                             activation=activation,
                             frozen_recurrent=frozen_recurrent)
    if model == "lstm":
        return LstmCell(n, d, m)
    if model == "kru-lstm":
        if factor_shapes is None:
            raise ShapeMismatchError("kru-lstm requires factor shapes")
        return LstmCell(n, d, m, factor_shapes=factor_shapes)
    raise ValueError(f"unknown model {model!r}")
