"""Observable dictionaries, separable decompositions, and normal forms.

A dictionary here is a finite vector of scalar observables.  State
dictionaries ``H : R^n -> R^l`` act on states only; augmented dictionaries
act on state-input pairs.  The central structure is the *normal form*

    Phi(x, u) = [H(x); Gtilde(u) H(x)] = [I; Gtilde(u)] H(x),

whose input-independent top block guarantees that every state observable
``h`` in span(H) extends to the augmented domain as ``h(x) * 1`` — the
control-independent extension — without leaving the spanned space.

The module also provides parametric normal-form families (polynomial, MLP,
residual MLP) with a flat parameter vector and exact reverse-accumulation
gradients, used by the dictionary-learning module.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch, RankDeficientProbe

Array = np.ndarray

DEFAULT_RANK_TOL = 1e-8


# ----------------------------------------------------------------------
# Core dictionary containers


@dataclasses.dataclass(frozen=True)
class StateDictionary:
    """A vector of state observables ``H : R^n -> R^l``.

    Parameters
    ----------
    dim : int
        Number of observables l.
    fn : callable
        Single-point evaluation, ``(n,) -> (l,)``.
    names : tuple of str
        Symbolic tag per element, for reports and serialization.
    domain_dim : int or None
        State dimension n, used for shape checking when known.
    batch_fn : callable or None
        Optional vectorized evaluation ``(n, N) -> (l, N)``; must agree
        with ``fn`` column-wise exactly.
    """

    dim: int
    fn: Callable[[Array], Array]
    names: tuple = ()
    domain_dim: int | None = None
    batch_fn: Callable[[Array], Array] | None = None

    def __call__(self, x) -> Array:
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.domain_dim is not None and x.shape != (self.domain_dim,):
            raise DimensionMismatch(
                f"dictionary expects {self.domain_dim} state coordinates, got {x.shape}"
            )
        out = np.asarray(self.fn(x), dtype=float).reshape(-1)
        if out.shape != (self.dim,):
            raise DimensionMismatch(f"dictionary returned {out.shape}, expected ({self.dim},)")
        return out


@dataclasses.dataclass(frozen=True)
class InputMatrixFunction:
    """A matrix-valued input function ``Gtilde : R^m -> R^{rows x cols}``."""

    rows: int
    cols: int
    fn: Callable[[Array], Array]
    domain_dim: int | None = None

    def __call__(self, u) -> Array:
        u = np.asarray(u, dtype=float).reshape(-1)
        if self.domain_dim is not None and u.shape != (self.domain_dim,):
            raise DimensionMismatch(
                f"input function expects {self.domain_dim} input coordinates, got {u.shape}"
            )
        out = np.asarray(self.fn(u), dtype=float)
        if out.shape != (self.rows, self.cols):
            raise DimensionMismatch(
                f"input function returned {out.shape}, expected ({self.rows}, {self.cols})"
            )
        return out


class NormalDictionary:
    """An augmented dictionary in normal form, ``Phi(x,u) = [I; Gtilde(u)] H(x)``.

    ``Gtilde`` may be absent, in which case ``s = l`` and the augmented
    dictionary is just the control-independent extension of ``H``.
    """

    def __init__(self, H: StateDictionary, Gtilde: InputMatrixFunction | None,
                 state_dim: int, input_dim: int):
        if Gtilde is not None and Gtilde.cols != H.dim:
            raise DimensionMismatch(
                f"Gtilde has {Gtilde.cols} columns but H has dimension {H.dim}"
            )
        self.H = H
        self.Gtilde = Gtilde
        self.state_dim = state_dim
        self.input_dim = input_dim

    @property
    def l(self) -> int:
        return self.H.dim

    @property
    def s(self) -> int:
        return self.l + (self.Gtilde.rows if self.Gtilde is not None else 0)

    def G_of(self, u) -> Array:
        """The full coefficient matrix ``G(u) = [I; Gtilde(u)]``, shape (s, l)."""
        if self.Gtilde is None:
            return np.eye(self.l)
        return np.vstack([np.eye(self.l), self.Gtilde(u)])

    def eval(self, x, u) -> Array:
        h = self.H(x)
        if self.Gtilde is None:
            return h
        return np.concatenate([h, self.Gtilde(u) @ h])

    def eval_aug(self, Z: Array) -> Array:
        """Evaluate ``Phi`` column-wise on stacked data ``Z = [X; U]``."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        n, m = self.state_dim, self.input_dim
        if Z.shape[0] != n + m:
            raise DimensionMismatch(
                f"augmented data has {Z.shape[0]} rows, expected n+m = {n + m}"
            )
        X, U = Z[:n], Z[n:]
        N = Z.shape[1]
        Hm = eval_matrix(self.H, X)
        if self.Gtilde is None:
            return Hm
        bottom = np.empty((self.Gtilde.rows, N))
        for j in range(N):
            bottom[:, j] = self.Gtilde(U[:, j]) @ Hm[:, j]
        return np.vstack([Hm, bottom])

    def describe(self) -> dict:
        return {
            "kind": "normal",
            "s": self.s,
            "l": self.l,
            "state_dim": self.state_dim,
            "input_dim": self.input_dim,
            "names": list(self.H.names),
        }


# Type alias documenting the expected structure: for each of the s basis
# functions, a list of (input-factor, state-factor) product terms so that
# phi_i(x, u) = sum_j p_ij(u) * q_ij(x).
SeparableTermList = Sequence[Sequence[tuple]]


def eval_matrix(d, data: Array) -> Array:
    """Evaluate a dictionary on a data matrix, column by column.

    ``d`` is a :class:`StateDictionary` (data ``(n, N)``) or a
    :class:`NormalDictionary` (stacked data ``(n+m, N)``).  ``N = 0`` is
    legal and returns an empty ``(dim, 0)`` matrix.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if isinstance(d, NormalDictionary):
        return d.eval_aug(data)
    if d.domain_dim is not None and data.shape[0] != d.domain_dim:
        raise DimensionMismatch(
            f"data has {data.shape[0]} rows, dictionary domain is {d.domain_dim}"
        )
    N = data.shape[1]
    if N == 0:
        return np.zeros((d.dim, 0))
    if d.batch_fn is not None:
        out = np.asarray(d.batch_fn(data), dtype=float)
        if out.shape != (d.dim, N):
            raise DimensionMismatch(f"batch evaluation returned {out.shape}")
        return out
    out = np.empty((d.dim, N))
    for j in range(N):
        out[:, j] = d(data[:, j])
    return out


def control_independent_extension(h_coeffs, nd: NormalDictionary) -> Array:
    """Coefficients of ``h(x) * 1`` in the augmented basis ``Phi``.

    Because the top block of ``G(u)`` is the identity, the extension of
    ``h = h_coeffs' H`` is exactly ``[h_coeffs; 0]`` — the extended
    function evaluates independently of ``u``.
    """
    v = np.asarray(h_coeffs, dtype=float).reshape(-1)
    if v.shape != (nd.l,):
        raise DimensionMismatch(f"h_coeffs must have length l = {nd.l}, got {v.shape}")
    return np.concatenate([v, np.zeros(nd.s - nd.l)])


# ----------------------------------------------------------------------
# Separable decomposition and normality


def decompose_separable(terms: SeparableTermList, probe_states: Array,
                        tol: float = DEFAULT_RANK_TOL):
    """Factor product-term observables as ``Phi(x, u) = G(u) H'(x)``.

    Every function given as a finite sum of separated products
    ``phi_i(x,u) = sum_j p_ij(u) q_ij(x)`` lies in a space spanned by a
    common finite state basis.  The basis ``H'`` is recovered by a
    rank-revealing SVD of all state factors evaluated on probe points, and
    each row of ``G(u)`` re-expresses one ``phi_i`` in that basis.

    Parameters
    ----------
    terms : sequence of sequences of (p, q) callables
        ``p`` maps an input vector to a scalar, ``q`` a state vector.
    probe_states : array, shape (n, M)
        Probe points in general position; M must be at least the total
        term count, or the span cannot be certified.

    Returns
    -------
    G_eval : callable ``u -> (s, l')`` array
    H_prime : StateDictionary of dimension l' = rank of the state factors
    """
    probe_states = np.atleast_2d(np.asarray(probe_states, dtype=float))
    n, M = probe_states.shape
    flat_q = [q for term_list in terms for (_, q) in term_list]
    total_terms = len(flat_q)
    if total_terms == 0:
        raise ConfigError("empty term list")
    if M < total_terms:
        raise RankDeficientProbe(
            f"{M} probe points cannot certify a span of {total_terms} state factors; "
            "add probe points"
        )
    E = np.empty((total_terms, M))
    for t, q in enumerate(flat_q):
        for j in range(M):
            E[t, j] = float(q(probe_states[:, j]))
    U, sv, Vt = np.linalg.svd(E, full_matrices=False)
    rank = int(np.sum(sv > tol * (sv[0] if sv.size else 0.0)))
    if rank == 0:
        raise RankDeficientProbe("all state factors vanish on the probe points")
    if rank == M < total_terms:
        raise RankDeficientProbe(
            "probe evaluations are saturated (rank == number of probes); add probe points"
        )
    Ur = np.ascontiguousarray(U[:, :rank])

    def h_prime_fn(x: Array) -> Array:
        vals = np.array([float(q(x)) for q in flat_q])
        return Ur.T @ vals

    def h_prime_batch(X: Array) -> Array:
        vals = np.empty((total_terms, X.shape[1]))
        for t, q in enumerate(flat_q):
            for j in range(X.shape[1]):
                vals[t, j] = float(q(X[:, j]))
        return Ur.T @ vals

    H_prime = StateDictionary(
        dim=rank,
        fn=h_prime_fn,
        names=tuple(f"h{k + 1}" for k in range(rank)),
        domain_dim=n,
        batch_fn=h_prime_batch,
    )

    # Row i of G(u): q_ij = (row t(i,j) of Ur) . H', so the p_ij(u) weights
    # combine those coordinate vectors.
    offsets = []
    pos = 0
    for term_list in terms:
        offsets.append(pos)
        pos += len(term_list)

    term_lists = [list(term_list) for term_list in terms]

    def G_eval(u) -> Array:
        u = np.asarray(u, dtype=float).reshape(-1)
        G = np.zeros((len(term_lists), rank))
        for i, term_list in enumerate(term_lists):
            base = offsets[i]
            for j, (p, _) in enumerate(term_list):
                G[i] += float(p(u)) * Ur[base + j]
        return G

    return G_eval, H_prime


def check_rank_condition(G_eval, u_samples, tol: float = DEFAULT_RANK_TOL) -> dict:
    """Check full column rank of ``G(u)`` at each sampled input.

    An input fails when the smallest singular value of ``G(u)`` does not
    exceed ``tol`` times the largest.  Failing inputs delimit where
    pseudo-inverse model extraction is untrustworthy.
    """
    u_samples = list(u_samples)
    if not u_samples:
        raise ConfigError("need at least one input sample")
    failing = []
    for u in u_samples:
        G = np.atleast_2d(np.asarray(G_eval(u), dtype=float))
        sv = np.linalg.svd(G, compute_uv=False)
        if sv.size == 0 or sv[0] == 0.0 or sv[-1] <= tol * sv[0]:
            failing.append(u)
    return {"full_rank": not failing, "failing_inputs": failing}


def verify_normality(G_eval, u_samples, tol: float = DEFAULT_RANK_TOL) -> dict:
    """Decide whether span{G(u) H(x)} admits a normal-form basis.

    Solves the stacked least-squares problem ``W G(u_i) = I`` over all
    sampled inputs.  A solution with (relative) residual at most ``tol``
    certifies normality *on the sampled inputs*: the rebased coefficient
    matrix ``E G(u)`` with ``E = [W; B]`` then has an identity top block.
    ``B`` completes ``W`` with an orthonormal basis of its row-space
    complement, so ``E`` is invertible.
    """
    u_samples = list(u_samples)
    if not u_samples:
        raise ConfigError("need at least one input sample")
    Gs = [np.atleast_2d(np.asarray(G_eval(u), dtype=float)) for u in u_samples]
    s, l = Gs[0].shape
    G_stack = np.hstack(Gs)
    I_stack = np.hstack([np.eye(l) for _ in Gs])
    W = I_stack @ np.linalg.pinv(G_stack)
    residual = float(np.linalg.norm(W @ G_stack - I_stack) / np.sqrt(len(Gs) * l))
    if residual > tol:
        return {"normal": False, "transform": None, "residual": residual}
    _, _, Vt = np.linalg.svd(W, full_matrices=True)
    B = Vt[l:]
    E = np.vstack([W, B])
    return {"normal": True, "transform": E, "residual": residual}


# ----------------------------------------------------------------------
# Parametric normal-form families with exact gradients
#
# All networks operate column-wise on (in_dim, N) matrices and implement
# reverse accumulation by hand: tiny models, full determinism, and a
# gradient contract that is tested against central finite differences.


def _softplus(z: Array) -> Array:
    return np.logaddexp(0.0, z)


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_ACTIVATIONS = {
    "softplus": (_softplus, _sigmoid),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(float)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


class _LinearMap:
    """Linear feature model ``y = W t(x)`` for a fixed featurizer ``t``."""

    def __init__(self, featurize: Callable[[Array], Array], n_features: int,
                 out_dim: int, rng: np.random.Generator):
        self.featurize = featurize
        self.W = rng.standard_normal((out_dim, n_features)) / np.sqrt(n_features)

    def params_list(self):
        return [self.W]

    def forward(self, X: Array):
        T = self.featurize(X)
        return self.W @ T, T

    def backward(self, cache, Gout: Array):
        return [Gout @ cache.T]


class _MLP:
    """Plain fully connected network, hidden activations + linear output."""

    def __init__(self, in_dim: int, widths: Sequence[int], out_dim: int,
                 activation: str, rng: np.random.Generator):
        act = _ACTIVATIONS.get(activation)
        if act is None:
            raise ConfigError(f"unknown activation {activation!r}")
        self.act, self.act_deriv = act
        sizes = [in_dim, *widths, out_dim]
        self.Ws = []
        self.bs = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.Ws.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
            self.bs.append(np.zeros(fan_out))

    def params_list(self):
        out = []
        for W, b in zip(self.Ws, self.bs):
            out.extend([W, b])
        return out

    def forward(self, X: Array):
        acts = [X]
        pres = []
        h = X
        last = len(self.Ws) - 1
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            z = W @ h + b[:, None]
            pres.append(z)
            h = z if i == last else self.act(z)
            acts.append(h)
        return h, (acts, pres)

    def backward(self, cache, Gout: Array):
        acts, pres = cache
        grads = [None] * (2 * len(self.Ws))
        g = Gout
        for i in range(len(self.Ws) - 1, -1, -1):
            if i != len(self.Ws) - 1:
                g = g * self.act_deriv(pres[i])
            grads[2 * i] = g @ acts[i].T
            grads[2 * i + 1] = g.sum(axis=1)
            if i > 0:
                g = self.Ws[i].T @ g
        return grads


class _ResidualMLP:
    """Residual network: linear embed, additive blocks, linear head.

    Each block computes ``y <- y + W2 act(W1 y + b1) + b2``.
    """

    def __init__(self, in_dim: int, blocks: int, width: int, out_dim: int,
                 activation: str, rng: np.random.Generator):
        act = _ACTIVATIONS.get(activation)
        if act is None:
            raise ConfigError(f"unknown activation {activation!r}")
        self.act, self.act_deriv = act
        self.W0 = rng.standard_normal((width, in_dim)) * np.sqrt(2.0 / in_dim)
        self.b0 = np.zeros(width)
        self.blocks = []
        for _ in range(blocks):
            W1 = rng.standard_normal((width, width)) * np.sqrt(2.0 / width)
            b1 = np.zeros(width)
            W2 = rng.standard_normal((width, width)) * np.sqrt(2.0 / width) / np.sqrt(blocks)
            b2 = np.zeros(width)
            self.blocks.append([W1, b1, W2, b2])
        self.Wh = rng.standard_normal((out_dim, width)) * np.sqrt(2.0 / width)
        self.bh = np.zeros(out_dim)

    def params_list(self):
        out = [self.W0, self.b0]
        for W1, b1, W2, b2 in self.blocks:
            out.extend([W1, b1, W2, b2])
        out.extend([self.Wh, self.bh])
        return out

    def forward(self, X: Array):
        y = self.W0 @ X + self.b0[:, None]
        trace = [(X, y)]
        block_caches = []
        for W1, b1, W2, b2 in self.blocks:
            z = W1 @ y + b1[:, None]
            a = self.act(z)
            y_next = y + W2 @ a + b2[:, None]
            block_caches.append((y, z, a))
            y = y_next
        out = self.Wh @ y + self.bh[:, None]
        return out, (trace, block_caches, y)

    def backward(self, cache, Gout: Array):
        trace, block_caches, y_final = cache
        X = trace[0][0]
        g_Wh = Gout @ y_final.T
        g_bh = Gout.sum(axis=1)
        gy = self.Wh.T @ Gout
        block_grads = []
        for (W1, b1, W2, b2), (y_in, z, a) in zip(reversed(self.blocks),
                                                  reversed(block_caches)):
            g_W2 = gy @ a.T
            g_b2 = gy.sum(axis=1)
            ga = W2.T @ gy
            gz = ga * self.act_deriv(z)
            g_W1 = gz @ y_in.T
            g_b1 = gz.sum(axis=1)
            block_grads.append([g_W1, g_b1, g_W2, g_b2])
            gy = gy + W1.T @ gz
        g_W0 = gy @ X.T
        g_b0 = gy.sum(axis=1)
        grads = [g_W0, g_b0]
        for bg in reversed(block_grads):
            grads.extend(bg)
        grads.extend([g_Wh, g_bh])
        return grads


def _monomial_exponents(n_vars: int, degree: int):
    exps = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), total):
            e = [0] * n_vars
            for v in combo:
                e[v] += 1
            exps.append(tuple(e))
    return exps


def _monomial_name(exp) -> str:
    parts = []
    for i, p in enumerate(exp):
        if p == 1:
            parts.append(f"x{i + 1}")
        elif p > 1:
            parts.append(f"x{i + 1}^{p}")
    return "*".join(parts) if parts else "1"


def monomial_featurizer(n_vars: int, degree: int):
    """Return (featurize, names): all monomials of total degree <= degree."""
    exps = _monomial_exponents(n_vars, degree)

    def featurize(X: Array) -> Array:
        N = X.shape[1]
        out = np.ones((len(exps), N))
        for r, exp in enumerate(exps):
            for i, p in enumerate(exp):
                if p:
                    out[r] *= X[i] ** p
        return out

    return featurize, [_monomial_name(e) for e in exps]


class TrainableNormalDictionary(NormalDictionary):
    """A normal-form dictionary whose free entries are parameterized maps.

    Structure (all enforced, never learned):

    * the first ``len(fixed_head)`` rows of ``H`` are the selected state
      coordinates;
    * the top block of ``G(u)`` is the identity.

    The remaining rows of ``H`` come from ``h_net`` and the entries of
    ``Gtilde(u)`` from ``g_net``, both exposed through one flat parameter
    vector with exact reverse-accumulation gradients.

    ``x_scale`` / ``u_scale`` premultiply incoming coordinates and the
    fixed-head rows are divided by ``x_scale`` again, so a dictionary
    trained on scaled data can be rebased to original coordinates as a
    pure basis change (see :meth:`with_input_scaling`).
    """

    def __init__(self, *, kind: str, state_dim: int, input_dim: int, s: int, l: int,
                 fixed_head: Sequence[int], h_net, g_net, spec: dict,
                 x_scale=None, u_scale=None):
        self.kind = kind
        self._state_dim = state_dim
        self._input_dim = input_dim
        self._s = s
        self._l = l
        self.fixed_head = tuple(int(i) for i in fixed_head)
        self.h_net = h_net
        self.g_net = g_net
        self.spec = dict(spec)
        self.x_scale = np.ones(state_dim) if x_scale is None else np.asarray(x_scale, float)
        self.u_scale = np.ones(input_dim) if u_scale is None else np.asarray(u_scale, float)
        if any(i < 0 or i >= state_dim for i in self.fixed_head):
            raise ConfigError("fixed_head indices must be valid state coordinates")
        if len(self.fixed_head) > l:
            raise ConfigError("fixed_head longer than dictionary dimension l")
        head_names = tuple(f"x{i + 1}" for i in self.fixed_head)
        free_names = tuple(f"{kind}{j + 1}" for j in range(l - len(self.fixed_head)))
        H = StateDictionary(
            dim=l,
            fn=lambda x: self._eval_H(x.reshape(-1, 1))[:, 0],
            names=head_names + free_names,
            domain_dim=state_dim,
            batch_fn=self._eval_H,
        )
        Gt = None
        if s > l:
            Gt = InputMatrixFunction(
                rows=s - l,
                cols=l,
                fn=lambda u: self._eval_Gt(u.reshape(-1, 1))[:, :, 0],
                domain_dim=input_dim,
            )
        super().__init__(H, Gt, state_dim, input_dim)

    # -- parameter vector --------------------------------------------

    def _param_arrays(self):
        arrays = []
        if self.h_net is not None:
            arrays.extend(self.h_net.params_list())
        if self.g_net is not None:
            arrays.extend(self.g_net.params_list())
        return arrays

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._param_arrays())

    def get_params(self) -> Array:
        arrays = self._param_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in arrays])

    def set_params(self, vec) -> None:
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != self.n_params:
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {vec.size}")
        pos = 0
        for a in self._param_arrays():
            a[...] = vec[pos : pos + a.size].reshape(a.shape)
            pos += a.size

    # -- evaluation ---------------------------------------------------

    def _head_rescale(self) -> Array:
        t = np.ones(self._l)
        for r, idx in enumerate(self.fixed_head):
            t[r] = 1.0 / self.x_scale[idx]
        return t

    def _eval_H(self, X: Array) -> Array:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xs = X * self.x_scale[:, None]
        k = len(self.fixed_head)
        rows = [Xs[list(self.fixed_head)]] if k else []
        if self.h_net is not None:
            out, _ = self.h_net.forward(Xs)
            rows.append(out)
        Hm = np.vstack(rows) if rows else np.zeros((0, X.shape[1]))
        return Hm * self._head_rescale()[:, None]

    def _eval_Gt(self, U: Array) -> Array:
        """Gtilde stacked over columns: shape (s-l, l, N)."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        Us = U * self.u_scale[:, None]
        flat, _ = self.g_net.forward(Us)
        Gt = flat.reshape(self._s - self._l, self._l, U.shape[1])
        t = self._head_rescale()
        return Gt / t[None, :, None]

    def eval_aug(self, Z: Array) -> Array:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        n, m = self._state_dim, self._input_dim
        if Z.shape[0] != n + m:
            raise DimensionMismatch(
                f"augmented data has {Z.shape[0]} rows, expected n+m = {n + m}"
            )
        X, U = Z[:n], Z[n:]
        Hm = self._eval_H(X)
        if self._s == self._l:
            return Hm
        Gt = self._eval_Gt(U)
        bottom = np.einsum("ijN,jN->iN", Gt, Hm)
        return np.vstack([Hm, bottom])

    def vjp_aug(self, Z: Array, Wbar: Array) -> Array:
        """Gradient of ``sum(Wbar * Phi(Z))`` with respect to the parameters.

        Exact reverse accumulation through the normal-form structure: the
        upstream signal splits into the top block (direct H gradient) and
        the bottom block, which distributes onto both ``H`` (through
        ``Gtilde(u)``) and ``Gtilde`` (through outer products with H).
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Wbar = np.asarray(Wbar, dtype=float)
        n = self._state_dim
        X, U = Z[:n], Z[n:]
        Xs = X * self.x_scale[:, None]
        t = self._head_rescale()
        k = len(self.fixed_head)
        grads = []

        if self._s > self._l:
            Us = U * self.u_scale[:, None]
            g_flat, g_cache = self.g_net.forward(Us)
            Gt = g_flat.reshape(self._s - self._l, self._l, U.shape[1]) / t[None, :, None]
        if self.h_net is not None:
            h_out, h_cache = self.h_net.forward(Xs)

        # Reassemble H exactly as _eval_H does.
        rows = [Xs[list(self.fixed_head)]] if k else []
        if self.h_net is not None:
            rows.append(h_out)
        Hm = (np.vstack(rows) if rows else np.zeros((0, X.shape[1]))) * t[:, None]

        W_top = Wbar[: self._l]
        dH = W_top.copy()
        if self._s > self._l:
            W_bot = Wbar[self._l :]
            dH = dH + np.einsum("ijN,iN->jN", Gt, W_bot)
            dGt = W_bot[:, None, :] * Hm[None, :, :]
            dGt_flat = (dGt / t[None, :, None]).reshape(-1, U.shape[1])
        # Chain through the head rescale, then drop the frozen head rows.
        dH_raw = dH * t[:, None]
        if self.h_net is not None:
            grads.extend(self.h_net.backward(h_cache, dH_raw[k:]))
        if self._s > self._l:
            grads.extend(self.g_net.backward(g_cache, dGt_flat))
        if not grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in grads])

    def with_input_scaling(self, x_scale, u_scale) -> "TrainableNormalDictionary":
        """Rebase onto unscaled coordinates.

        The returned dictionary shares the parameter arrays and satisfies
        ``Phi_new(x, u) = D Phi_old(x_scale*x, u_scale*u)`` for the
        invertible block-diagonal ``D`` that resets the fixed head to the
        raw state — a basis change, so the consistency index is unchanged.
        """
        return TrainableNormalDictionary(
            kind=self.kind,
            state_dim=self._state_dim,
            input_dim=self._input_dim,
            s=self._s,
            l=self._l,
            fixed_head=self.fixed_head,
            h_net=self.h_net,
            g_net=self.g_net,
            spec=self.spec,
            x_scale=np.asarray(x_scale, float) * self.x_scale,
            u_scale=np.asarray(u_scale, float) * self.u_scale,
        )

    def describe(self) -> dict:
        d = super().describe()
        d.update({
            "kind": self.kind,
            "fixed_head": [f"x{i + 1}" for i in self.fixed_head],
            "n_params": self.n_params,
            "spec": self.spec,
        })
        return d


def _build_net(role: str, kind: str, in_dim: int, out_dim: int, spec: dict,
               rng: np.random.Generator):
    if out_dim == 0:
        return None
    if kind == "polynomial":
        degree = int(spec["total_degree"])
        if degree < 1:
            raise ConfigError("polynomial total_degree must be >= 1")
        featurize, _ = monomial_featurizer(in_dim, degree)
        n_features = len(_monomial_exponents(in_dim, degree))
        return _LinearMap(featurize, n_features, out_dim, rng)
    if kind == "mlp":
        widths = [int(w) for w in spec["widths"]]
        if not widths or any(w < 1 for w in widths):
            raise ConfigError("mlp widths must be positive")
        return _MLP(in_dim, widths, out_dim, spec["activation"], rng)
    if kind == "residual_mlp":
        blocks, width = int(spec["blocks"]), int(spec["width"])
        if blocks < 1 or width < 1:
            raise ConfigError("residual_mlp blocks and width must be positive")
        return _ResidualMLP(in_dim, blocks, width, out_dim, spec["activation"], rng)
    raise ConfigError(f"unknown family kind {kind!r}")


def parametric_family(
    kind: str,
    *,
    state_dim: int,
    input_dim: int,
    s: int,
    l: int,
    fixed_head="state",
    seed: int = 0,
    total_degree: int | None = None,
    widths: Sequence[int] | None = None,
    blocks: int | None = None,
    width: int | None = None,
    activation: str = "softplus",
) -> TrainableNormalDictionary:
    """Construct a trainable normal-form dictionary.

    Parameters
    ----------
    kind : {"polynomial", "mlp", "residual_mlp"}
        ``polynomial`` uses monomial features up to ``total_degree``
        (entries of both H and Gtilde are polynomials); ``mlp`` uses fully
        connected networks with the given hidden ``widths``;
        ``residual_mlp`` uses ``blocks`` residual blocks of ``width``
        neurons each.
    s, l : int
        Augmented and state dictionary dimensions, ``s >= l``.
    fixed_head : "state", sequence of int, or None
        State-coordinate indices frozen as the first rows of H.  The
        default freezes the full state vector, the usual practice so that
        lifted rollouts read states directly off the head.
    activation : {"softplus", "relu", "tanh"}
        ``softplus`` (default) keeps the family smooth so that gradient
        checks need no kink avoidance; ``relu`` is the conventional choice
        at larger scale.
    seed : int
        Deterministic parameter initialization.
    """
    if s < l or l < 1:
        raise ConfigError(f"need s >= l >= 1, got s={s}, l={l}")
    if fixed_head == "state":
        fixed_head = list(range(state_dim))
    fixed_head = [int(i) for i in (fixed_head or [])]
    if len(fixed_head) > l:
        raise ConfigError("fixed_head longer than l")
    spec = {"activation": activation}
    if kind == "polynomial":
        if total_degree is None:
            raise ConfigError("polynomial family needs total_degree")
        spec["total_degree"] = int(total_degree)
    elif kind == "mlp":
        if widths is None:
            raise ConfigError("mlp family needs widths")
        spec["widths"] = [int(w) for w in widths]
    elif kind == "residual_mlp":
        if blocks is None or width is None:
            raise ConfigError("residual_mlp family needs blocks and width")
        spec["blocks"], spec["width"] = int(blocks), int(width)
    else:
        raise ConfigError(f"unknown family kind {kind!r}")

    rng = np.random.default_rng(seed)
    h_net = _build_net("h", kind, state_dim, l - len(fixed_head), spec, rng)
    g_net = _build_net("g", kind, input_dim, (s - l) * l, spec, rng) if s > l else None
    return TrainableNormalDictionary(
        kind=kind,
        state_dim=state_dim,
        input_dim=input_dim,
        s=s,
        l=l,
        fixed_head=fixed_head,
        h_net=h_net,
        g_net=g_net,
        spec={**spec, "seed": seed},
    )


# ----------------------------------------------------------------------
# Builtin dictionaries for the polynomial example system


def example_poly_state_basis() -> StateDictionary:
    """The state basis ``H = [x1, x2, x1^2, 1]`` of the builtin example."""

    def batch(X: Array) -> Array:
        x1, x2 = X
        return np.vstack([x1, x2, x1**2, np.ones_like(x1)])

    return StateDictionary(
        dim=4,
        fn=lambda x: np.array([x[0], x[1], x[0] ** 2, 1.0]),
        names=("x1", "x2", "x1^2", "1"),
        domain_dim=2,
        batch_fn=batch,
    )


def example_poly_normal_basis(truncate: Sequence[str] = ()) -> NormalDictionary:
    """The 8-function invariant augmented basis of the builtin example.

    ``Phi = [x1, x2, x1^2, 1, x1*u, u, u^2, sin(u)]`` in normal form over
    ``H = [x1, x2, x1^2, 1]``.  ``truncate`` drops named bottom-block rows
    (any of ``"x1*u", "u", "u^2", "sin(u)"``), producing deliberately
    non-invariant dictionaries for diagnostics and tests.
    """
    H = example_poly_state_basis()
    row_defs = {
        "x1*u": lambda uu: np.array([uu, 0.0, 0.0, 0.0]),
        "u": lambda uu: np.array([0.0, 0.0, 0.0, uu]),
        "u^2": lambda uu: np.array([0.0, 0.0, 0.0, uu**2]),
        "sin(u)": lambda uu: np.array([0.0, 0.0, 0.0, np.sin(uu)]),
    }
    keep = [name for name in row_defs if name not in set(truncate)]
    unknown = set(truncate) - set(row_defs)
    if unknown:
        raise ConfigError(f"unknown bottom-block rows {sorted(unknown)}")
    if not keep:
        nd = NormalDictionary(H, None, state_dim=2, input_dim=1)
    else:
        def gt_fn(u: Array) -> Array:
            uu = u[0]
            return np.vstack([row_defs[name](uu) for name in keep])

        Gt = InputMatrixFunction(rows=len(keep), cols=4, fn=gt_fn, domain_dim=1)
        nd = NormalDictionary(H, Gt, state_dim=2, input_dim=1)
    nd._builtin_name = "example_poly_basis"
    nd._truncated_rows = [name for name in row_defs if name in set(truncate)]
    return nd


# ----------------------------------------------------------------------
# Serialization


def dictionary_to_json(nd: NormalDictionary) -> dict:
    """JSON-ready description of a dictionary (parameters as decimals)."""
    if isinstance(nd, TrainableNormalDictionary):
        return {
            "format": "kooplift-dictionary-v1",
            "kind": nd.kind,
            "dims": {
                "state_dim": nd.state_dim,
                "input_dim": nd.input_dim,
                "s": nd.s,
                "l": nd.l,
            },
            "spec": nd.spec,
            "fixed_head": list(nd.fixed_head),
            "fixed_head_tags": [f"x{i + 1}" for i in nd.fixed_head],
            "x_scale": [float(v) for v in nd.x_scale],
            "u_scale": [float(v) for v in nd.u_scale],
            "parameters": [float(v) for v in nd.get_params()],
        }
    if getattr(nd, "_builtin_name", None) == "example_poly_basis":
        return {
            "format": "kooplift-dictionary-v1",
            "kind": "example_poly_basis",
            "dims": {"state_dim": 2, "input_dim": 1, "s": nd.s, "l": nd.l},
            "truncate": list(getattr(nd, "_truncated_rows", [])),
        }
    raise ConfigError("only parametric and builtin dictionaries are serializable")


def dictionary_from_json(obj: dict) -> NormalDictionary:
    """Rebuild a dictionary from :func:`dictionary_to_json` output."""
    if obj.get("format") != "kooplift-dictionary-v1":
        raise ConfigError("not a kooplift dictionary JSON object")
    kind = obj["kind"]
    if kind == "example_poly_basis":
        return example_poly_normal_basis(truncate=obj.get("truncate", ()))
    dims = obj["dims"]
    spec = obj["spec"]
    nd = parametric_family(
        kind,
        state_dim=dims["state_dim"],
        input_dim=dims["input_dim"],
        s=dims["s"],
        l=dims["l"],
        fixed_head=obj["fixed_head"],
        seed=spec.get("seed", 0),
        total_degree=spec.get("total_degree"),
        widths=spec.get("widths"),
        blocks=spec.get("blocks"),
        width=spec.get("width"),
        activation=spec.get("activation", "softplus"),
    )
    nd.set_params(np.asarray(obj["parameters"], dtype=float))
    return nd.with_input_scaling(obj.get("x_scale", np.ones(dims["state_dim"])),
                                 obj.get("u_scale", np.ones(dims["input_dim"])))


def save_dictionary(nd: NormalDictionary, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(dictionary_to_json(nd), indent=2, sort_keys=True) + "\n")
    return path


def load_dictionary(path) -> NormalDictionary:
    return dictionary_from_json(json.loads(Path(path).read_text()))
