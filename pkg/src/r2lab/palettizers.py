"""Weight palettization: k-means, differentiable k-means (DKM) and size accounting.

A layer's weights are flattened row-major, zero-padded to a multiple of
the palette dimension ``d`` and cut into d-vectors ("groups"). A palette
holds ``2**b`` centroids of dimension ``d`` and one index per group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConsistencyError, DomainError
from .tensor import Tensor, as_tensor, record


def group_weights(w, d):
    """Return (groups[n, d], pad)."""
    if d < 1:
        raise DomainError("palette dimension must be >= 1")
    flat = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64).ravel()
    pad = (-flat.size) % d
    if pad:
        flat = np.concatenate([flat, np.zeros(pad)])
    return flat.reshape(-1, d), pad


def ungroup(groups, shape, pad):
    flat = np.asarray(groups).ravel()
    if pad:
        flat = flat[:-pad]
    return flat.reshape(shape)


def sq_dist(groups, codebook):
    if groups.shape[1] == 1:
        diff = groups - codebook.T
        return np.multiply(diff, diff, out=diff)
    diff = groups[:, None, :] - codebook[None, :, :]
    np.multiply(diff, diff, out=diff)
    return diff.sum(axis=2)


def sse(groups, codebook, assignments):
    diff = groups - codebook[assignments]
    return float(np.einsum("nd,nd->", diff, diff))


def kmeans_plusplus(groups, k, rng, init=None):
    """Greedy k-means++ seeding; ``init`` rows, if given, are kept as the first seeds.

    Each new seed is the best (lowest resulting SSE) of ``2 + log k``
    D^2-weighted candidates, which keeps a lone outlier from claiming a
    centroid as often as plain k-means++ does.
    """
    n = len(groups)
    trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = [] if init is None else [np.asarray(c, dtype=np.float64) for c in init]
    if not centers:
        centers.append(groups[rng.integers(n)].copy())
    d2 = sq_dist(groups, np.array(centers)).min(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total > 0:
            cand = rng.choice(n, size=trials, p=d2 / total)
        else:
            cand = rng.integers(n, size=trials)
        best = None
        for idx in cand:
            nd2 = np.minimum(d2, ((groups - groups[idx]) ** 2).sum(axis=1))
            score = float(nd2.sum())
            if best is None or score < best[0]:
                best = (score, int(idx), nd2)
        centers.append(groups[best[1]].copy())
        d2 = best[2]
    return np.array(centers[:k])


def _lloyd(groups, codebook, max_iter, tol, history):
    n, k = len(groups), len(codebook)
    prev = math.inf
    for _ in range(max_iter):
        dist = sq_dist(groups, codebook)
        assign = dist.argmin(axis=1)
        cur = float(dist[np.arange(n), assign].sum())
        if cur > prev * (1 + 1e-12) + 1e-300:
            raise ConsistencyError(f"k-means SSE increased: {prev} -> {cur}")
        prev = cur
        history.append(cur)
        new = lloyd_update(groups, assign, codebook)
        empty = np.bincount(assign, minlength=k) == 0
        if empty.any():
            resid = dist[np.arange(n), assign]
            for j in np.flatnonzero(empty):
                far = int(resid.argmax())
                new[j] = groups[far]
                resid[far] = -1.0
        shift = float(np.abs(new - codebook).max())
        codebook = new
        if shift < tol and not empty.any():
            break
    dist = sq_dist(groups, codebook)
    assign = dist.argmin(axis=1)
    final = float(dist[np.arange(n), assign].sum())
    if final > prev * (1 + 1e-12) + 1e-300:
        raise ConsistencyError(f"k-means SSE increased: {prev} -> {final}")
    history.append(final)
    return codebook, assign, final


def kmeans_fit(groups, k, max_iter=100, tol=1e-10, seed=0, init=None, sse_history=None,
               n_init=3):
    """Lloyd's k-means, best of ``n_init`` seeded k-means++ starts.

    Returns (codebook[k, d], assignments[n]). The clustering SSE is checked
    to be non-increasing after every assignment step; the winning run's
    values are appended to ``sse_history`` when a list is supplied. With
    ``init`` given a single run is made from those seeds.
    """
    groups = np.asarray(groups, dtype=np.float64)
    if groups.ndim == 1:
        groups = groups[:, None]
    n = len(groups)
    if k < 1 or k > n:
        raise DomainError(f"k={k} must be in [1, {n}]")
    if max_iter < 1:
        raise DomainError("max_iter must be >= 1")
    if n_init < 1:
        raise DomainError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(1 if init is not None else n_init):
        history = []
        start = kmeans_plusplus(groups, k, rng, init)
        codebook, assign, final = _lloyd(groups, start, max_iter, tol, history)
        if best is None or final < best[2]:
            best = (codebook, assign, final, history)
    if sse_history is not None:
        sse_history.extend(best[3])
    return best[0], best[1]


def lloyd_update(groups, assign, codebook):
    """Cluster means; empty clusters keep their previous centroid."""
    k, d = codebook.shape
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.zeros((k, d))
    np.add.at(sums, assign, groups)
    new = codebook.copy()
    nz = counts > 0
    new[nz] = sums[nz] / counts[nz, None]
    return new


# -- DKM ------------------------------------------------------------------------------

def _attention_t(groups, codebook, tau):
    # (k, n) layout: reductions over k run along the fast axis
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    if groups.shape[1] == 1:
        d2 = codebook - groups.T
        np.multiply(d2, d2, out=d2)
    else:
        diff = codebook[:, None, :] - groups[None, :, :]
        np.multiply(diff, diff, out=diff)
        d2 = diff.sum(axis=2)
    d2 -= d2.min(axis=0)
    d2 *= -1.0 / tau
    a = np.exp(d2, out=d2)
    a /= a.sum(axis=0)
    return a


def dkm_attention(groups, codebook, tau):
    """Row-softmax of -||g_i - c_j||^2 / tau, shape (n, k)."""
    groups = np.asarray(groups, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    return _attention_t(groups, codebook, tau).T


def attention_update(groups, attn, codebook, eps=1e-12):
    """Centroids as attention-weighted means; near-empty columns keep theirs."""
    mass = attn.sum(axis=0)
    new = codebook.astype(np.float64, copy=True)
    ok = mass >= eps
    new[ok] = (attn[:, ok].T @ groups) / mass[ok, None]
    return new


def dkm_iterate(groups, codebook, tau):
    """One attention-weighted centroid update. Returns (codebook', A)."""
    groups = np.asarray(groups, dtype=np.float64)
    attn = dkm_attention(groups, codebook, tau)
    return attention_update(groups, attn, codebook), attn


def hard_snapshot(groups, codebook, tau):
    """Argmax assignments plus the attention centroid update."""
    new, attn = dkm_iterate(groups, codebook, tau)
    return new, attn.argmax(axis=1)


def _dkm_forward(groups, codebook, tau):
    attn = _attention_t(groups, codebook, tau)
    mass = attn.sum(axis=1)
    ok = mass >= 1e-12
    cent = codebook.astype(np.float64, copy=True)
    cent[ok] = (attn[ok] @ groups) / mass[ok, None]
    return attn, mass, ok, cent, attn.T @ cent


def _dkm_backward(groups, codebook, tau, attn, mass, ok, cent, g_out):
    # attn is (k, n); g_out is dL/dW_hat per group, shape (n, d)
    g_cent = attn @ g_out
    g_num = np.zeros_like(cent)
    g_num[ok] = g_cent[ok] / mass[ok, None]
    g_mass = np.zeros(len(cent))
    g_mass[ok] = -np.einsum("kd,kd->k", g_cent[ok], cent[ok]) / mass[ok]
    g_attn = cent @ g_out.T
    g_attn += g_num @ groups.T
    g_attn += g_mass[:, None]
    g_groups = attn.T @ g_num
    g_attn -= (attn * g_attn).sum(axis=0)
    g_attn *= attn
    # logits_ji = -||g_i - c_j||^2 / tau with c the incoming (detached) codebook
    g_groups += (-2.0 / tau) * (g_attn.sum(axis=0)[:, None] * groups - g_attn.T @ codebook)
    return g_groups


def dkm_forward_backward(w, codebook, tau, d=1, grad_out=None):
    """Soft-palettized weights and, if ``grad_out`` is given, dL/dW.

    The forward runs one attention step from the (detached) incoming
    ``codebook``: A = attn(W, C), C' = A^T W / colsum(A), W_hat = A C'.
    The gradient flows through both A and C' back to the original weights.
    Returns (W_hat, dW or None, C').
    """
    w = np.asarray(w, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64).reshape(-1, d)
    groups, pad = group_weights(w, d)
    attn, mass, ok, cent, recon = _dkm_forward(groups, codebook, tau)
    w_hat = ungroup(recon, w.shape, pad)
    if grad_out is None:
        return w_hat, None, cent
    g, _ = group_weights(np.asarray(grad_out, dtype=np.float64), d)
    if pad:
        g[-1, d - pad:] = 0.0
    dg = _dkm_backward(groups, codebook, tau, attn, mass, ok, cent, g)
    return w_hat, ungroup(dg, w.shape, pad), cent


def dkm_palettize(w, palette, tau, advance=True):
    """Taped DKM op; with ``advance`` the updated codebook is stored
    (detached) on ``palette`` for the next call."""
    w = as_tensor(w)
    d = palette.dim
    groups, pad = group_weights(w.data, d)
    attn, mass, ok, cent, recon = _dkm_forward(groups, palette.codebook, tau)
    incoming = palette.codebook
    if advance:
        palette.codebook = cent.copy()
    shape = w.shape

    def backward(g):
        gg, _ = group_weights(g, d)
        if pad:
            gg[-1, d - pad:] = 0.0
        dg = _dkm_backward(groups, incoming, tau, attn, mass, ok, cent, gg)
        return (ungroup(dg, shape, pad),)

    return record(ungroup(recon, shape, pad), (w,), backward, "dkm")


# -- palette state --------------------------------------------------------------------

@dataclass
class Palette:
    layer_name: str
    bits: int
    dim: int
    shape: tuple
    codebook: np.ndarray
    assignments: np.ndarray | None = None
    pad: int = 0

    def __post_init__(self):
        self.codebook = np.asarray(self.codebook, dtype=np.float64).reshape(-1, self.dim)
        if len(self.codebook) != 2 ** self.bits:
            raise ConsistencyError(
                f"{self.layer_name}: codebook has {len(self.codebook)} entries, expected {2 ** self.bits}")
        if self.assignments is not None:
            self.assignments = np.asarray(self.assignments, dtype=np.int64)
            if self.assignments.size and self.assignments.max() >= 2 ** self.bits:
                raise ConsistencyError(f"{self.layer_name}: assignment index out of range")

    @property
    def k(self):
        return 2 ** self.bits

    @classmethod
    def fit(cls, name, w, bits, dim, seed=0, max_iter=100):
        groups, pad = group_weights(w, dim)
        k = 2 ** bits
        if k > len(groups):
            raise ConfigError(f"palette.{name}", f"k={k} exceeds {len(groups)} weight groups")
        codebook, assign = kmeans_fit(groups, k, max_iter=max_iter, seed=seed)
        return cls(name, bits, dim, tuple(np.shape(w)), codebook, assign, pad)

    def snapshot(self, w, tau):
        """Freeze hard assignments of ``w`` (argmax of the attention)."""
        groups, pad = group_weights(w, self.dim)
        self.codebook, self.assignments = hard_snapshot(groups, self.codebook, tau)
        self.pad = pad

    def reconstruct(self):
        return ungroup(self.codebook[self.assignments], self.shape, self.pad)

    def to_dict(self):
        return {"layer_name": self.layer_name, "bits": self.bits, "dim": self.dim,
                "shape": list(self.shape), "pad": self.pad}


# -- size accounting ------------------------------------------------------------------

@dataclass
class SizeReport:
    layers: list = field(default_factory=list)
    fp_bits: int = 32

    @property
    def index_bytes(self):
        return sum(r["index_bytes"] for r in self.layers)

    @property
    def codebook_bytes(self):
        return sum(r["codebook_bytes"] for r in self.layers)

    @property
    def fp_bytes(self):
        return sum(r["fp_bytes"] for r in self.layers)

    @property
    def total_bytes(self):
        return self.index_bytes + self.codebook_bytes + self.fp_bytes

    def to_dict(self):
        return {"fp_bits": self.fp_bits, "layers": self.layers,
                "totals": {"index_bytes": self.index_bytes, "codebook_bytes": self.codebook_bytes,
                           "fp_bytes": self.fp_bytes, "total_bytes": self.total_bytes}}


def size_report(model, per_layer, fp_bits=32):
    """Compressed size of ``model`` under a per-layer ``{b, d}`` config.

    ``model`` is a Model (its conv/linear weights must each appear in
    ``per_layer``; biases stay at ``fp_bits``) or a mapping of tensor name
    to parameter count, every name of which must appear in ``per_layer``.
    A ``None`` entry keeps that tensor unpalettized.
    """
    if hasattr(model, "weight_layers"):
        counts = []
        for layer in model.weight_layers():
            counts.append((layer.name, layer.weight.size, True))
            counts.append((f"{layer.name}.bias", layer.bias.size, False))
    else:
        counts = [(name, int(n), True) for name, n in model.items()]
    report = SizeReport(fp_bits=fp_bits)
    for name, n, palettizable in counts:
        row = {"name": name, "params": n, "bits": None, "dim": None,
               "index_bytes": 0.0, "codebook_bytes": 0.0, "fp_bytes": 0.0}
        if palettizable and name not in per_layer:
            raise ConfigError(f"palette.{name}", "no palette config for this layer")
        cfg = per_layer.get(name) if palettizable else None
        if cfg is None:
            row["fp_bytes"] = n * fp_bits / 8
        else:
            b, d = _bd(cfg)
            row.update(bits=b, dim=d,
                       index_bytes=math.ceil(n / d) * b / 8,
                       codebook_bytes=2 ** b * d * fp_bits / 8)
        report.layers.append(row)
    return report


def _bd(cfg):
    if isinstance(cfg, dict):
        return int(cfg["bits"]), int(cfg["dim"])
    b, d = cfg
    return int(b), int(d)
