"""Training pipeline: pretrain (with a range regularizer), QAT, compression.

All three phases share one SGD loop; they differ in which weights the
forward pass sees and which extra scalars (margins, temperatures, step
sizes, activation clips) join the optimizer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import analytics
from . import tensor as T
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import Dataset, load_idx, synth_gaussian
from .errors import ConfigError, ConsistencyError, DomainError
from .models import build
from .palettizers import Palette, dkm_palettize, group_weights, size_report
from .quantizers import QuantState, pact_quant, round_half_away
from .regularizers import RegState, reg_loss

log = logging.getLogger(__name__)


# -- optimizer ------------------------------------------------------------------------

@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)


def sgd_step(params, state, lr, momentum=0.9, weight_decay=1e-4, nesterov=True, decay=None):
    """In-place SGD update over ``params`` (Tensors with ``.grad``).

    Weight decay is folded into the gradient (g + wd * p) for tensors in
    ``decay`` (all of them when ``decay`` is None). Tensors without a
    gradient are skipped.
    """
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise DomainError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
        g = p.grad
        if weight_decay and (decay is None or id(p) in decay):
            g = g + weight_decay * p.data
        if momentum:
            buf = state.velocity.get(id(p))
            buf = g.copy() if buf is None else momentum * buf + g
            state.velocity[id(p)] = buf
            g = g + momentum * buf if nesterov else buf
        p.data = np.asarray(p.data - lr * g, dtype=np.float64)


def lr_schedule(step, cfg, total_steps):
    """Learning rate at ``step`` (0-based) of ``total_steps``."""
    if step < 0:
        raise DomainError("step must be >= 0")
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    steps_per_epoch = max(1, total_steps // cfg.epochs)
    return cfg.lr * cfg.step_gamma ** ((step // steps_per_epoch) // cfg.step_every)


# -- data -----------------------------------------------------------------------------

def load_data(cfg):
    """(train, test) datasets for a DataConfig."""
    if cfg.source == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels, split="train")
        test = load_idx(cfg.test_images, cfg.test_labels, train.num_classes, split="test")
        return train, test
    common = dict(classes=cfg.classes, dim=cfg.dim, separation=cfg.separation, noise=cfg.noise,
                  density=cfg.density, means_seed=cfg.means_seed, clip=cfg.clip,
                  active=cfg.active)
    train = synth_gaussian(cfg.n_train, seed=cfg.seed, split="train", **common)
    test = synth_gaussian(cfg.n_test, seed=cfg.seed + 1_000_003, split="test", **common)
    return train, test


# -- evaluation -----------------------------------------------------------------------

def evaluate(model, data, weight_fn=None, act_fn=None, batch_size=1000):
    """(accuracy, mean cross-entropy) over ``data``."""
    correct, loss = 0, 0.0
    for x, y in data.batches(batch_size):
        logits = model(x, weight_fn, act_fn)
        loss += T.softmax_ce(logits, y).item() * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(data), loss / len(data)


def layer_columns(model):
    row = {}
    for name, w in model.weights().items():
        st = analytics.layer_stats(w, name)
        row[f"range_{name}"] = st.range
        row[f"std_{name}"] = st.std
        row[f"kurt_{name}"] = st.kurtosis if st.kurtosis is not None else float("nan")
    return row


# -- shared loop ----------------------------------------------------------------------

def _train(cfg, model, train, test, extra_params=(), weight_fn=None, act_fn=None,
           reg=None, post_step=None, eval_fn=None):
    if len(train) == 0:
        raise DomainError("training set is empty")
    tc = cfg.train
    params = model.parameters() + list(extra_params)
    decay = {id(p) for p in model.parameters()}
    opt = SGDState()
    steps_per_epoch = math.ceil(len(train) / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    weights = model.weights()
    step = 0
    history = []
    for epoch in range(tc.epochs):
        task_sum = reg_sum = 0.0
        correct = seen = 0
        lr = tc.lr
        for x, y in train.batches(tc.batch_size, seed=(tc.seed, epoch)):
            for p in params:
                p.grad = None
            logits = model(x, weight_fn, act_fn)
            loss = T.softmax_ce(logits, y)
            task_sum += loss.item() * len(y)
            if reg is not None and reg.kind != "none":
                r = reg_loss(reg, weights)
                reg_sum += r.item() * len(y)
                if reg.lam:
                    loss = loss + reg.lam * r
            T.backward(loss)
            lr = lr_schedule(step, tc, total)
            sgd_step(params, opt, lr, tc.momentum, tc.weight_decay, tc.nesterov, decay)
            if post_step is not None:
                post_step()
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
            step += 1
        test_acc, test_loss = eval_fn() if eval_fn else evaluate(model, test, weight_fn, act_fn)
        row = {"epoch": epoch + 1, "lr": lr, "task_loss": task_sum / seen, "reg_loss": reg_sum / seen,
               "train_acc": correct / seen, "test_acc": test_acc, "test_loss": test_loss}
        row.update(layer_columns(model))
        history.append(row)
        log.info("epoch %d: loss %.4f acc %.4f", epoch + 1, row["task_loss"], test_acc)
    return history


def _seed_everything(cfg, seed):
    if seed is not None:
        cfg.train.seed = seed
    return cfg.train.seed


def reg_descent(weights, reg, steps, lr, momentum=0.0, nesterov=False):
    """Descend on ``lam * reg`` alone (a task whose loss is identically 0).

    ``weights`` maps layer name to a weight Tensor and is updated in place,
    together with the regularizer's own scalars. Returns per-step ranges,
    one dict per step including the starting point.
    """
    if steps < 0:
        raise DomainError("steps must be >= 0")
    if reg.kind == "none":
        raise DomainError("reg_descent needs a regularizer")
    frozen = [n for n, w in weights.items() if not w.requires_grad]
    if frozen:
        raise DomainError(f"weights without requires_grad would never move: {frozen}")
    params = list(weights.values()) + reg.parameters()
    opt = SGDState()
    ranges = [{n: float(np.ptp(w.data)) for n, w in weights.items()}]
    for _ in range(steps):
        for p in params:
            p.grad = None
        T.backward(reg.lam * reg_loss(reg, weights))
        sgd_step(params, opt, lr, momentum, 0.0, nesterov)
        reg.clamp()
        ranges.append({n: float(np.ptp(w.data)) for n, w in weights.items()})
    return ranges


# -- phases ---------------------------------------------------------------------------

def run_pretrain(cfg, model=None, data=None, seed=None):
    """Train from scratch with the configured range regularizer.

    Returns (Checkpoint, per-epoch metrics).
    """
    if cfg.train.phase != "pretrain":
        raise ConfigError("train.phase", "run_pretrain needs phase 'pretrain'")
    seed = _seed_everything(cfg, seed)
    train, test = data if data is not None else load_data(cfg.data)
    if model is None:
        model = build(cfg.model.arch, train.input_shape, train.num_classes, seed,
                      cfg.model.hidden, cfg.model.channels)
    rc = cfg.reg
    reg = RegState.create(rc.kind, model.weights(), rc.lam, rc.alpha_init, rc.margin_init_std,
                          rc.alpha_min)
    history = _train(cfg, model, train, test, reg.parameters(), reg=reg, post_step=reg.clamp)
    summary = {"phase": "pretrain", "arch": model.arch, "seed": seed, "reg": rc.kind,
               "test_acc": history[-1]["test_acc"]}
    return Checkpoint(model, reg, None, {}, cfg.to_dict(), seed, summary), history


def on_grid(w_hat, step, bits):
    """True iff every value is exactly k * step with k in [-Q_N, Q_P]."""
    qn, qp = 2 ** (bits - 1), 2 ** (bits - 1) - 1
    k = round_half_away(w_hat / step)
    return bool(np.all((k >= -qn) & (k <= qp) & (k * step == w_hat)))


def run_qat(cfg, ckpt, data=None, seed=None):
    """Quantization-aware training of every weight layer, first and last included.

    Accuracy is measured with hard-quantized weights only.
    """
    if cfg.train.phase != "qat":
        raise ConfigError("train.phase", "run_qat needs phase 'qat'")
    seed = _seed_everything(cfg, seed)
    train, test = data if data is not None else load_data(cfg.data)
    model = ckpt.model
    qc = cfg.quant
    quant = QuantState(bits=qc.bits, method=qc.method, ewgs_delta=qc.ewgs_delta, act_bits=qc.act_bits)
    quant.init_steps(model.weights())
    act_fn = None
    if qc.act_bits is not None or qc.method == "pact":
        quant.init_act_clips(model.activation_names(), qc.act_clip_init)

        def act_fn(name, h):
            return pact_quant(h, quant.act_clip[name], qc.act_bits)

    def hard_fn(name, w):
        w_hat = quant.hard(name, w.data)
        if not on_grid(w_hat, quant.step[name].item(), quant.bits):
            raise ConsistencyError(f"{name}: evaluation weights left the quantization grid")
        return T.Tensor(w_hat)

    def eval_fn():
        return evaluate(model, test, hard_fn, act_fn)

    history = _train(cfg, model, train, test, quant.parameters(), weight_fn=quant.quantize,
                     act_fn=act_fn, post_step=quant.clamp, eval_fn=eval_fn)
    acc, _ = eval_fn()
    summary = {"phase": "qat", "arch": model.arch, "seed": seed, "method": qc.method,
               "bits": qc.bits, "act_bits": qc.act_bits, "test_acc": acc,
               "init_reg": ckpt.reg.kind if ckpt.reg is not None else None}
    return Checkpoint(model, ckpt.reg, quant, {}, cfg.to_dict(), seed, summary), history


def layer_taus(model, pc, names):
    """Per-layer DKM temperature: ``pc.tau`` times the layer's weight variance."""
    return {n: pc.tau * float(np.var(model.weights()[n].data)) or pc.tau for n in names}


def run_compress(cfg, ckpt, data=None, seed=None):
    """DKM palettization training followed by a hard-assignment snapshot."""
    if cfg.train.phase != "compress":
        raise ConfigError("train.phase", "run_compress needs phase 'compress'")
    seed = _seed_everything(cfg, seed)
    train, test = data if data is not None else load_data(cfg.data)
    model = ckpt.model
    pc = cfg.palette
    weights = model.weights()
    layer_cfg = {}
    for name, w in weights.items():
        bd = pc.layer(name)
        if bd is None:
            continue
        b, d = bd
        n_groups = len(group_weights(w.data, d)[0])
        if 2 ** b > n_groups:
            raise ConfigError(f"palette.layers.{name}", f"k={2 ** b} exceeds {n_groups} weight groups")
        layer_cfg[name] = (b, d)
    palettes = {name: Palette.fit(name, weights[name].data, b, d, seed, pc.kmeans_iter)
                for name, (b, d) in layer_cfg.items()}
    taus = layer_taus(model, pc, layer_cfg)

    def soft_fn(name, w, advance=True):
        if name not in palettes:
            return w
        return dkm_palettize(w, palettes[name], taus[name], advance)

    def eval_soft():
        return evaluate(model, test, lambda n, w: soft_fn(n, w, advance=False))

    history = _train(cfg, model, train, test, weight_fn=soft_fn, eval_fn=eval_soft)
    for name, p in palettes.items():
        p.snapshot(weights[name].data, taus[name])

    def hard_fn(name, w):
        if name not in palettes:
            return w
        return T.Tensor(palettes[name].reconstruct())

    acc, _ = evaluate(model, test, hard_fn)
    report = size_report(model, {n: (pc.layer(n) if n in layer_cfg else None) for n in weights})
    distinct = {n: int(np.unique(p.reconstruct()).size) for n, p in palettes.items() if p.dim == 1}
    summary = {"phase": "compress", "arch": model.arch, "seed": seed, "test_acc": acc,
               "soft_test_acc": history[-1]["test_acc"], "size_report": report.to_dict(),
               "distinct_values": distinct,
               "init_reg": ckpt.reg.kind if ckpt.reg is not None else None}
    return Checkpoint(model, ckpt.reg, None, palettes, cfg.to_dict(), seed, summary), history
