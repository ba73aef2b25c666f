"""Central finite-difference checks of the autodiff engine, per op and for a whole network.

Finite differences are evaluated with ReLU masks and max-pool winners frozen
to those of the analytic pass, so a perturbation never crosses a kink.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import ModelConfig
from .losses import combined_loss
from .model import ParaTransCNN
from .tensor import Tensor, backward, no_grad, reset_tape

EPS = 1e-6


@dataclass
class GradResult:
    name: str
    size: int
    max_abs: float
    max_rel: float
    failures: int
    # worst relative error among elements whose gradient exceeds 1e-6
    max_rel_large: float = 0.0

    @property
    def ok(self) -> bool:
        return self.failures == 0


@dataclass
class GradReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    @property
    def checked(self) -> int:
        return sum(r.size for r in self.results)

    @property
    def failed(self) -> int:
        return sum(r.failures for r in self.results)

    def lines(self) -> list:
        out = []
        for r in self.results:
            tag = "ok  " if r.ok else "FAIL"
            out.append(f"{tag} {r.name:<48} n={r.size:<6} max_abs={r.max_abs:.2e} max_rel={r.max_rel:.2e} max_rel(|g|>1e-6)={r.max_rel_large:.2e}")
        out.append(f"{self.checked} elements, {self.failed} failed, {self.seconds:.1f}s")
        return out


def compare(name: str, analytic, numeric, rtol: float, atol: float = 1e-8) -> GradResult:
    """Per element: pass if ``|a-n| <= atol`` or ``|a-n| / max(|a|,|n|) < rtol``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    bad = (diff > atol) & (rel >= rtol)
    large = rel[scale > 1e-6]
    return GradResult(name, a.size, float(diff.max(initial=0.0)), float(rel.max(initial=0.0)), int(bad.sum()),
                      float(large.max(initial=0.0)))


def numeric_grad(f, arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, which is perturbed in place."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_function(name: str, fn, inputs: list, rtol: float = 1e-5, seed: int = 0, eps: float = EPS) -> list:
    """Check ``fn(*tensors)`` against finite differences for every input.

    The output is reduced with a fixed random projection so every element of
    the output contributes.
    """
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    reset_tape()
    with ops.record_kinks() as kinks:
        out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    loss = ops.sum(ops.mul(out, proj))
    backward(loss)

    def f():
        with no_grad(), ops.replay_kinks(kinks):
            return float((fn(*tensors).data * proj).sum())

    results = []
    for i, t in enumerate(tensors):
        num = numeric_grad(f, t.data, eps)
        results.append(compare(f"{name}[{i}]", t.grad, num, rtol))
    return results


def _op_cases(rng: np.random.Generator) -> list:
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    labels = rng.integers(0, 3, (2, 4, 4))
    bn_state = lambda c: (np.zeros(c), np.ones(c))  # noqa: E731

    def bn(x, g, b):
        rm, rv = bn_state(x.shape[1])
        return ops.batch_norm2d(x, g, b, rm, rv, training=True)

    cases = [
        ("add_broadcast", ops.add, [r(2, 3, 4, 4), r(1, 3, 1, 1)]),
        ("sub", ops.sub, [r(3, 4), r(4)]),
        ("mul_broadcast", ops.mul, [r(2, 3, 4, 4), r(2, 3, 1, 1)]),
        ("div", ops.div, [r(3, 4), pos(3, 4)]),
        ("exp", ops.exp, [r(3, 4)]),
        ("log", ops.log, [pos(3, 4)]),
        ("relu", ops.relu, [r(4, 5)]),
        ("sigmoid", ops.sigmoid, [3 * r(4, 5)]),
        ("gelu", ops.gelu, [2 * r(4, 5)]),
        ("sum_axis", lambda x: ops.sum(x, axis=(0, 2)), [r(2, 3, 4)]),
        ("mean_keepdims", lambda x: ops.mean(x, axis=-1, keepdims=True), [r(2, 3, 4)]),
        ("reshape", lambda x: ops.reshape(x, (6, 4)), [r(2, 3, 4)]),
        ("transpose", lambda x: ops.transpose(x, (2, 0, 1)), [r(2, 3, 4)]),
        ("concat", lambda a, b: ops.concat([a, b], axis=1), [r(2, 3, 2, 2), r(2, 5, 2, 2)]),
        ("matmul_batched", ops.matmul, [r(2, 3, 4, 5), r(2, 3, 5, 2)]),
        ("linear", ops.linear, [r(2, 4, 6), r(6, 3), r(3)]),
        ("softmax", lambda x: ops.softmax(x, axis=-1), [r(3, 5)]),
        ("global_avg_pool2d", ops.global_avg_pool2d, [r(2, 3, 4, 4)]),
        ("conv2d_k3s1p1", lambda x, w, b: ops.conv2d(x, w, b, 1, 1), [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)]),
        ("conv2d_k7s2p3", lambda x, w: ops.conv2d(x, w, None, 2, 3), [r(1, 2, 8, 8), r(3, 2, 7, 7)]),
        ("conv2d_k1", lambda x, w, b: ops.conv2d(x, w, b, 1, 0), [r(2, 3, 4, 4), r(5, 3, 1, 1), r(5)]),
        ("conv2d_k4s4", lambda x, w, b: ops.conv2d(x, w, b, 4, 0), [r(1, 3, 8, 8), r(4, 3, 4, 4), r(4)]),
        ("conv_transpose2d_k2s2", lambda x, w, b: ops.conv_transpose2d(x, w, b, 2, 0),
         [r(2, 3, 3, 3), r(3, 4, 2, 2), r(4)]),
        ("conv_transpose2d_k3s2p1", lambda x, w: ops.conv_transpose2d(x, w, None, 2, 1),
         [r(1, 2, 3, 3), r(2, 3, 3, 3)]),
        ("max_pool2d", lambda x: ops.max_pool2d(x, 3, 2, 1), [r(2, 2, 6, 6)]),
        ("batch_norm2d", bn, [r(3, 2, 3, 3), r(2), r(2)]),
        ("layer_norm", ops.layer_norm, [r(2, 3, 6), r(6), r(6)]),
        ("cross_entropy", lambda x: ops.cross_entropy(x, labels), [r(2, 3, 4, 4)]),
    ]
    return cases


def op_suite(seed: int = 0, rtol: float = 1e-5) -> GradReport:
    """Finite-difference check of every differentiable op on random f64 inputs."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    rep = GradReport()
    for k, (name, fn, inputs) in enumerate(_op_cases(rng)):
        rep.results.extend(check_function(name, fn, inputs, rtol=rtol, seed=seed + k))
    rep.seconds = time.perf_counter() - t0
    return rep


def _segment(name: str) -> str:
    """Top-level module of a parameter name, with any stage index stripped ("fuse2.ca.fc1.weight" -> "fuse")."""
    return name.split(".", 1)[0].rstrip("0123456789")


def model_gradcheck(cfg: ModelConfig | None = None, batch: int = 1, seed: int = 0, rtol: float = 1e-4,
                    eps: float = EPS, progress=None) -> GradReport:
    """Check every parameter of an f64 network against central differences of the combined loss.

    Each perturbation only re-runs the part of the network downstream of the
    perturbed parameter; cached upstream features are reused.
    """
    cfg = cfg or ModelConfig.minimal()
    t0 = time.perf_counter()
    model = ParaTransCNN(cfg, dtype=np.float64)
    model.train()
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0, 1, (batch, cfg.in_channels, cfg.input_size, cfg.input_size)))
    labels = rng.integers(0, cfg.num_classes, (batch, cfg.input_size, cfg.input_size))
    buffers = {k: v.copy() for k, v in model.named_buffers()}

    reset_tape()
    model.zero_grad()
    with ops.record_kinks() as k_cnn:
        cnn = model.cnn(x)
    with ops.record_kinks() as k_vit:
        vit = model.vit(x)
    with ops.record_kinks() as k_fuse:
        feats = model.fuse_features(vit, cnn)
    with ops.record_kinks() as k_dec:
        logits = model.decode(feats)
    backward(combined_loss(logits, labels))

    def loss_of(segment: str) -> float:
        nonlocal cnn_c, vit_c, feats_c
        with no_grad():
            c, v, fe = cnn_c, vit_c, feats_c
            if segment == "cnn":
                with ops.replay_kinks(k_cnn):
                    c = model.cnn(x)
            if segment == "vit":
                with ops.replay_kinks(k_vit):
                    v = model.vit(x)
            if segment in ("cnn", "vit", "fuse"):
                with ops.replay_kinks(k_fuse):
                    fe = model.fuse_features(v, c)
            with ops.replay_kinks(k_dec):
                out = model.decode(fe)
            return float(combined_loss(out, labels).data)

    with no_grad():
        cnn_c = [Tensor(t.data) for t in cnn]
        vit_c = [Tensor(t.data) for t in vit]
        with ops.replay_kinks(k_fuse):
            feats_c = model.fuse_features(vit_c, cnn_c)

    rep = GradReport()
    try:
        for name, p in model.named_parameters():
            seg = _segment(name)
            num = numeric_grad(lambda: loss_of(seg), p.data, eps)
            rep.results.append(compare(name, p.grad, num, rtol))
            if progress is not None:
                progress(rep.results[-1])
    finally:
        for k, v in model.named_buffers():
            v[...] = buffers[k]
    rep.seconds = time.perf_counter() - t0
    return rep
