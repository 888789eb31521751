"""Finite-difference verification suites over all primitives and all losses.

Everything runs at 64-bit; 32-bit training precision is useless for
difference quotients. Used by the ``gradcheck`` command and the acceptance
tests.
"""

from __future__ import annotations

import numpy as np

from . import losses
from .engine import Graph, OpSpec, ParameterStore, check_loss_gradient, grad_check

TOL = 1e-4
H_PRIMITIVE = 1e-5
H_PROB = 1e-6   # probability-space inputs: keep the probe inside valid rows


def _graph(seed, builder):
    store = ParameterStore(np.float64)
    g = Graph("check", store, n_inputs=1)
    rng = np.random.default_rng(seed)
    x = builder(store, g, rng)
    return g, x


def _weight(store, rng, name, shape, scale=0.4):
    store.create(name, shape, "F")
    store.set(name, rng.standard_normal(shape) * scale)
    return name


def _primitive_cases():
    def dense(store, g, rng):
        w = _weight(store, rng, "w", (4, 5))
        store.create("b", (4,), "F", fill=0.0)
        store.set("b", rng.standard_normal(4))
        g.set_outputs([g.add(OpSpec("dense"), [0], [w, "b"])])
        return rng.standard_normal((3, 5))

    def conv(store, g, rng):
        w = _weight(store, rng, "w", (3, 2, 4, 4))
        store.create("b", (3,), "F", fill=0.0)
        store.set("b", rng.standard_normal(3))
        g.set_outputs([g.add(OpSpec("conv2d", kernel=4, stride=2, padding=1),
                             [0], [w, "b"])])
        return rng.standard_normal((2, 2, 6, 6))

    def deconv(store, g, rng):
        w = _weight(store, rng, "w", (2, 3, 4, 4))
        store.create("b", (3,), "F", fill=0.0)
        store.set("b", rng.standard_normal(3))
        g.set_outputs([g.add(OpSpec("deconv2d", kernel=4, stride=2, padding=1),
                             [0], [w, "b"])])
        return rng.standard_normal((2, 2, 4, 4))

    def batch_norm(store, g, rng):
        store.create("ga", (3,), "F", fill=1.0)
        store.set("ga", 1.0 + 0.2 * rng.standard_normal(3))
        store.create("be", (3,), "F", fill=0.0)
        store.set("be", rng.standard_normal(3))
        store.create("rm", (3,), "F", trainable=False, fill=0.0)
        store.create("rv", (3,), "F", trainable=False, fill=1.0)
        g.set_outputs([g.add(OpSpec("batch_norm"), [0], ["ga", "be", "rm", "rv"])])
        return rng.standard_normal((4, 3, 5, 5))

    def instance_norm(store, g, rng):
        store.create("ga", (3,), "F", fill=1.0)
        store.set("ga", 1.0 + 0.2 * rng.standard_normal(3))
        store.create("be", (3,), "F", fill=0.0)
        store.set("be", rng.standard_normal(3))
        g.set_outputs([g.add(OpSpec("instance_norm"), [0], ["ga", "be"])])
        return rng.standard_normal((2, 3, 5, 5))

    def unary(kind, shape=(4, 7), **attrs):
        def build(store, g, rng):
            g.set_outputs([g.add(OpSpec(kind, **attrs), [0])])
            return rng.standard_normal(shape)
        return build

    def residual(store, g, rng):
        w = _weight(store, rng, "w", (2, 2, 3, 3))
        c = g.add(OpSpec("conv2d", kernel=3, stride=1, padding=1), [0], [w])
        a = g.add(OpSpec("add"), [c, 0])
        g.set_outputs([g.add(OpSpec("affine_rescale", scale=0.5, shift=0.5), [a])])
        return rng.standard_normal((2, 2, 5, 5))

    def reshape_case(store, g, rng):
        g.set_outputs([g.add(OpSpec("reshape", shape=(3, 4)), [0])])
        return rng.standard_normal((2, 12))

    return [
        ("dense", dense),
        ("conv2d(k4,s2,p1)", conv),
        ("deconv2d(k4,s2,p1)", deconv),
        ("batch_norm", batch_norm),
        ("instance_norm", instance_norm),
        ("relu", unary("relu")),
        ("leaky_relu", unary("leaky_relu")),
        ("tanh", unary("tanh")),
        ("sigmoid", unary("sigmoid")),
        ("softmax", unary("softmax")),
        ("avg_pool(k2,s2)", unary("avg_pool", shape=(2, 3, 6, 6), kernel=2, stride=2)),
        ("avg_pool(global)", unary("avg_pool", shape=(2, 3, 6, 6), global_pool=True)),
        ("reshape", reshape_case),
        ("add+affine_rescale", residual),
    ]


def primitive_suite(seeds=(0, 1, 2), tol=TOL, h=H_PRIMITIVE):
    """[(name, seed, max_rel_err, passed)] over every primitive and seed."""
    rows = []
    for name, builder in _primitive_cases():
        for seed in seeds:
            g, x = _graph(seed, builder)
            rep = grad_check(g, x, h=h, tol=tol, seed=seed)
            err = max(e for _, e in rep.worst)
            rows.append((name, seed, err, rep.passed))
    return rows


def loss_suite(seeds=(0, 1, 2), tol=TOL):
    """[(name, seed, max_rel_err, passed)] for every loss gradient."""
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        p = rng.dirichlet(np.ones(3), size=12)
        y = np.eye(3)[rng.integers(0, 3, 12)]
        x = rng.random((3, 9, 9))
        xh = rng.random((3, 9, 9))
        rp = rng.random((2, 4, 4)) * 0.9 + 0.05
        fp = rng.random((2, 4, 4)) * 0.9 + 0.05
        focal = losses.FocalParams()
        cases = [
            ("cross_entropy", lambda: check_loss_gradient(
                losses.cross_entropy_loss_and_grad, [p.copy(), y], 0,
                h=H_PROB, tol=tol, seed=seed)),
            ("reconstruction_ssim", lambda: check_loss_gradient(
                losses.reconstruction_loss_and_grad, [x, xh.copy()], 1,
                h=H_PRIMITIVE, tol=tol, seed=seed)),
            ("adversarial_disc_real", lambda: check_loss_gradient(
                lambda r, f: losses.discrimination_bce_and_grads(r, f)[:2],
                [rp.copy(), fp], 0, h=H_PROB, tol=tol, seed=seed)),
            ("adversarial_disc_fake", lambda: check_loss_gradient(
                lambda r, f: (losses.discrimination_bce_and_grads(r, f)[0],
                              losses.discrimination_bce_and_grads(r, f)[2]),
                [rp, fp.copy()], 1, h=H_PROB, tol=tol, seed=seed)),
            ("generator_disc_term", lambda: check_loss_gradient(
                losses.generator_disc_term_and_grad, [fp.copy()], 0,
                h=H_PROB, tol=tol, seed=seed)),
            ("adversarial_cls", lambda: check_loss_gradient(
                losses.adversarial_classification_loss_and_grad, [p.copy(), y], 0,
                h=H_PROB, tol=tol, seed=seed)),
            ("focal", lambda: check_loss_gradient(
                lambda pp, yy: losses.focal_loss_and_grad(pp, yy, focal),
                [p.copy(), y], 0, h=H_PROB, tol=tol, seed=seed)),
        ]
        for name, run in cases:
            err = run()
            rows.append((name, seed, err, err <= tol))
    return rows


def format_rows(rows):
    lines = []
    for name, seed, err, passed in rows:
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name:24s} seed={seed}  "
                     f"max rel err {err:.3e}")
    return lines
