"""Analytic-vs-finite-difference gradient checks for the losses and for the
full views -> embedding -> loss composition, all at 64-bit."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .losses import (APLConfig, CPLConfig, apl_batch, apl_loss, compute_prototypes, cpl_loss,
                     draw_cpl_negatives, few_shot_loss, mine_triplets)
from .model import EmbeddingBatch, ModelConfig, build_model
from .oracles import GradCheckReport, finite_diff_gradient, max_relative_error

STEP = 1e-5
D = torch.float64
# Central differences at step 1e-5 resolve gradients only to ~1e-11 absolute in
# float64, so components below RESOLUTION are compared absolutely instead.
RESOLUTION = 1e-6
ABS_TOL = 1e-10
REL_TOL = 1e-4
NOISE_SAFETY = 4.0


def _unit_rows(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _sizes(rng, max_n=5, max_k=5, max_q=5, max_dim=8):
    n = int(rng.integers(2, max_n + 1))
    return n, int(rng.integers(1, max_k + 1)), int(rng.integers(1, max_q + 1)), \
        int(rng.integers(2, max_dim + 1))


def check_input_gradient(name, fn, x0, step=STEP) -> GradCheckReport:
    """Compare autograd of scalar ``fn(tensor)`` with central differences at ``x0``."""
    x = torch.tensor(x0, dtype=D, requires_grad=True)
    fn(x).backward()
    numeric = finite_diff_gradient(lambda a: fn(torch.from_numpy(a)).item(), x0, step)
    return compare(name, x.grad.numpy().ravel(), numeric.ravel(), np.ones(numeric.size, dtype=bool),
                   step)


def fs_instance(rng):
    n, k, q, dim = _sizes(rng)
    s_lab, q_lab = np.repeat(np.arange(n), k), np.repeat(np.arange(n), q)
    x0 = rng.standard_normal((n * (k + q), dim))

    def fn(x):
        protos = compute_prototypes(x[:n * k], s_lab, n)
        return few_shot_loss(x[n * k:], q_lab, protos)

    return fn, x0


def cpl_instance(rng, temperature=0.1, m=5):
    n, k, q, dim = _sizes(rng)
    q_lab = np.repeat(np.arange(n), q)
    negatives = draw_cpl_negatives(q_lab, min(m, (n - 1) * q), rng)
    x0 = np.concatenate([_unit_rows(rng, (n, dim)), _unit_rows(rng, (n * q, dim))])

    def fn(x):
        return cpl_loss(x[:n], x[n:], q_lab, negatives, temperature)

    return fn, x0


def apl_instance(rng, alpha_deg, anchor_mode):
    """Unit rows for P ∪ Q with the mined triplet set frozen at the base point."""
    n, _, q, dim = _sizes(rng)
    q_lab = np.repeat(np.arange(n), q)
    x0 = np.concatenate([_unit_rows(rng, (n, dim)), _unit_rows(rng, (n * q, dim))])
    x, labels, is_proto = apl_batch(torch.from_numpy(x0[:n]), torch.from_numpy(x0[n:]), q_lab)
    triplets = mine_triplets(x, labels, is_proto, alpha_deg, anchor_mode)

    def fn(x):
        return apl_loss(x, triplets, alpha_deg)

    return fn, x0


def tiny_model_config(n_mels=16, n_frames=16) -> ModelConfig:
    return ModelConfig(n_mels=n_mels, n_frames=n_frames, conv_channels=(2, 2, 2, 2), rnn_hidden=3,
                       fusion_ff_dim=4, proj_hidden=3, proj_dim=3)


class KinkProbe:
    """Records ReLU sign patterns and max-pool winners during forward passes so a
    finite-difference probe that crosses a non-smooth point can be detected."""

    def __init__(self, model: torch.nn.Module):
        self.records: list[torch.Tensor] = []
        self.handles = []
        for m in model.modules():
            if isinstance(m, torch.nn.ReLU):
                self.handles.append(m.register_forward_hook(self._relu))
            elif isinstance(m, torch.nn.MaxPool2d):
                self.handles.append(m.register_forward_hook(self._pool))

    def _relu(self, module, inputs, output):
        self.records.append((inputs[0] > 0).detach().clone())

    def _pool(self, module, inputs, output):
        _, idx = F.max_pool2d(inputs[0].detach(), module.kernel_size, module.stride,
                              return_indices=True)
        self.records.append(idx)

    def take(self) -> list[torch.Tensor]:
        out, self.records = self.records, []
        return out

    def close(self):
        for h in self.handles:
            h.remove()


def estimate_noise(evaluate, x0: np.ndarray, rng, delta: float = 1e-8, m: int = 8,
                   smooth=None, tries: int = 5) -> float:
    """Standard deviation of the rounding noise in ``evaluate`` near ``x0``.

    Difference-table estimator (More & Wild, 2011): along a random unit direction
    the smooth part of f is annihilated by high-order differences, leaving noise
    whose variance is known up to gamma_k = (k!)^2 / (2k)!. ``smooth()``, when
    given, reports whether the probes since the last call stayed off kinks; a
    direction that crosses one is redrawn.
    """
    for _ in range(tries):
        p = rng.standard_normal(x0.shape)
        p /= np.linalg.norm(p)
        vals = np.array([evaluate(x0 + i * delta * p) for i in range(m + 1)])
        if smooth is None or smooth():
            break
    else:
        raise RuntimeError("every noise probe direction crossed a kink")
    sigmas = []
    for k in range(1, 7):
        vals = np.diff(vals)
        gamma = math.factorial(k) ** 2 / math.factorial(2 * k)
        sigmas.append(math.sqrt(gamma * float(np.mean(vals ** 2))))
    return float(np.median(sigmas[2:]))


def compare(name, analytic, numeric, smooth, step=STEP, noise: float = 0.0) -> GradCheckReport:
    """Relative error over resolvable components; tiny components must agree
    absolutely and count as failures (relative error 1) otherwise.

    ``noise`` is the rounding noise of one function evaluation. A central
    difference then carries about noise / step of error, so components too small
    for that error to sit below REL_TOL are held to the absolute bound instead.
    """
    a, f = analytic[smooth], numeric[smooth]
    abs_tol = max(ABS_TOL, NOISE_SAFETY * noise / step)
    small = np.maximum(np.abs(a), np.abs(f)) < max(RESOLUTION, abs_tol / REL_TOL)
    err = max_relative_error(a[~small], f[~small])
    if np.any(np.abs(a[small] - f[small]) > abs_tol):
        err = max(err, 1.0)
    return GradCheckReport(name, err, step, checked=int(smooth.sum()), skipped=int((~smooth).sum()))


def _same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def _generic_point(model: torch.nn.Module, rng) -> None:
    """Jitter every parameter so zero-initialised biases do not sit on kinks."""
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.from_numpy(0.1 * rng.standard_normal(tuple(p.shape))))


def check_composition(rng, kind="fs+apl", alpha_deg=15.0, anchor_mode="prototypes",
                      n_input_coords=24, seed=0, step=STEP) -> list[GradCheckReport]:
    """Gradients of views -> fused embeddings -> episode loss with respect to every
    model parameter and a random subset of input cells (train-mode batch norm).

    Coordinates whose +-step probes change a ReLU sign or a max-pool winner are
    skipped: the loss is not differentiable across those points.
    """
    from .training import LossConfig, episode_loss

    n, k, q = 3, 2, 2
    model = build_model(tiny_model_config(), seed=seed, dtype=D).train()
    _generic_point(model, rng)
    s_lab = torch.as_tensor(np.repeat(np.arange(n), k))
    q_lab = torch.as_tensor(np.repeat(np.arange(n), q))
    views0 = rng.standard_normal((n * (k + q), 4, 16, 16))
    cfg = LossConfig(kind=kind, lam=0.3, cpl=CPLConfig(0.5, 3), apl=APLConfig(alpha_deg, anchor_mode))

    def batch(views):
        fused = model.fuse(views)
        return EmbeddingBatch(fused[:n * k], fused[n * k:], s_lab, q_lab)

    negatives = draw_cpl_negatives(q_lab.numpy(), 3, rng)
    with torch.no_grad():
        b0 = batch(torch.from_numpy(views0))
        x, labels, is_proto = apl_batch(model.project(compute_prototypes(b0.support, s_lab, n)),
                                        model.project(b0.query), q_lab)
        triplets = mine_triplets(x, labels, is_proto, alpha_deg, anchor_mode)

    def loss(views):
        return episode_loss(model, batch(views), cfg, negatives=negatives, triplets=triplets).l_total

    params = list(model.parameters())
    flat0 = torch.nn.utils.parameters_to_vector(params).detach().clone()
    model.zero_grad()
    probe = KinkProbe(model)
    try:
        loss(torch.from_numpy(views0)).backward()
        base = probe.take()
        analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
                              for p in params]).numpy().copy()
        v = torch.tensor(views0, requires_grad=True)
        loss(v).backward()
        probe.take()
        cells = rng.choice(views0.size, size=min(n_input_coords, views0.size), replace=False)
        grad_in = v.grad.numpy().reshape(-1)[cells]

        def central(evaluate, flat, coords):
            """(numeric gradient, smooth mask) at ``coords`` of ``flat``."""
            num = np.zeros(len(coords))
            ok = np.ones(len(coords), dtype=bool)
            with torch.no_grad():
                for j, c in enumerate(coords):
                    orig = flat[c]
                    flat[c] = orig + step
                    hi = evaluate(flat)
                    ok[j] &= _same(probe.take(), base)
                    flat[c] = orig - step
                    lo = evaluate(flat)
                    ok[j] &= _same(probe.take(), base)
                    flat[c] = orig
                    num[j] = (hi - lo) / (2 * step)
            return num, ok

        def at_params(vec):
            torch.nn.utils.vector_to_parameters(torch.from_numpy(vec), params)
            return loss(torch.from_numpy(views0)).item()

        pvec = flat0.numpy().copy()
        num_p, ok_p = central(at_params, pvec, range(pvec.size))
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(flat0, params)
        vflat = views0.reshape(-1).copy()
        at_views = lambda f: loss(torch.from_numpy(f.reshape(views0.shape))).item()
        num_in, ok_in = central(at_views, vflat, cells)
        def smooth():
            recs = probe.take()
            return all(_same(recs[i:i + len(base)], base) for i in range(0, len(recs), len(base)))

        noise_p = estimate_noise(at_params, flat0.numpy().copy(), rng, smooth=smooth)
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(flat0, params)
        noise_in = estimate_noise(at_views, views0.reshape(-1).copy(), rng, smooth=smooth)
    finally:
        probe.close()
    return [compare(f"compose[{kind}] params", analytic, num_p, ok_p, step, noise_p),
            compare(f"compose[{kind}] inputs", grad_in, num_in, ok_in, step, noise_in)]


def run_all(n_instances: int = 20, seed: int = 0, composition_instances: int | None = None,
            progress=None) -> list[GradCheckReport]:
    """Every loss over ``n_instances`` random instances (APL for each angle and
    anchor mode), plus the composition checks; reports the worst case per check."""
    rng = np.random.default_rng(seed)
    composition_instances = n_instances if composition_instances is None else composition_instances
    worst: dict[str, GradCheckReport] = {}

    def keep(rep: GradCheckReport):
        cur = worst.get(rep.name)
        if cur is None or rep.max_rel_error > cur.max_rel_error:
            worst[rep.name] = rep

    for i in range(n_instances):
        keep(check_input_gradient("fs", *fs_instance(rng)))
        keep(check_input_gradient("cpl", *cpl_instance(rng)))
        for mode in ("prototypes", "all"):
            for alpha in (0.0, 15.0, 30.0, 45.0):
                keep(check_input_gradient(f"apl[{mode},{alpha:g}]", *apl_instance(rng, alpha, mode)))
        if progress:
            progress(f"loss instance {i + 1}/{n_instances}")
    for i in range(composition_instances):
        for kind in ("fs", "fs+cpl", "fs+apl"):
            mode = ("prototypes", "all")[i % 2]
            for rep in check_composition(rng, kind, anchor_mode=mode, seed=seed + i):
                keep(rep)
        if progress:
            progress(f"composition instance {i + 1}/{composition_instances}")
    return list(worst.values())
