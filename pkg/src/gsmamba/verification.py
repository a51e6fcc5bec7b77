"""Tolerance-checked invariant suite behind ``gsmamba verify``."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import kernels
from .graphscan import (ProjectionSet, TokenGrid, compute_affinities, graphscan,
                        route_jvp, route_tokens, route_via_matrix, routing_matrix)
from .routed_analysis import (attenuation_bound_check, containment_check,
                              exact_output_decomposition, exact_state_decomposition,
                              frozen_reachability, frozen_recurrence_oracle,
                              local_global_kernel_sum, routed_scan)
from .selective_scan import SsmCore, prefix_scan, recurrent_scan, unrolled_state
from .tensor import make_rng, max_abs

DEFAULT_TOLERANCES = {
    "scan_equivalence": 1e-10,
    "unrolled_state": 1e-10,
    "backend_agreement": 1e-12,
    "row_stochastic": 1e-12,
    "routing_dual_path": 1e-12,
    "state_decomposition": 1e-10,
    "output_decomposition": 1e-10,
    "kernel_composition": 1e-10,
    "attenuation_bound": 0.0,
    "reachability": 1e-10,
    "containment": 0.0,
    "route_jvp": 1e-5,
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SuiteParams:
    seed: int = 0
    height: int = 4
    width: int = 4
    channels: int = 3
    radius: int = 1
    heads: int = 1
    state_dim: int = 4
    rel_bias: bool = True
    cases: int = 5


def _case(sp: SuiteParams, k: int):
    rng = make_rng(sp.seed * 1_000_003 + k)
    D = sp.channels
    core = SsmCore.init(rng, D, sp.state_dim, dt_min=0.05, dt_max=1.0)
    grid = TokenGrid(rng.normal(size=(sp.height, sp.width, D)))
    proj = ProjectionSet.init(rng, D, sp.radius, qk_dim=D * sp.heads, value_dim=D * sp.heads,
                              heads=sp.heads, rel_bias=sp.rel_bias, zero_output=False)
    return rng, core, grid, proj


def _scan_equivalence(sp):
    err = 0.0
    for k in range(sp.cases):
        _, core, grid, _ = _case(sp, k)
        a, b = recurrent_scan(core, grid.tokens), prefix_scan(core, grid.tokens)
        err = max(err, max_abs(a.states - b.states), max_abs(a.outputs - b.outputs))
    return err, f"{sp.cases} cases, L={sp.height * sp.width}"


def _unrolled(sp):
    err = 0.0
    for k in range(sp.cases):
        _, core, grid, _ = _case(sp, k)
        seq = recurrent_scan(core, grid.tokens)
        for t in range(1, min(seq.length, 32) + 1):
            err = max(err, max_abs(unrolled_state(core, grid.tokens, t) - seq.states[t - 1]))
    return err, ""


def _backends(sp):
    names = kernels.available()
    if len(names) < 2:
        return 0.0, "only one backend available"
    err = 0.0
    for k in range(sp.cases):
        _, core, grid, proj = _case(sp, k)
        ref = recurrent_scan(core, grid.tokens, backend="python")
        ref_g = graphscan(grid, proj, sp.radius, backend="python")
        for n in names:
            err = max(err, max_abs(recurrent_scan(core, grid.tokens, backend=n).states - ref.states),
                      max_abs(graphscan(grid, proj, sp.radius, backend=n).features - ref_g.features))
    return err, ",".join(names)


def _row_stochastic(sp):
    err = 0.0
    for k in range(sp.cases):
        _, _, grid, proj = _case(sp, k)
        f = compute_affinities(grid, proj, sp.radius)
        err = max(err, max_abs(f.alpha.sum(axis=-1) - 1.0), float(max(0.0, -f.alpha.min())))
    return err, ""


def _dual_path(sp):
    err = 0.0
    for k in range(sp.cases):
        _, _, grid, proj = _case(sp, k)
        f = compute_affinities(grid, proj, sp.radius)
        a = route_tokens(grid, f, proj)
        b = route_via_matrix(grid, routing_matrix(f, proj))
        err = max(err, max_abs(a.features - b.features))
    return err, ""


def _decompositions(sp):
    se = oe = ke = 0.0
    for k in range(sp.cases):
        _, core, grid, proj = _case(sp, k)
        res = routed_scan(core, grid, proj, sp.radius)
        dec = exact_state_decomposition(res)
        se = max(se, max_abs(dec.total - res.d_states))
        oe = max(oe, max_abs(exact_output_decomposition(res, dec.total).total - res.d_outputs))
        ks = local_global_kernel_sum(res, dec)
        ke = max(ke, max_abs(ks.by_slot - ks.by_source), max_abs(ks.by_slot - ks.pathway))
    return se, oe, ke


def _bound(sp):
    worst = 0.0
    for k in range(sp.cases):
        rng, core, grid, proj = _case(sp, k)
        res = routed_scan(core, grid, proj, sp.radius)
        rep = attenuation_bound_check(res, rng.normal(size=(8, sp.channels)))
        mask = np.tril(np.ones(rep.lhs.shape[1:], dtype=bool))
        excess = (rep.lhs - rep.rhs)[:, mask]
        worst = max(worst, float(np.max(excess, initial=0.0)) if rep.violations else 0.0)
    return worst, ""


def _reachability(sp):
    err = 0.0
    for k in range(sp.cases):
        rng, _, grid, proj = _case(sp, k)
        L, D = grid.length, grid.channels
        abar = rng.uniform(0.05, 0.95, size=(L, D, sp.state_dim))
        bbar = rng.normal(size=(L, D, sp.state_dim))
        f = compute_affinities(grid, proj, sp.radius)
        reach = frozen_reachability(abar, bbar, grid, f, proj)
        err = max(err, max_abs(reach.routed - frozen_recurrence_oracle(abar, bbar, grid, proj, f)))
    return err, ""


def _containment(sp):
    err = 0.0
    nonvacuous = True
    for k in range(sp.cases):
        _, core, grid, proj = _case(sp, k)
        zero = proj.with_output(np.zeros_like(proj.w_o))
        rep = containment_check(core, grid, zero, sp.radius)
        err = max(err, rep.max_output_diff, 0.0 if rep.holds else np.inf)
        probe = containment_check(core, grid, proj.with_output(np.full_like(proj.w_o, 1e-8)),
                                  sp.radius)
        nonvacuous &= not probe.outputs_equal or max_abs(grid.features) == 0.0
    if not nonvacuous:
        return np.inf, "1e-8 perturbation of W_o left outputs unchanged"
    return err, "bitwise"


def _jvp(sp, h: float = 1e-5):
    err = 0.0
    for k in range(sp.cases):
        rng, _, grid, proj = _case(sp, k)
        v = rng.normal(size=grid.features.shape)
        jv = route_jvp(grid, proj, sp.radius, v)
        plus = graphscan(TokenGrid(grid.features + h * v), proj, sp.radius).features
        minus = graphscan(TokenGrid(grid.features - h * v), proj, sp.radius).features
        fd = (plus - minus) / (2 * h)
        err = max(err, max_abs(jv - fd) / max(max_abs(fd), 1e-300))
    return err, "relative, central differences"


def run_suite(sp: SuiteParams, tolerances: dict[str, float] | None = None,
              override: float | None = None) -> list[CheckResult]:
    tol = dict(DEFAULT_TOLERANCES)
    if tolerances:
        tol.update(tolerances)
    if override is not None:
        tol = {k: override for k in tol}

    results: list[CheckResult] = []

    def record(name: str, fn: Callable[[], tuple[float, str]]):
        t0 = time.perf_counter()
        err, detail = fn()
        dt = time.perf_counter() - t0
        results.append(CheckResult(name, bool(err <= tol[name]), float(err), tol[name], dt, detail))

    record("scan_equivalence", lambda: _scan_equivalence(sp))
    record("unrolled_state", lambda: _unrolled(sp))
    record("backend_agreement", lambda: _backends(sp))
    record("row_stochastic", lambda: _row_stochastic(sp))
    record("routing_dual_path", lambda: _dual_path(sp))

    t0 = time.perf_counter()
    se, oe, ke = _decompositions(sp)
    dt = (time.perf_counter() - t0) / 3
    for name, err in (("state_decomposition", se), ("output_decomposition", oe),
                      ("kernel_composition", ke)):
        results.append(CheckResult(name, bool(err <= tol[name]), float(err), tol[name], dt))

    record("attenuation_bound", lambda: _bound(sp))
    record("reachability", lambda: _reachability(sp))
    record("containment", lambda: _containment(sp))
    record("route_jvp", lambda: _jvp(sp))
    return results
