"""Newton-Raphson power flow, branch losses and voltage-limit counting.

The Newton iteration runs in the compiled ``_pfkernel`` extension when it is
built, otherwise in the numpy fallback ``_pfkernel_py``. :func:`set_backend`
switches between them at runtime (used by the benchmark and the tests).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _pfkernel_py

try:
    from . import _pfkernel as _compiled
except ImportError:  # extension not built
    _compiled = None

TOL = 1e-8
MAX_ITER = 50

_backend = _compiled if _compiled is not None else _pfkernel_py


def backend() -> str:
    return "compiled" if _backend is _compiled else "python"


def has_compiled() -> bool:
    return _compiled is not None


def set_backend(name: str) -> None:
    global _backend
    if name == "python":
        _backend = _pfkernel_py
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled power-flow kernel is not built")
        _backend = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")


@dataclass(frozen=True)
class PowerFlowSolution:
    vm: np.ndarray  # p.u.
    va: np.ndarray  # rad
    iterations: int
    max_mismatch: float
    converged: bool

    @property
    def voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


@dataclass(frozen=True)
class LossReport:
    p_loss: float  # MW
    q_loss: float  # MVar


def solve(Y, p, q, v_ref=1.0, tol=TOL, max_iter=MAX_ITER) -> PowerFlowSolution:
    """Solve for bus voltages given per-unit net injections ``p``, ``q``.

    Bus index 0 is the slack, held at ``v_ref`` with angle 0; its entries in
    ``p``/``q`` are ignored. Non-convergence is reported through
    ``converged=False``, never raised.
    """
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
        raise ValueError("admittance matrix must be square")
    if not 0.8 <= v_ref <= 1.2:
        raise ValueError(f"v_ref={v_ref} outside [0.8, 1.2]")
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (Y.shape[0],) or q.shape != (Y.shape[0],):
        raise ValueError("injection vectors must have one entry per bus")
    vm, va, it, norm, ok = _backend.newton_solve(Y, p, q, float(v_ref), float(tol), int(max_iter))
    return PowerFlowSolution(vm=vm, va=va, iterations=int(it), max_mismatch=float(norm), converged=bool(ok))


def bus_injections(Y, sol: PowerFlowSolution) -> np.ndarray:
    """Complex per-unit injection S_i = V_i conj(sum_j Y_ij V_j) at every bus."""
    v = sol.voltage
    return v * np.conj(np.asarray(Y) @ v)


def compute_losses(Y, sol: PowerFlowSolution, branches, base_mva=1.0) -> LossReport:
    """Branch-sum active/reactive series losses.

    ``branches`` is an iterable of ``(i, j)`` bus-index pairs; the branch
    conductance and susceptance are read back from the off-diagonal of ``Y``
    (``g + jb = -Y_ij``). Only series elements contribute, so shunt
    capacitors and line charging are excluded from ``q_loss``.
    """
    if not sol.converged:
        raise ValueError("losses are undefined for a non-converged solution")
    Y = np.asarray(Y)
    vm, va = sol.vm, sol.va
    p_loss = 0.0
    q_loss = 0.0
    for i, j in branches:
        y = -Y[i, j]
        drop = vm[i] ** 2 + vm[j] ** 2 - 2.0 * vm[i] * vm[j] * np.cos(va[i] - va[j])
        p_loss += y.real * drop
        q_loss += -y.imag * drop
    return LossReport(p_loss=float(p_loss) * base_mva, q_loss=float(q_loss) * base_mva)


def count_violations(vm, v_lo=0.95, v_hi=1.05) -> int:
    """Buses strictly above ``v_hi`` plus buses strictly below ``v_lo``."""
    if not v_lo < v_hi:
        raise ValueError("need v_lo < v_hi")
    vm = np.asarray(vm)
    return int(np.count_nonzero(vm > v_hi) + np.count_nonzero(vm < v_lo))
