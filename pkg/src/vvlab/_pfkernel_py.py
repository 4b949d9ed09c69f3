"""Pure-numpy Newton-Raphson kernel; used when the compiled ``_pfkernel`` is absent."""
import numpy as np

VM_FLOOR = 0.3
VM_CEIL = 3.0


def power_injections(Y, vm, va):
    v = vm * np.exp(1j * va)
    return v * np.conj(Y @ v)


def mismatch(Y, vm, va, p, q):
    """Stacked [dP; dQ] over the PQ buses (every bus but index 0)."""
    s = power_injections(Y, vm, va)
    return np.concatenate([s.real[1:] - p[1:], s.imag[1:] - q[1:]])


def jacobian(Y, vm, va):
    """d[P; Q]/d[theta; |V|] restricted to the PQ buses."""
    v = vm * np.exp(1j * va)
    ibus = Y @ v
    diag_v = np.diag(v)
    diag_vnorm = np.diag(v / vm)
    dS_dvm = diag_v @ np.conj(Y @ diag_vnorm) + np.diag(np.conj(ibus)) @ diag_vnorm
    dS_dva = 1j * diag_v @ np.conj(np.diag(ibus) - Y @ diag_v)
    pq = slice(1, None)
    return np.block([
        [dS_dva.real[pq, pq], dS_dvm.real[pq, pq]],
        [dS_dva.imag[pq, pq], dS_dvm.imag[pq, pq]],
    ])


def newton_solve(Y, p, q, v_ref, tol, max_iter):
    """Returns (vm, va, iterations, max_mismatch, converged)."""
    n = Y.shape[0]
    vm = np.ones(n)
    vm[0] = v_ref
    va = np.zeros(n)
    if n == 1:
        return vm, va, 1, 0.0, True
    m = n - 1
    norm = np.inf
    for it in range(1, max_iter + 1):
        f = mismatch(Y, vm, va, p, q)
        norm = float(np.max(np.abs(f)))
        if not np.isfinite(norm):
            return vm, va, it, norm, False
        if norm <= tol:
            return vm, va, it, norm, True
        try:
            dx = np.linalg.solve(jacobian(Y, vm, va), -f)
        except np.linalg.LinAlgError:
            return vm, va, it, norm, False
        va[1:] += dx[:m]
        vm[1:] += dx[m:]
        if np.any(vm[1:] < VM_FLOOR) or np.any(vm[1:] > VM_CEIL) or not np.all(np.isfinite(vm)):
            return vm, va, it, norm, False
    return vm, va, max_iter, norm, False
