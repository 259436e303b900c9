"""Shared finite-difference helpers for parameter gradient tests."""
import numpy as np

from freqad import autograd as ag


def fd_param_grads(build_loss, params, h=1e-5):
    """Central differences of a scalar loss wrt each Parameter tensor.

    ``build_loss`` is re-invoked after every in-place perturbation and must
    read the parameter values fresh each time.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with ag.no_grad():
                hi = float(build_loss())
            flat[i] = orig - h
            with ag.no_grad():
                lo = float(build_loss())
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(engine, numeric, rtol=1e-4, atol=1e-8, names=None):
    for idx, (e, n) in enumerate(zip(engine, numeric)):
        label = names[idx] if names else str(idx)
        denom = np.maximum(np.abs(n), np.abs(e))
        err = np.abs(e - n)
        bad = err > rtol * denom + atol
        assert not np.any(bad), (
            f"gradient mismatch for {label}: max abs err {err.max():.3e}, "
            f"worst rel {np.max(err / np.maximum(denom, 1e-300)):.3e}"
        )
