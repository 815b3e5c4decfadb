"""Central finite-difference verification of analytic gradients."""
import numpy as np

from ..errors import ContractError, GradCheckError
from .tensor import gradients


def _named(params):
    return dict(getattr(params, "tensors", params))


def finite_difference_check(loss_fn, params, epsilon=1e-5, samples=50, seed=0):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from
    the tensors in ``params`` (a ``{name: Tensor}`` mapping or a
    ParameterSet). Up to ``samples`` coordinates are drawn uniformly over
    all parameters. Returns the largest
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractError("epsilon must lie in (0, 1e-2]")
    named = _named(params)
    base = loss_fn()
    again = loss_fn()
    if base.item() != again.item():
        raise GradCheckError(
            f"loss_fn is not deterministic: {base.item()!r} != {again.item()!r}; "
            "reseed any randomness inside loss_fn"
        )
    analytic = gradients(base, named)

    coords = [(name, i) for name, t in named.items() for i in range(t.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > samples:
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        flat = named[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_fn().item()
        flat[i] = orig - epsilon
        down = loss_fn().item()
        flat[i] = orig
        num = (up - down) / (2.0 * epsilon)
        ana = float(analytic[name].reshape(-1)[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, rel)
    return worst
