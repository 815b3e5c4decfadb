"""Named weight tensors with a persistent binary prune mask."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ProtocolError


class ParameterSet:
    """Ordered ``{name: Tensor}`` plus a same-shaped 0/1 mask per tensor.

    Masked positions always hold exactly 0. Only names listed in
    ``prunable`` take part in magnitude pruning; the rest keep an all-ones
    mask.
    """

    def __init__(self, values, masks=None, prunable=None):
        self.tensors = {
            name: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=name)
            for name, v in values.items()
        }
        self.prunable = tuple(n for n in self.tensors if prunable is None or n in set(prunable))
        self.masks = {}
        for name, t in self.tensors.items():
            m = None if masks is None else masks.get(name)
            self.masks[name] = (np.ones(t.shape, dtype=bool) if m is None
                                else np.asarray(m, dtype=bool).copy())
        self.apply_mask()

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        """Plain ``{name: ndarray}`` view of the current weights."""
        return {n: t.data for n, t in self.tensors.items()}

    def shapes(self):
        return {n: t.shape for n, t in self.tensors.items()}

    def size(self):
        return int(sum(t.size for t in self.tensors.values()))

    def prunable_size(self):
        return int(sum(self.tensors[n].size for n in self.prunable))

    def active_count(self):
        return int(sum(m.sum() for m in self.masks.values()))

    def pruned_count(self):
        return int(sum((~self.masks[n]).sum() for n in self.prunable))

    def prune_fraction(self):
        n = self.prunable_size()
        return self.pruned_count() / n if n else 0.0

    def copy(self):
        return ParameterSet(self.values(), self.masks, self.prunable)

    def apply_mask(self):
        for name, t in self.tensors.items():
            m = self.masks[name]
            if not m.all():
                t.data = np.where(m, t.data, 0.0)

    def check_compatible(self, other):
        if self.shapes() != other.shapes():
            raise ProtocolError("parameter sets differ in names or shapes")

    def assign(self, other):
        """Overwrite weights and masks with copies of ``other``'s."""
        self.check_compatible(other)
        for name, t in other.tensors.items():
            self.tensors[name].data = t.data.copy()
            self.masks[name] = other.masks[name].copy()

    def sgd_step(self, grads, lr, velocity=None, momentum=0.0):
        """In-place SGD; masked coordinates receive no update."""
        for name, t in self.tensors.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.masks[name]
            if velocity is not None and momentum:
                v = velocity.get(name)
                v = g if v is None else momentum * v + g
                velocity[name] = v
                g = v
            step = lr * g
            if not m.all():
                step = np.where(m, step, 0.0)
            t.data = t.data - step

    def flat(self, names=None):
        names = self.prunable if names is None else names
        if not names:
            return np.zeros(0)
        return np.concatenate([self.tensors[n].data.reshape(-1) for n in names])

    def flat_mask(self, names=None):
        names = self.prunable if names is None else names
        if not names:
            return np.zeros(0, dtype=bool)
        return np.concatenate([self.masks[n].reshape(-1) for n in names])

    def set_flat_mask(self, mask, names=None):
        names = self.prunable if names is None else names
        off = 0
        for n in names:
            k = self.tensors[n].size
            self.masks[n] = np.asarray(mask[off:off + k], dtype=bool).reshape(self.tensors[n].shape).copy()
            off += k
        self.apply_mask()

    def set_flat(self, values, names=None):
        names = self.prunable if names is None else names
        off = 0
        for n in names:
            k = self.tensors[n].size
            self.tensors[n].data = np.asarray(values[off:off + k], dtype=np.float64).reshape(
                self.tensors[n].shape).copy()
            off += k
        self.apply_mask()

    def equals(self, other):
        if self.shapes() != other.shapes():
            return False
        return all(np.array_equal(t.data, other.tensors[n].data)
                   and np.array_equal(self.masks[n], other.masks[n])
                   for n, t in self.tensors.items())
