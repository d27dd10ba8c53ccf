"""Tiny module system: a graph node owns numpy parameter arrays and child
modules, both tracked in attribute-assignment order so parameter walks (and
therefore weights files) are deterministic.
"""

import numpy as np


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        params = self.__dict__.get("_params")
        if params is not None:
            params.pop(name, None)
            self._children.pop(name, None)
            if isinstance(value, np.ndarray):
                params[name] = value
            elif isinstance(value, Module):
                self._children[name] = value
        object.__setattr__(self, name, value)

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def named_params(self, prefix=""):
        """Yield (dotted_name, array) over the whole subtree, deterministic order."""
        for k, v in self._params.items():
            yield prefix + k, v
        for k, child in self._children.items():
            yield from child.named_params(prefix + k + ".")

    def children(self):
        return self._children.values()

    def deploy(self):
        """Return an inference-form copy of the subtree.

        The default recurses into children; blocks that fuse override this.
        Parameter arrays are shared with the source module, never copied,
        so deploying is cheap and the train form stays usable.
        """
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        object.__setattr__(new, "_params", dict(self._params))
        object.__setattr__(new, "_children", {})
        for k, child in self._children.items():
            setattr(new, k, child.deploy())
        return new

    def param_count(self):
        """Learnable parameters only: conv weights/biases and BN affine terms.

        Running statistics are state, not parameters, and are excluded.
        Leaf modules that carry stats override accordingly.
        """
        total = sum(int(v.size) for v in self._params.values())
        return total + sum(c.param_count() for c in self._children.values())


class ModuleList(Module):
    """Ordered container registering children under numeric names."""

    def __init__(self, mods=()):
        super().__init__()
        self._n = 0
        for m in mods:
            self.append(m)

    def append(self, m):
        setattr(self, str(self._n), m)
        object.__setattr__(self, "_n", self._n + 1)

    def __len__(self):
        return self._n

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __getitem__(self, i):
        return getattr(self, str(range(self._n)[i]))

    def deploy(self):
        new = ModuleList()
        for m in self:
            new.append(m.deploy())
        return new

    def forward(self, x):
        for m in self:
            x = m(x)
        return x
