"""Named parameter collections partitioned into trainable groups.

Groups mirror the training choreography: the frozen encoder base (theta),
the always-on forgery experts (phi), the gated adversary experts (psi), and
the three heads.  Stage code flips per-group trainability and asserts
frozen groups via checksums.
"""

import hashlib

import numpy as np

from .tensor import ContractError, Tensor

GROUPS = ("theta", "phi", "psi", "adv_detector", "forgery_detector", "mask_decoder")


class ParamSet:
    def __init__(self):
        self._entries: dict[str, tuple[Tensor, str]] = {}

    def add(self, name: str, tensor: Tensor, group: str) -> Tensor:
        if group not in GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._entries[name] = (tensor, group)
        return tensor

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def tensor(self, name: str) -> Tensor:
        return self._entries[name][0]

    def group_of(self, name: str) -> str:
        return self._entries[name][1]

    def items(self, groups=None):
        """(name, tensor) pairs in insertion order, optionally filtered."""
        if groups is not None:
            groups = set(groups)
        for name, (tensor, group) in self._entries.items():
            if groups is None or group in groups:
                yield name, tensor

    def names(self, groups=None):
        return [name for name, _ in self.items(groups)]

    def set_trainable(self, groups):
        """Mark exactly the given groups trainable; everything else frozen."""
        groups = set(groups)
        for name, (tensor, group) in self._entries.items():
            tensor.requires_grad = group in groups
            tensor.grad = None

    def zero_grads(self):
        for _, (tensor, _) in self._entries.items():
            tensor.grad = None

    def checksum(self, groups=None) -> str:
        """SHA-256 over the raw bytes of the selected groups, in name order."""
        h = hashlib.sha256()
        for name, tensor in self.items(groups):
            h.update(name.encode())
            h.update(np.ascontiguousarray(tensor.data).tobytes())
        return h.hexdigest()

    def num_params(self, groups=None) -> int:
        return sum(t.data.size for _, t in self.items(groups))

    def copy(self) -> "ParamSet":
        """Deep copy (fresh arrays, same names/groups)."""
        out = ParamSet()
        for name, (tensor, group) in self._entries.items():
            out.add(name, Tensor(tensor.data.copy(), requires_grad=tensor.requires_grad), group)
        return out
