import math

import numpy as np
import torch

from pptformer.errors import BankStateError, ConfigError, ShapeError, SnapshotError
from pptformer.numerics import DTYPE

SNAPSHOT_MAGIC = b"PPTB"
SNAPSHOT_VERSION = 1
PSEUDO_MODES = ("scale", "mixture", "density")


class PrototypeBank:
    """Online sequential clustering of perspective descriptors.

    Every slot n keeps a prototype P_n (the running mean of the descriptors
    assigned to it), a count c_n, an isotropic variance Sigma_n (running mean
    squared distance to P_n) and a mixture weight pi_n = c_n / sum(c). The first
    `capacity` observations initialize the slots in arrival order; afterwards
    each observation goes to the nearest prototype in L2.

    Args:
        capacity: number of prototypes N
        dim: descriptor length, or None to take it from the first observation
        alpha: smoothing of the pseudo-perspective modulation, in [0, 1]
        eta: step towards a sampled prototype for the stochastic variant (0 disables it)
        mode: "scale", "mixture" or "density"
        variance_floor: lower bound on every Sigma_n used by queries
    """

    def __init__(self, capacity, dim=None, alpha=0.5, eta=0.0, mode="scale", variance_floor=1e-6):
        if capacity < 1:
            raise ConfigError(f"prototype capacity must be >= 1, got {capacity}")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
        if eta < 0.0 or eta > 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {eta}")
        if mode not in PSEUDO_MODES:
            raise ConfigError(f"pseudo mode {mode} not supported")
        self.capacity = capacity
        self.alpha = alpha
        self.eta = eta
        self.mode = mode
        self.variance_floor = variance_floor
        self.counts = torch.zeros(capacity, dtype=torch.int64)
        self.variances = torch.zeros(capacity, dtype=DTYPE)
        self.weights = torch.zeros(capacity, dtype=DTYPE)
        self._allocate(dim)

    def _allocate(self, dim):
        self._dim = dim
        self.prototypes = torch.zeros(self.capacity, dim or 0, dtype=DTYPE)

    @property
    def dim(self):
        return self._dim

    @property
    def size(self):
        return int((self.counts > 0).sum())

    @property
    def total_count(self):
        return int(self.counts.sum())

    @property
    def is_empty(self):
        return self.size == 0

    def _as_vector(self, p):
        v = p.reshape(-1).to(DTYPE)
        if self._dim is not None and v.numel() != self._dim:
            raise ShapeError(f"descriptor has {v.numel()} values, the bank holds {self._dim}-dimensional prototypes")
        return v

    def observe(self, p):
        """Assign p to a slot and update that slot's mean, variance and the mixture weights.

        Returns:
            index of the slot p was assigned to
        """
        with torch.no_grad():
            if self._dim is None:
                self._allocate(p.numel())
            x = self._as_vector(p).detach()
            filled = self.size
            if filled < self.capacity:
                n = filled
                self.prototypes[n] = x
                self.counts[n] = 1
                self.variances[n] = 0.0
            else:
                n = int(torch.argmin(((self.prototypes - x) ** 2).sum(dim=1)))
                c_old = int(self.counts[n])
                c_new = c_old + 1
                mean_old = self.prototypes[n].clone()
                mean_new = mean_old + (x - mean_old) / c_new
                # Welford on the squared distance summed over coordinates
                self.variances[n] = (c_old * self.variances[n] + torch.dot(x - mean_old, x - mean_new)) / c_new
                self.prototypes[n] = mean_new
                self.counts[n] = c_new
            self.weights = self.counts.to(DTYPE) / self.counts.sum()
        return n

    def effective_variances(self):
        """Sigma_n with the floor applied; slots without spread fall back to the count-weighted pooled variance."""
        counts = self.counts.to(DTYPE)
        total = counts.sum()
        pooled = float((counts * self.variances).sum() / total) if total > 0 else 0.0
        pooled = max(pooled, self.variance_floor)
        var = torch.where(self.variances > 0, self.variances, torch.full_like(self.variances, pooled))
        return var.clamp_min(self.variance_floor)

    def _log_kernels(self, p):
        if self.is_empty:
            raise BankStateError("prototype bank has no initialized slot")
        v = self._as_vector(p)
        active = self.counts > 0
        var = self.effective_variances()[active]
        sq_dist = ((self.prototypes[active] - v) ** 2).sum(dim=1)
        return torch.log(self.weights[active]) - sq_dist / (2 * var), active, var

    def mixture_affinity(self, p):
        """G = sum_n pi_n exp(-|p - P_n|^2 / (2 Sigma_n)), in (0, 1]."""
        log_terms, _, _ = self._log_kernels(p)
        return torch.exp(torch.logsumexp(log_terms, dim=0))

    def log_density(self, p):
        """Log of the normalized isotropic Gaussian mixture density at p."""
        log_terms, _, var = self._log_kernels(p)
        dim = self._as_vector(p).numel()
        return torch.logsumexp(log_terms - 0.5 * dim * torch.log(2 * math.pi * var), dim=0)

    def responsibilities(self, p):
        log_terms, active, _ = self._log_kernels(p)
        r = torch.zeros(self.capacity, dtype=DTYPE)
        r[active] = torch.softmax(log_terms, dim=0)
        return r

    def modulation(self, p):
        return self.alpha + (1.0 - self.alpha) * self.mixture_affinity(p)

    def perturb(self, p, rng=None):
        """Move p a step eta towards a prototype drawn with probabilities pi; identity without rng or eta."""
        if self.eta == 0 or rng is None:
            return p
        if self.is_empty:
            raise BankStateError("prototype bank has no initialized slot")
        v = self._as_vector(p)
        n = rng.choice(self.capacity, p=self.weights.numpy())
        return (v + self.eta * (self.prototypes[n] - v)).reshape(p.shape)

    def factor(self, p):
        """Scalar multiplier of the "scale" and "density" readings."""
        if self.mode == "density":
            # underflows to alpha for long descriptors
            return self.alpha + (1.0 - self.alpha) * torch.exp(self.log_density(p))
        return self.modulation(p)

    def generate_pseudo(self, p, rng=None):
        """Pseudo perspective p' of the same shape as p.

        "scale" and "density" multiply p by factor(p); "mixture" moves p towards the
        responsibility-weighted prototype mean. With eta > 0 and an rng, p is first
        perturbed towards a sampled prototype.
        """
        if self.is_empty:
            raise BankStateError("prototype bank has no initialized slot")
        v = self._as_vector(self.perturb(p, rng))
        if self.mode == "mixture":
            # later observations update the prototypes in place while this graph is alive
            mix = self.responsibilities(v) @ self.prototypes.clone()
            out = self.alpha * v + (1.0 - self.alpha) * mix
        else:
            out = v * self.factor(v)
        return out.reshape(p.shape)

    def snapshot(self):
        """Serialize to bytes: header (magic, version, N, dim) then little-endian P, Sigma, pi as f8 and c as u8."""
        dim = self._dim or 0
        header = np.array([SNAPSHOT_VERSION, self.capacity, dim], dtype="<u4").tobytes()
        return b"".join([
            SNAPSHOT_MAGIC,
            header,
            self.prototypes.numpy().astype("<f8").tobytes(),
            self.variances.numpy().astype("<f8").tobytes(),
            self.weights.numpy().astype("<f8").tobytes(),
            self.counts.numpy().astype("<u8").tobytes(),
        ])

    @classmethod
    def restore(cls, data, alpha=0.5, eta=0.0, mode="scale", variance_floor=1e-6):
        reader = _SnapshotReader(data)
        if reader.take(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise SnapshotError("bad magic, not a prototype bank snapshot", 0)
        version, capacity, dim = (int(v) for v in reader.array("<u4", 3))
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}", len(SNAPSHOT_MAGIC))
        if capacity < 1:
            raise SnapshotError(f"capacity must be >= 1, got {capacity}", len(SNAPSHOT_MAGIC) + 4)
        bank = cls(capacity, dim=dim or None, alpha=alpha, eta=eta, mode=mode, variance_floor=variance_floor)
        bank.prototypes = torch.from_numpy(reader.array("<f8", capacity * dim).astype(np.float64)).reshape(capacity, dim)
        bank.variances = torch.from_numpy(reader.array("<f8", capacity).astype(np.float64))
        bank.weights = torch.from_numpy(reader.array("<f8", capacity).astype(np.float64))
        bank.counts = torch.from_numpy(reader.array("<u8", capacity).astype(np.int64))
        if reader.offset != len(data):
            raise SnapshotError(f"{len(data) - reader.offset} trailing bytes", reader.offset)
        return bank


class _SnapshotReader:
    def __init__(self, data):
        self.data = bytes(data)
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.data):
            raise SnapshotError(f"truncated snapshot, expected {n} more bytes", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def array(self, dtype, count):
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()
