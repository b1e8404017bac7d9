import math

import numpy as np
import torch
import torch.nn.functional as F

from pptformer.errors import ShapeError

DTYPE = torch.float64


class Rng:
    """Deterministic random stream built on numpy's PCG64 generator.

    PCG64 is integer based, so the same seed and the same sequence of calls give
    bit-identical output on every platform. Tensors are returned as float64.
    """

    def __init__(self, seed):
        if seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def spawn(self, index):
        """Child stream for the index-th sample, independent of the order children are created in."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(int(index),)))
        )
        return child

    def normal(self, shape, scale=1.0):
        return torch.from_numpy(self.generator.normal(0.0, scale, size=shape)).to(DTYPE)

    def uniform(self, low=0.0, high=1.0, shape=None):
        if shape is None:
            return float(self.generator.uniform(low, high))
        return torch.from_numpy(self.generator.uniform(low, high, size=shape)).to(DTYPE)

    def integers(self, low, high, size=None):
        out = self.generator.integers(low, high, size=size)
        return int(out) if size is None else out

    def choice(self, n, p=None):
        return int(self.generator.choice(n, p=p))


def stable_softmax(x, dim=-1):
    # max-subtraction keeps exp() in range for large logits
    shifted = x - x.amax(dim=dim, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def softmax_rows(m):
    """Row-wise softmax of a rank-2 tensor; every output row is non-negative and sums to 1."""
    if m.dim() != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 tensor, got shape {tuple(m.shape)}")
    return stable_softmax(m, dim=1)


def conv2d_same(input, kernel, stride=1):
    """Zero-padded 2-D correlation.

    Args:
        input: tensor of shape (H, W, C), or a batch (N, H, W, C)
        kernel: tensor of shape (kh, kw, C, C') with odd kh and kw
        stride: positive int

    Returns:
        tensor of shape (ceil(H / stride), ceil(W / stride), C'), with the batch dimension kept
    """
    if input.dim() not in (3, 4) or kernel.dim() != 4:
        raise ShapeError(f"conv2d_same expects HxWxC input and khxkwxCxC' kernel, got {tuple(input.shape)} and {tuple(kernel.shape)}")
    kh, kw, c_in, _ = kernel.shape
    if input.shape[-1] != c_in:
        raise ShapeError(f"channel mismatch: input has {input.shape[-1]} channels, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd for same padding, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    batched = input.dim() == 4
    x = input.permute(0, 3, 1, 2) if batched else input.permute(2, 0, 1).unsqueeze(0)
    w = kernel.permute(3, 2, 0, 1)
    out = F.conv2d(x, w, stride=stride, padding=(kh // 2, kw // 2))
    return out.permute(0, 2, 3, 1) if batched else out.squeeze(0).permute(1, 2, 0)


def filter2d_same(x, kernel):
    """Zero-padded same-size correlation of every (H, W) plane of x with one 2-D kernel."""
    if x.dim() < 2:
        raise ShapeError(f"filter2d_same expects at least 2 dimensions, got shape {tuple(x.shape)}")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd for same padding, got {kh}x{kw}")
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    planes = x.reshape(-1, 1, h, w)
    out = F.conv2d(planes, kernel.to(x.dtype)[None, None], padding=(kh // 2, kw // 2))
    return out.reshape(*lead, h, w)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function f at x, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + h
            f_plus = float(f(x))
            flat[i] = original - h
            f_minus = float(f(x))
            flat[i] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(f"function is not finite around coordinate {i}")
            grad[i] = (f_plus - f_minus) / (2 * h)
    return grad.view_as(x)


def sample_coordinates(params, count, rng):
    """Pick `count` (parameter index, flat index) pairs spread round-robin over params."""
    coords = []
    for k in range(count):
        p_idx = k % len(params)
        coords.append((p_idx, rng.integers(0, params[p_idx].numel())))
    return coords


def gradient_check(f, params, coords, h=1e-5, floor=1e-5):
    """Compare autograd against central differences on selected coordinates.

    Args:
        f: callable without arguments returning a scalar tensor computed from params
        params: list of leaf tensors requiring grad
        coords: list of (parameter index, flat index) pairs
        h: finite-difference step
        floor: gradients smaller than this are compared in absolute terms

    Returns:
        list of relative errors, one per coordinate
    """
    analytic = torch.autograd.grad(f(), params, allow_unused=True)
    errors = []
    with torch.no_grad():
        for p_idx, flat_idx in coords:
            flat = params[p_idx].data.view(-1)
            original = flat[flat_idx].item()
            flat[flat_idx] = original + h
            f_plus = float(f())
            flat[flat_idx] = original - h
            f_minus = float(f())
            flat[flat_idx] = original
            numeric = (f_plus - f_minus) / (2 * h)
            grad = analytic[p_idx]
            a = 0.0 if grad is None else grad.reshape(-1)[flat_idx].item()
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return errors
