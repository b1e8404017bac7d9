import math

import pytest
import torch

from pptformer.errors import BankStateError, ConfigError, ShapeError, SnapshotError
from pptformer.numerics import DTYPE, Rng
from pptformer.prototypes import PrototypeBank


def random_bank(seed=0, capacity=4, dim=6, count=40, **kwargs):
    rng = Rng(seed)
    bank = PrototypeBank(capacity, **kwargs)
    for _ in range(count):
        bank.observe(rng.normal((dim,)))
    return bank


def test_first_observation():
    bank = PrototypeBank(4)
    p = torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE)
    assert bank.observe(p) == 0
    assert torch.equal(bank.prototypes[0], p)
    assert bank.counts.tolist() == [1, 0, 0, 0]
    assert bank.dim == 3 and bank.size == 1


def test_moving_average_step():
    bank = PrototypeBank(1)
    x = torch.tensor([0.0, 2.0], dtype=DTYPE)
    y = torch.tensor([4.0, 0.0], dtype=DTYPE)
    bank.observe(x)
    bank.observe(y)
    assert torch.allclose(bank.prototypes[0], (x + y) / 2)
    assert int(bank.counts[0]) == 2
    # running mean squared distance of {x, y} to their mean
    assert abs(float(bank.variances[0]) - 5.0) < 1e-12


@pytest.mark.parametrize("capacity", [4, 64])
@pytest.mark.parametrize("seed", range(10))
def test_mean_identity_replay(capacity, seed):
    rng = Rng(seed)
    bank = PrototypeBank(capacity)
    assigned = {n: [] for n in range(capacity)}
    for i in range(500):
        p = rng.normal((5,))
        assigned[bank.observe(p)].append(p)
        assert abs(float(bank.weights.sum()) - 1.0) < 1e-9
    assert bank.total_count == 500
    for n, members in assigned.items():
        mean = torch.zeros(5, dtype=DTYPE)
        for p in members:
            mean += p
        mean /= len(members)
        assert (bank.prototypes[n] - mean).abs().max() < 1e-10
        assert int(bank.counts[n]) == len(members)


def test_weights_simplex_and_counts():
    rng = Rng(2)
    bank = PrototypeBank(8)
    for i in range(1, 60):
        bank.observe(rng.normal((3,)))
        assert abs(float(bank.weights.sum()) - 1.0) < 1e-9
        assert (bank.weights >= 0).all() and (bank.weights <= 1).all()
        assert bank.total_count == i


def test_arrival_order_allows_duplicates():
    bank = PrototypeBank(3)
    p = torch.ones(2, dtype=DTYPE)
    assert [bank.observe(p) for _ in range(3)] == [0, 1, 2]
    assert bank.size == 3


def test_dimension_mismatch():
    bank = PrototypeBank(2, dim=3)
    with pytest.raises(ShapeError):
        bank.observe(torch.zeros(4, dtype=DTYPE))


def test_empty_bank_queries():
    bank = PrototypeBank(2)
    with pytest.raises(BankStateError):
        bank.mixture_affinity(torch.zeros(2, dtype=DTYPE))
    with pytest.raises(BankStateError):
        bank.generate_pseudo(torch.zeros(2, dtype=DTYPE))


def test_invalid_parameters():
    with pytest.raises(ConfigError):
        PrototypeBank(0)
    with pytest.raises(ConfigError):
        PrototypeBank(4, alpha=1.5)
    with pytest.raises(ConfigError):
        PrototypeBank(4, mode="elementwise")


def test_affinity_at_center():
    bank = PrototypeBank(4)
    p = torch.tensor([0.3, -0.7], dtype=DTYPE)
    bank.observe(p)
    assert float(bank.mixture_affinity(p)) == 1.0


def test_affinity_far_away():
    bank = PrototypeBank(1)
    bank.observe(torch.zeros(2, dtype=DTYPE))
    bank.variances = torch.tensor([2.0], dtype=DTYPE)
    p = torch.tensor([10 * math.sqrt(2.0), 0.0], dtype=DTYPE)
    assert float(bank.mixture_affinity(p)) < 1e-6


def test_affinity_equidistant():
    bank = PrototypeBank(2)
    bank.observe(torch.tensor([1.0, 0.0], dtype=DTYPE))
    bank.observe(torch.tensor([-1.0, 0.0], dtype=DTYPE))
    bank.variances = torch.tensor([0.5, 0.5], dtype=DTYPE)
    p = torch.tensor([0.0, 0.5], dtype=DTYPE)
    d2 = 1.0 + 0.25
    assert abs(float(bank.mixture_affinity(p)) - math.exp(-d2 / (2 * 0.5))) < 1e-14


def test_affinity_monotone_along_ray():
    bank = PrototypeBank(1)
    center = torch.tensor([1.0, 2.0, -1.0], dtype=DTYPE)
    bank.observe(center)
    bank.variances = torch.tensor([0.7], dtype=DTYPE)
    direction = torch.tensor([0.6, 0.0, 0.8], dtype=DTYPE)
    values = [float(bank.mixture_affinity(center + t * direction)) for t in torch.linspace(0, 5, 30).tolist()]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_zero_variance_uses_floor():
    bank = PrototypeBank(2)
    bank.observe(torch.zeros(1, dtype=DTYPE))
    # nothing has spread yet, so the pooled variance is the floor itself
    assert torch.all(bank.effective_variances() == bank.variance_floor)


def test_single_member_slot_uses_pooled_variance():
    bank = PrototypeBank(2)
    for x, y in [(0, 0), (10, 0), (12, 0), (8, 0), (10, 2)]:
        bank.observe(torch.tensor([x, y], dtype=DTYPE))
    assert bank.counts.tolist() == [1, 4]
    # slot 0 borrows the count-weighted mean (1 * 0 + 4 * 2.75) / 5
    assert torch.allclose(bank.effective_variances(), torch.tensor([2.2, 2.75], dtype=DTYPE), atol=1e-12)
    expected = 0.2 * math.exp(-1.0 / (2 * 2.2)) + 0.8 * math.exp(-(81 + 0.25) / (2 * 2.75))
    assert abs(float(bank.mixture_affinity(torch.tensor([1.0, 0.0], dtype=DTYPE))) - expected) < 1e-12


def test_pseudo_at_center_is_identity():
    bank = PrototypeBank(4)
    p = torch.tensor([0.5, 1.5, -2.0], dtype=DTYPE)
    bank.observe(p)
    assert torch.equal(bank.generate_pseudo(p), p)


def test_pseudo_far_away_halves():
    bank = PrototypeBank(1, alpha=0.5)
    bank.observe(torch.zeros(2, dtype=DTYPE))
    bank.variances = torch.tensor([0.1], dtype=DTYPE)
    p = torch.tensor([30.0, -40.0], dtype=DTYPE)
    assert torch.allclose(bank.generate_pseudo(p), 0.5 * p, atol=1e-12)


def test_pseudo_composes_affinity():
    bank = random_bank(seed=4)
    p = Rng(9).normal((6,))
    factor = bank.alpha + (1 - bank.alpha) * bank.mixture_affinity(p)
    assert torch.allclose(bank.generate_pseudo(p), p * factor, atol=1e-15)


def test_pseudo_keeps_shape():
    bank = random_bank(seed=5)
    p = Rng(1).normal((2, 3))
    assert bank.generate_pseudo(p).shape == (2, 3)


@pytest.mark.parametrize("mode", ["scale", "mixture", "density"])
def test_alpha_one_is_identity(mode):
    bank = random_bank(seed=6, alpha=1.0, mode=mode)
    p = Rng(3).normal((6,))
    assert torch.allclose(bank.generate_pseudo(p), p, atol=1e-15)


def test_mixture_mode_moves_towards_prototypes():
    bank = random_bank(seed=7, mode="mixture", alpha=0.25)
    p = Rng(8).normal((6,))
    r = bank.responsibilities(p)
    assert abs(float(r.sum()) - 1.0) < 1e-12
    expected = 0.25 * p + 0.75 * (r @ bank.prototypes)
    assert torch.allclose(bank.generate_pseudo(p), expected, atol=1e-14)


def test_density_mode_closed_form():
    bank = PrototypeBank(1, mode="density", alpha=0.5)
    center = torch.zeros(2, dtype=DTYPE)
    bank.observe(center)
    bank.variances = torch.tensor([0.25], dtype=DTYPE)
    expected = -math.log(2 * math.pi * 0.25)
    assert abs(float(bank.log_density(center)) - expected) < 1e-12
    assert abs(float(bank.factor(center)) - (0.5 + 0.5 * math.exp(expected))) < 1e-12


def test_perturb_full_step_lands_on_prototype():
    bank = PrototypeBank(1, eta=1.0)
    target = torch.tensor([2.0, -1.0], dtype=DTYPE)
    bank.observe(target)
    p = torch.tensor([0.0, 5.0], dtype=DTYPE)
    assert torch.allclose(bank.perturb(p, Rng(0)), target)
    assert bank.perturb(p, None) is p


def test_snapshot_round_trip():
    bank = random_bank(seed=12, capacity=5, dim=4, count=30)
    restored = PrototypeBank.restore(bank.snapshot())
    assert torch.equal(restored.prototypes, bank.prototypes)
    assert torch.equal(restored.variances, bank.variances)
    assert torch.equal(restored.weights, bank.weights)
    assert torch.equal(restored.counts, bank.counts)
    assert restored.dim == 4


def test_snapshot_empty_bank():
    restored = PrototypeBank.restore(PrototypeBank(8).snapshot())
    assert restored.is_empty
    assert restored.capacity == 8
    assert restored.dim is None


def test_snapshot_truncated():
    data = random_bank(seed=1, capacity=3, dim=2, count=5).snapshot()
    for cut in range(len(data)):
        with pytest.raises(SnapshotError):
            PrototypeBank.restore(data[:cut])


def test_snapshot_corrupt():
    data = random_bank(seed=1, capacity=3, dim=2, count=5).snapshot()
    with pytest.raises(SnapshotError) as excinfo:
        PrototypeBank.restore(b"XXXX" + data[4:])
    assert excinfo.value.offset == 0
    with pytest.raises(SnapshotError):
        PrototypeBank.restore(data + b"\x00")


def test_mixture_gradient_survives_later_observations():
    bank = random_bank(seed=13, mode="mixture", alpha=0.25)
    p = Rng(2).normal((6,)).requires_grad_()
    out = bank.generate_pseudo(p)
    bank.observe(Rng(3).normal((6,)))
    out.sum().backward()
    assert torch.isfinite(p.grad).all()
