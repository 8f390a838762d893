import math

import pytest
import torch

from regdit import ops
from regdit.exceptions import ContractError, DimensionError


def leaf(shape, seed, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(torch.zeros(2, 3), torch.zeros(4, 5))


def test_linear_matches_manual():
    x, w, b = torch.randn(5, 3), torch.randn(4, 3), torch.randn(4)
    assert torch.allclose(ops.linear(x, w, b), x @ w.T + b)
    with pytest.raises(DimensionError):
        ops.linear(torch.zeros(2, 5), w)


def test_layer_norm_constant_row_maps_to_beta():
    x = torch.full((2, 6), 3.25, dtype=torch.float64)
    beta = torch.arange(6, dtype=torch.float64)
    y = ops.layer_norm(x, torch.ones(6, dtype=torch.float64), beta)
    assert torch.equal(y, beta.expand(2, 6))


def test_layer_norm_moments():
    x = torch.randn(7, 32, dtype=torch.float64) * 5 + 2
    y = ops.layer_norm(x, eps=1e-12)
    assert torch.allclose(y.mean(-1), torch.zeros(7, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(7, dtype=torch.float64), atol=1e-9)
    with pytest.raises(ContractError):
        ops.layer_norm(x, eps=0.0)


def test_softmax_is_stable_and_normalized():
    x = torch.tensor([[1000.0, 1000.0, -1000.0]])
    p = ops.softmax(x)
    assert torch.isfinite(p).all()
    assert torch.allclose(p, torch.tensor([[0.5, 0.5, 0.0]]))


def test_gelu_erf_form():
    x = torch.linspace(-4, 4, 17, dtype=torch.float64)
    ref = torch.nn.functional.gelu(x)
    assert torch.allclose(ops.gelu(x), ref, atol=1e-12)


def test_attention_uniform_when_keys_equal():
    q = torch.randn(1, 4, 8)
    k = torch.ones(1, 5, 8)
    v = torch.randn(1, 5, 8)
    out, w = ops.attention(q, k, v, return_weights=True)
    assert torch.allclose(w, torch.full((1, 4, 5), 0.2))
    assert torch.allclose(out, v.mean(1, keepdim=True).expand(1, 4, 8), atol=1e-6)


def test_token_concat_and_slice():
    a, b = torch.randn(2, 3, 4), torch.randn(2, 5, 4)
    c = ops.concat_tokens([a, b])
    assert c.shape == (2, 8, 4)
    assert torch.equal(ops.slice_tokens(c, 3, 8), b)
    with pytest.raises(DimensionError):
        ops.concat_tokens([a, torch.randn(2, 1, 5)])
    with pytest.raises(DimensionError):
        ops.slice_tokens(c, 4, 9)


def test_embedding_range_check():
    table = torch.randn(5, 3)
    assert torch.equal(ops.embedding(table, torch.tensor([4, 0])), table[[4, 0]])
    with pytest.raises(DimensionError):
        ops.embedding(table, torch.tensor([5]))


def test_grad_check_requires_float64_and_scalar():
    p = torch.randn(3, requires_grad=True)
    with pytest.raises(ContractError):
        ops.grad_check(lambda: (p * p).sum(), [p])
    q = leaf(3, 0)
    with pytest.raises(ContractError):
        ops.grad_check(lambda: q * 2, [q])


def test_grad_check_flags_a_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x

    p = leaf(4, 1) + 2.0
    p = p.detach().requires_grad_(True)
    assert ops.grad_check(lambda: Wrong.apply(p).sum(), [p]) > 0.1


def _probe(out, seed):
    """Fixed random weighting so constant-sum outputs still have informative gradients."""
    g = torch.Generator().manual_seed(seed + 999)
    return (out * torch.randn(out.shape, generator=g, dtype=out.dtype)).sum()


PRIMITIVES = {
    "matmul": (lambda a, b: ops.matmul(a, b), [(3, 4), (4, 5)]),
    "linear": (lambda x, w, b: ops.linear(x, w, b), [(2, 3, 4), (5, 4), (5,)]),
    "add": (lambda a, b: ops.add(a, b) ** 2, [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ops.mul(a, b), [(3, 4), (3, 4)]),
    "gelu": (lambda x: ops.gelu(x), [(4, 6)]),
    "silu": (lambda x: ops.silu(x), [(4, 6)]),
    "row_mean": (lambda x: ops.row_mean(x) ** 2, [(4, 6)]),
    "layer_norm": (lambda x, g, b: ops.layer_norm(x, g, b), [(3, 8), (8,), (8,)]),
    "softmax": (lambda x: ops.softmax(x), [(3, 7)]),
    "attention": (lambda q, k, v: ops.attention(q, k, v), [(2, 4, 8), (2, 5, 8), (2, 5, 8)]),
    "concat_tokens": (lambda a, b: ops.concat_tokens([a, b]) ** 2, [(2, 3, 4), (2, 2, 4)]),
    "slice_tokens": (lambda x: ops.slice_tokens(x, 1, 4) ** 2, [(2, 5, 4)]),
    "embedding": (lambda t: ops.embedding(t, torch.tensor([2, 0, 2, 4])) ** 2, [(5, 3)]),
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, seed):
    fn, shapes = PRIMITIVES[name]
    args = [leaf(s, 100 * seed + i) for i, s in enumerate(shapes)]
    assert ops.grad_check(lambda: _probe(fn(*args), seed), args) <= 1e-4


def test_directional_grad_check_agrees_and_flags():
    a, b = leaf((3, 4), 0), leaf(4, 1)
    f = lambda: _probe(ops.gelu(ops.linear(a, b.reshape(1, 4))), 0)
    g = torch.Generator().manual_seed(0)
    assert ops.grad_check(f, [a, b], directional=True, generator=g) <= 1e-6
    before = a.detach().clone()
    ops.grad_check(f, [a], directional=True)
    assert torch.equal(a.detach(), before)


def test_directional_grad_check_flags_wrong_and_missing_gradients():
    class Half(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x

    class Dropped(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.sin()

        @staticmethod
        def backward(ctx, g):
            return torch.zeros_like(g)

    p = (leaf(6, 3) + 3.0).detach().requires_grad_(True)
    assert ops.grad_check(lambda: Half.apply(p).sum(), [p], directional=True) > 0.1
    assert ops.grad_check(lambda: Dropped.apply(p).sum() + p.sum(), [p], directional=True) > 0.1


@pytest.mark.parametrize("seed", range(10))
def test_multihead_attention_gradients(seed):
    x = leaf((2, 5, 8), seed)
    qkv_w, qkv_b = leaf((24, 8), seed + 10, 0.3), leaf(16, seed + 20, 0.1)
    pw, pb = leaf((8, 8), seed + 30, 0.3), leaf(8, seed + 40, 0.1)
    f = lambda: ops.multihead_attention(x, qkv_w, qkv_b, pw, pb, heads=2).pow(2).sum()
    assert ops.grad_check(f, [x, qkv_w, qkv_b, pw, pb]) <= 1e-4


def test_silu_row_mean_add_mul_values():
    x = torch.tensor([[0.0, 1.0, -2.0]], dtype=torch.float64)
    assert torch.allclose(ops.silu(x), x / (1 + torch.exp(-x)))
    assert ops.row_mean(x).item() == pytest.approx(-1.0 / 3.0)
    assert torch.equal(ops.add(x, x), 2 * x)
    assert torch.equal(ops.mul(x, x), x * x)
    assert math.isclose(float(ops.gelu(torch.tensor(0.0))), 0.0)
