import itertools

import pytest
import torch

from regdit import ops
from regdit.diffusion import UNCONDITIONAL
from regdit.exceptions import ConfigError, DimensionError
from regdit.model import (
    ForwardTrace, ModelConfig, RegisterConfig, RegisterDiT, capture_activations,
    forward_denoise, patch_positions, sincos_2d)
from regdit.training import batch_loss

GRID_R = (0, 8, 16, 24)
GRID_B = (1, 4, 36, 100)


def tiny(R, b, depth, **kw):
    cfg = ModelConfig(depth=depth, width=16, heads=2, token_count=16, token_dim=4,
                      registers=RegisterConfig(R, b), freq_dim=8, **kw)
    return RegisterDiT(cfg, seed=0).double()


def _structure(R, b, depth):
    model = tiny(R, b, depth)
    N, d = 16, 4
    g = torch.Generator().manual_seed(R * 1000 + b)
    # open the zero-initialized gates so every path carries signal
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.05)
    z = torch.randn(2, N, d, generator=g, dtype=torch.float64)
    trace = ForwardTrace()
    out = model(z, torch.tensor([0.3, 0.8]), torch.tensor([1, 3]), capture=[depth - 1], trace=trace)
    assert out.shape == (2, N, d)
    assert trace.seq_lens == [N if i < b else N + R for i in range(depth)]
    last = trace.hidden[depth - 1]
    assert last.shape[1] == N + R
    loss = (out ** 2).sum()
    grad = torch.autograd.grad(loss, last)[0]
    assert torch.count_nonzero(grad[:, N:]) == 0
    assert torch.count_nonzero(grad[:, :N]) > 0
    base = tiny(0, b, depth).n_params()
    assert model.n_params() - base == R * 16


@pytest.mark.parametrize("R,b", list(itertools.product(GRID_R, GRID_B)))
def test_register_grid_structure(R, b):
    # register count R over the first set, start block b over the second
    _structure(R, b, depth=101)


@pytest.mark.parametrize("R,b", list(itertools.product((1, 4, 36, 100), (0, 8, 16, 24))))
def test_register_grid_structure_transposed(R, b):
    # the same grid read the other way round, on a 28-block stack
    _structure(R, b, depth=28)


def test_invalid_configs_are_rejected():
    with pytest.raises(ConfigError, match="start_block"):
        ModelConfig(depth=8, registers=RegisterConfig(4, 8)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(width=30, heads=8).validate()
    with pytest.raises(ConfigError):
        ModelConfig(token_count=10).validate()
    with pytest.raises(ConfigError):
        ModelConfig(conditioning="cross").validate()


def test_wrong_latent_shape_raises():
    m = tiny(4, 1, 4)
    with pytest.raises(DimensionError):
        m(torch.zeros(1, 15, 4, dtype=torch.float64), torch.zeros(1), torch.zeros(1, dtype=torch.long))


def test_zero_init_output_and_identity_blocks():
    m = tiny(4, 1, 4)
    z = torch.randn(3, 16, 4, dtype=torch.float64)
    out = m(z, torch.rand(3), torch.tensor([0, 1, UNCONDITIONAL]))
    assert torch.count_nonzero(out) == 0
    trace = capture_activations(m, z, torch.rand(3), torch.tensor([0, 1, 2]), layer_set="all")
    # gates start at zero, so each block passes its input through
    first = trace.hidden[0]
    assert torch.equal(trace.hidden[3][:, :16], first[:, :16])


def test_in_context_prepends_two_tokens():
    m = tiny(3, 1, 4, conditioning="in_context")
    trace = capture_activations(m, torch.randn(2, 16, 4, dtype=torch.float64),
                                torch.tensor([0.1, 0.9]), torch.tensor([0, 2]), layer_set=[0, 2])
    assert trace.seq_lens == [18, 21, 21, 21]
    assert trace.kinds[2][:2] == ["condition", "condition"]
    assert trace.kinds[2][-3:] == ["register"] * 3
    assert patch_positions(trace.kinds[2]) == list(range(2, 18))
    assert ops.slice_tokens(trace.hidden[0], 2, 18).shape == (2, 16, 16)


def test_forward_denoise_single_sample_shape():
    m = tiny(2, 1, 3)
    out = forward_denoise(m, torch.randn(16, 4, dtype=torch.float64), 0.5, 1)
    assert out.shape == (16, 4)


def test_capture_rejects_bad_layer():
    m = tiny(2, 1, 3)
    with pytest.raises(IndexError):
        capture_activations(m, torch.randn(1, 16, 4, dtype=torch.float64), 0.5, 0, layer_set=[3])


def test_sincos_table_shape_and_range():
    tab = sincos_2d(32, 8)
    assert tab.shape == (64, 32)
    assert abs(tab).max() <= 1.0


def test_class_and_timestep_change_output():
    m = tiny(2, 1, 3)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * torch.randn_like(p))
    z = torch.randn(1, 16, 4, dtype=torch.float64)
    a = m(z, torch.tensor([0.2]), torch.tensor([1]))
    assert not torch.equal(a, m(z, torch.tensor([0.2]), torch.tensor([2])))
    assert not torch.equal(a, m(z, torch.tensor([0.6]), torch.tensor([1])))
    assert not torch.equal(a, m(z, torch.tensor([0.2]), torch.tensor([UNCONDITIONAL])))


@pytest.mark.parametrize("seed", range(3))
def test_full_denoiser_loss_gradients(seed):
    """Toy depth-8 model, 36 registers from block 2, norm masking on."""
    model = RegisterDiT(ModelConfig(registers=RegisterConfig(36, 2)), seed=seed).double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.02)
    z0 = torch.randn(1, 64, 16, generator=g, dtype=torch.float64)
    z0[:, :4] *= 4
    eps = torch.randn(1, 64, 16, generator=g, dtype=torch.float64)
    t = torch.rand(1, generator=g, dtype=torch.float64) * 0.8 + 0.1
    y = torch.tensor([seed % 4])
    tau = float(z0.norm(dim=-1).flatten().quantile(0.95))
    loss, filtered, skipped = batch_loss(model, z0, y, t, eps, tau)
    assert filtered > 0 and skipped == 0
    f = lambda: batch_loss(model, z0, y, t, eps, tau)[0]
    err = ops.grad_check(f, list(model.parameters()), directional=True, generator=g)
    assert err <= 1e-4


def test_attention_rows_sum_to_one_with_registers():
    m = tiny(5, 2, 4)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * torch.randn_like(p))
    trace = ForwardTrace()
    m(torch.randn(2, 16, 4, dtype=torch.float64), torch.tensor([0.3, 0.6]), torch.tensor([0, 1]),
      record_attention=True, trace=trace)
    for i in range(2, 4):
        w = trace.attention[i]
        assert w.shape[-1] == 21
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-12)
