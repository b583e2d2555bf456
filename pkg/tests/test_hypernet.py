import pytest
import torch
from torch import nn

from hyperpeft.errors import ConfigError, ContractViolationError
from hyperpeft.hypernet import (
    ADAPTER_POSITIONS,
    ConditioningInput,
    Hypernetwork,
    HypernetConfig,
    ParameterBudget,
    PositionId,
    export_state,
    import_state,
    trainable_parameter_count,
)

T5_BASE_LIKE = HypernetConfig(n_tasks=7, n_layers=24, host_hidden=768)

TINY = HypernetConfig(
    n_tasks=2, n_layers=3, host_hidden=8, d_task=6, d_layer_pos=4,
    d_cond=5, d_proj_hidden=5, reduction_factor=4, lora_rank=2,
)


def make_net(config=TINY, seed=0, **kwargs):
    torch.manual_seed(seed)
    return Hypernetwork(config, **kwargs)


def cond(task=0, layer=0, position=PositionId.ADAPTER_AFTER_SELF_ATTN):
    return ConditioningInput(task, layer, position)


# ---------------------------------------------------------------------------
# conditioning embedding
# ---------------------------------------------------------------------------

def test_conditioning_is_deterministic():
    net = make_net()
    a = net.conditioning_embedding(cond())
    b = net.conditioning_embedding(cond())
    assert torch.equal(a, b)


def test_conditioning_width_matches_config():
    net = make_net(T5_BASE_LIKE)
    vec = net.conditioning_embedding(cond())
    assert vec.shape == (64,)


def test_conditioning_distinguishes_positions_tasks_layers():
    net = make_net()
    base = net.conditioning_embedding(cond())
    assert not torch.equal(base, net.conditioning_embedding(cond(position=PositionId.ADAPTER_AFTER_FFN)))
    assert not torch.equal(base, net.conditioning_embedding(cond(task=1)))
    assert not torch.equal(base, net.conditioning_embedding(cond(layer=1)))


def test_conditioning_rejects_out_of_range():
    net = make_net()
    with pytest.raises(IndexError):
        net.conditioning_embedding(cond(task=2))
    with pytest.raises(IndexError):
        net.conditioning_embedding(cond(layer=3))
    with pytest.raises(IndexError):
        net.conditioning_embedding(ConditioningInput(0, 0, 17))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def test_adapter_shapes_t5_base_defaults():
    net = make_net(T5_BASE_LIKE)
    params = net.generate_adapter(cond())
    assert params.down.shape == (24, 768)  # 768 / 32
    assert params.up.shape == (768, 24)


def test_layernorm_shapes():
    net = make_net()
    ln = net.generate_layernorm(cond())
    assert ln.gamma.shape == (8,) and ln.beta.shape == (8,)


def test_lora_shapes_t5_base_defaults():
    net = make_net(T5_BASE_LIKE)
    params = net.generate_lora(
        cond(position=PositionId.LORA_A_SELF_ATTN),
        cond(position=PositionId.LORA_B_SELF_ATTN),
    )
    assert params.a_query.shape == (8, 768)
    assert params.b_query.shape == (768, 8)
    assert params.a_value.shape == (8, 768)
    assert params.b_value.shape == (768, 8)


def test_lora_b_starts_at_zero():
    net = make_net()
    params = net.generate_lora(
        cond(position=PositionId.LORA_A_CROSS_ATTN),
        cond(position=PositionId.LORA_B_CROSS_ATTN),
    )
    assert torch.all(params.b_query == 0)
    assert torch.all(params.b_value == 0)
    assert not torch.all(params.a_query == 0)


def test_generator_position_contract():
    net = make_net()
    with pytest.raises(ContractViolationError):
        net.generate_adapter(cond(position=PositionId.LORA_A_SELF_ATTN))
    with pytest.raises(ContractViolationError):
        net.generate_layernorm(cond(position=PositionId.LORA_B_CROSS_ATTN))
    with pytest.raises(ContractViolationError):
        net.generate_lora(cond(), cond(position=PositionId.LORA_B_SELF_ATTN))
    with pytest.raises(ContractViolationError):
        net.generate_lora(
            cond(position=PositionId.LORA_A_SELF_ATTN),
            cond(position=PositionId.LORA_B_CROSS_ATTN),
        )
    with pytest.raises(ContractViolationError):
        net.generate_lora(
            cond(task=0, position=PositionId.LORA_A_SELF_ATTN),
            cond(task=1, position=PositionId.LORA_B_SELF_ATTN),
        )


def test_affine_heads_return_bias_at_zero_conditioning():
    net = make_net()
    # zero the projector output so every head sees a zero conditioning vector
    with torch.no_grad():
        net.projector[2].weight.zero_()
        net.projector[2].bias.zero_()
    c = cond()
    params = net.generate_adapter(c)
    head_down = net.adapter_down_heads[c.position.name]
    head_up = net.adapter_up_heads[c.position.name]
    assert torch.equal(params.down.flatten(), head_down.bias)
    assert torch.equal(params.up.flatten(), head_up.bias)
    with torch.no_grad():
        head_up.bias.zero_()
    assert torch.all(net.generate_adapter(c).up == 0)


def test_task_separation_on_generated_weights():
    net = make_net()
    p0 = net.generate_adapter(cond(task=0))
    p1 = net.generate_adapter(cond(task=1))
    assert not torch.equal(p0.down, p1.down)
    assert not torch.equal(p0.up, p1.up)


def test_generated_params_are_deterministic():
    net = make_net()
    a = net.generate_adapter(cond(task=1, layer=2))
    b = net.generate_adapter(cond(task=1, layer=2))
    assert torch.equal(a.down, b.down) and torch.equal(a.up, b.up)


def test_force_zero_deltas():
    net = make_net()
    net.force_zero_deltas()
    c = cond()
    assert torch.all(net.generate_adapter(c).up == 0)
    ln = net.generate_layernorm(c)
    assert torch.all(ln.gamma == 1) and torch.all(ln.beta == 0)
    lora = net.generate_lora(
        cond(position=PositionId.LORA_A_SELF_ATTN),
        cond(position=PositionId.LORA_B_SELF_ATTN),
    )
    assert torch.all(lora.b_query == 0) and torch.all(lora.b_value == 0)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def walk_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def test_count_matches_brute_force_walk():
    for config in (TINY, T5_BASE_LIKE):
        net = make_net(config)
        assert trainable_parameter_count(config).total == walk_parameter_count(net)


def test_count_matches_walk_with_ablations():
    net = make_net(enable_lora=False)
    assert trainable_parameter_count(TINY, enable_lora=False).total == walk_parameter_count(net)
    net = make_net(enable_adapters=False)
    assert trainable_parameter_count(TINY, enable_adapters=False).total == walk_parameter_count(net)


def test_t5_base_budget_interval():
    budget = trainable_parameter_count(T5_BASE_LIKE)
    assert 5_000_000 <= budget.total <= 7_000_000


def test_task_count_scales_only_the_task_table():
    t1 = trainable_parameter_count(HypernetConfig(n_tasks=1, n_layers=24, host_hidden=768))
    t7 = trainable_parameter_count(T5_BASE_LIKE)
    assert t7.total - t1.total == 6 * 512


def test_layer_count_scales_only_the_layer_table():
    l4 = trainable_parameter_count(HypernetConfig(n_tasks=7, n_layers=4, host_hidden=768))
    l24 = trainable_parameter_count(T5_BASE_LIKE)
    assert l24.total - l4.total == 20 * 64


def test_budget_breakdown_is_exposed():
    budget = trainable_parameter_count(T5_BASE_LIKE)
    assert isinstance(budget, ParameterBudget)
    assert budget.as_dict()["total"] == budget.total
    assert budget.lora_heads > 0 and budget.adapter_heads > 0


def test_config_validation():
    with pytest.raises(ConfigError):
        HypernetConfig(n_tasks=0, n_layers=4, host_hidden=64)
    with pytest.raises(ConfigError):
        HypernetConfig(n_tasks=1, n_layers=4, host_hidden=65)  # not divisible by 32
    with pytest.raises(ConfigError):
        Hypernetwork(TINY, enable_adapters=False, enable_lora=False)


def test_config_json_round_trip():
    text = TINY.to_json()
    assert HypernetConfig.from_json(text) == TINY


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_export_import_round_trip():
    net = make_net(seed=1)
    state = export_state(net)
    assert all(key.startswith("hypernet/") for key in state)
    assert any("/adapter_down_heads/" in key for key in state)
    other = make_net(seed=2)
    before = other.conditioning_embedding(cond())
    import_state(other, state)
    assert torch.equal(other.conditioning_embedding(cond()), net.conditioning_embedding(cond()))
    assert not torch.equal(other.conditioning_embedding(cond()), before)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

class _Probe(nn.Module):
    """Expose a generator call as a forward() for functional_call."""

    def __init__(self, net, fn):
        super().__init__()
        self.net = net
        self._fn = fn

    def forward(self):
        return self._fn(self.net)


def functional_gradcheck(net: Hypernetwork, fn) -> bool:
    probe = _Probe(net, fn).double()
    names = [name for name, _ in probe.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in probe.parameters())

    def wrapped(*tensors):
        return torch.func.functional_call(probe, dict(zip(names, tensors)), ())

    return torch.autograd.gradcheck(wrapped, params, eps=1e-6, atol=1e-4, rtol=1e-4)


def test_conditioning_gradients_match_finite_differences():
    net = make_net()
    assert functional_gradcheck(net, lambda n: n.conditioning_embedding(cond(task=1, layer=2)))


def test_generated_adapter_gradients_reach_all_components():
    net = make_net()
    params = net.generate_adapter(cond(task=1))
    loss = params.down.square().sum() + params.up.square().sum()
    loss.backward()
    assert net.task_embedding.weight.grad is not None
    assert net.projector[0].weight.grad is not None
    head = net.adapter_down_heads[PositionId.ADAPTER_AFTER_SELF_ATTN.name]
    assert head.weight.grad is not None and head.weight.grad.abs().sum() > 0
