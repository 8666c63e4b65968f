import math

import numpy as np
import pytest
import torch
from torch import nn
from torch.func import functional_call

from bevflow_bench.config import EstimatorConfig
from bevflow_bench.errors import EstimatorDivergedError, MessageFormatError
from bevflow_bench.estimator import (
    MotionEstimator,
    TrainingSample,
    evaluate_loss,
    load_params,
    loss_fn,
    make_training_set,
    mha_forward,
    params_from_bytes,
    params_to_bytes,
    predict,
    relative_features,
    samples_to_batch,
    save_params,
    train_estimator,
)


def seeded_model(seed: int = 0, **kwargs) -> MotionEstimator:
    torch.manual_seed(seed)
    model = MotionEstimator(**kwargs)
    with torch.no_grad():
        nn.init.normal_(model.head[-1].weight, std=0.1)
        nn.init.normal_(model.head[-1].bias, std=0.1)
    return model


def histories(seed: int, n: int = 5) -> tuple[list[np.ndarray], list[float]]:
    samples = make_training_set(n, seed=seed)
    return [s.states for s in samples], [s.t_query for s in samples]


class LossOf(nn.Module):
    def __init__(self, model: MotionEstimator):
        super().__init__()
        self.model = model

    def forward(self, batch):
        return loss_fn(self.model, batch, angle_weight=2.0)


def test_attention_over_one_token_is_its_projected_value():
    model = seeded_model(d=8, n_heads=2)
    rng = np.random.default_rng(0)
    query, feature, code = rng.normal(size=(3, 8))
    out = mha_forward(query, [(feature, code)], model)

    attn = model.attention
    w_v = attn.in_proj_weight[16:].detach().numpy()
    b_v = attn.in_proj_bias[16:].detach().numpy()
    value = w_v @ (feature + code) + b_v
    expected = attn.out_proj.weight.detach().numpy() @ value + attn.out_proj.bias.detach().numpy()
    assert out == pytest.approx(expected, abs=1e-12)


def test_attention_ignores_duplicates_and_order():
    model = seeded_model(d=8, n_heads=2)
    rng = np.random.default_rng(1)
    query = rng.normal(size=8)
    tokens = [(rng.normal(size=8), rng.normal(size=8)) for _ in range(3)]
    single = mha_forward(query, tokens[:1], model)
    assert mha_forward(query, tokens[:1] * 2, model) == pytest.approx(single, abs=1e-12)
    assert mha_forward(query, tokens[::-1], model) == pytest.approx(mha_forward(query, tokens, model), abs=1e-12)


def test_attention_rejects_bad_input():
    model = seeded_model(d=8, n_heads=2)
    with pytest.raises(ValueError):
        mha_forward(np.zeros(8), [], model)
    with pytest.raises(ValueError):
        mha_forward(np.zeros(6), [(np.zeros(6), np.zeros(6))], model)


def test_attention_gradients():
    attn = nn.MultiheadAttention(8, 2, batch_first=True, dtype=torch.float64)
    names, values = zip(*attn.named_parameters())
    generator = torch.Generator().manual_seed(0)
    query = torch.randn(1, 1, 8, dtype=torch.float64, generator=generator)
    tokens = torch.randn(1, 3, 8, dtype=torch.float64, generator=generator)

    def attend(*params):
        out, _ = functional_call(attn, dict(zip(names, params)), (query, tokens, tokens), {"need_weights": False})
        return out

    assert torch.autograd.gradcheck(attend, tuple(v.detach().clone().requires_grad_(True) for v in values))


def test_loss_gradients():
    wrapper = LossOf(seeded_model(d=4, n_heads=2, hidden=8))
    batch = samples_to_batch(make_training_set(4, seed=0), wrapper.model)
    names, values = zip(*wrapper.named_parameters())

    def loss(*params):
        return functional_call(wrapper, dict(zip(names, params)), (batch,))

    assert torch.autograd.gradcheck(loss, tuple(v.detach().clone().requires_grad_(True) for v in values))


def test_loss_gradients_by_central_differences():
    model = seeded_model(d=4, n_heads=2, hidden=8)
    batch = samples_to_batch(make_training_set(6, seed=7), model)
    model.zero_grad()
    loss_fn(model, batch, angle_weight=2.0).backward()
    eps = 1e-6
    for param in (model.head[-1].weight, model.attention.in_proj_weight):
        analytic = param.grad.flatten()
        flat = param.data.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 8)):
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + eps
                upper = loss_fn(model, batch, angle_weight=2.0).item()
                flat[i] = original - eps
                lower = loss_fn(model, batch, angle_weight=2.0).item()
                flat[i] = original
            assert (upper - lower) / (2 * eps) == pytest.approx(analytic[i].item(), rel=1e-5, abs=1e-8)


def test_query_at_last_timestamp_returns_last_state():
    model = seeded_model()
    states, _ = histories(seed=2)
    out = predict(model, states, [s[-1, 0] for s in states])
    assert np.array_equal(out, np.array([s[-1, 1:] for s in states]))


def test_relative_features():
    states = np.array([[0.0, 0.0, 0.0, 0.5], [0.2, math.cos(0.5), math.sin(0.5), 0.5]])
    features = relative_features(states)
    assert features.shape == (2, 4)
    assert features[-1] == pytest.approx([0.0, 0.0, 1.0, 0.0])
    # one meter behind the last state
    assert features[0] == pytest.approx([-0.1, 0.0, 1.0, 0.0])


def test_disabled_time_encoding_gives_zero_codes():
    model = MotionEstimator(time_encoding=False)
    assert not model.encode_time(torch.linspace(0.0, 5.0, 7, dtype=torch.float64)).any()
    assert MotionEstimator().encode_time(torch.tensor([1.0], dtype=torch.float64)).any()


def test_time_encoding_tells_how_far_the_object_moved():
    # constant speed, so the displacement is a function of the elapsed time only
    fixed = dict(intervals=(0.5,), speed=10.0, yaw_rate=0.0, center_sigma=0.0, heading_sigma=0.0)
    train_set = make_training_set(256, seed=0, **fixed)
    val_set = make_training_set(128, seed=1, **fixed)
    losses = {}
    for encoding in (True, False):
        config = EstimatorConfig(epochs=150, batch_size=32, time_encoding=encoding)
        losses[encoding] = evaluate_loss(train_estimator(train_set, config, seed=0).model, val_set)
    assert losses[True] < 0.5 * losses[False]


def test_training_set():
    samples = make_training_set(50, seed=0, k=4)
    for sample in samples:
        assert 2 <= len(sample.states) <= 4
        assert np.all(np.diff(sample.states[:, 0]) > 0)
        assert sample.t_query >= sample.states[-1, 0]
    for sample in make_training_set(10, seed=0, static=True):
        assert sample.target[:2] == pytest.approx([0.0, 0.0])
    for sample in make_training_set(10, seed=0, speed=5.0, yaw_rate=0.0, query_offset=0.2):
        assert sample.t_query == pytest.approx(sample.states[-1, 0] + 0.2)
        assert math.hypot(*sample.target[:2]) == pytest.approx(5.0 * sample.t_query)


def test_training_on_stationary_objects():
    config = EstimatorConfig(lr=1e-3, epochs=50, batch_size=64)
    result = train_estimator(make_training_set(64, seed=1, static=True), config, seed=0)
    assert result.final_loss < 1e-3
    assert len(result.history) == 50
    assert all(type(v) is float for v in result.history)
    assert not result.model.training


def test_training_reduces_the_loss():
    config = EstimatorConfig(epochs=30, batch_size=32)
    train_set = make_training_set(128, seed=2)
    result = train_estimator(train_set, config, seed=0)
    assert result.final_loss < result.initial_loss
    assert evaluate_loss(result.model, train_set) == pytest.approx(result.final_loss)


def test_training_is_deterministic():
    config = EstimatorConfig(epochs=3, batch_size=8)
    samples = make_training_set(32, seed=3)
    a = train_estimator(samples, config, seed=5).model.state_dict()
    b = train_estimator(samples, config, seed=5).model.state_dict()
    assert all(torch.equal(a[name], b[name]) for name in a)


def test_training_rejects_bad_data():
    with pytest.raises(ValueError):
        train_estimator([], EstimatorConfig())
    broken = TrainingSample(
        states=np.array([[0.0, 0.0, 0.0, 0.0], [0.1, 1.0, 0.0, 0.0]]),
        t_query=0.2,
        target=np.array([math.nan, 0.0, 0.0]),
    )
    with pytest.raises(EstimatorDivergedError):
        train_estimator([broken], EstimatorConfig(epochs=2))


def test_params_file(tmp_path):
    model = seeded_model(d=8, n_heads=2, hidden=16, time_unit=0.05, position_scale=5.0)
    path = tmp_path / "estimator.bin"
    save_params(model, path)
    loaded = load_params(path)
    assert (loaded.d, loaded.n_heads, loaded.hidden, loaded.time_unit, loaded.position_scale) == (8, 2, 16, 0.05, 5.0)
    states, queries = histories(seed=4)
    assert np.array_equal(predict(loaded, states, queries), predict(model, states, queries))


def test_params_file_rejects_corruption(tmp_path):
    raw = params_to_bytes(seeded_model())
    with pytest.raises(MessageFormatError):
        params_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MessageFormatError):
        params_from_bytes(raw[:-8])
    with pytest.raises(MessageFormatError):
        params_from_bytes(raw[:10])
    with pytest.raises(FileNotFoundError):
        load_params(tmp_path / "missing.bin")
