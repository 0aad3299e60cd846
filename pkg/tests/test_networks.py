"""Model shapes, zero-initialized fine-tuning heads and the autograd helpers."""
import pytest
import torch

from src.generative.flow import sample_ode
from src.models.schemas import GrfConfig, ProblemKind, TestBatchConfig, TimeGrid
from src.networks.architectures import (AnalyticGaussianFlow, GaussianControlModel, InversePredictor,
                                        VectorFieldModel, build_model, input_vjp, param_gradient,
                                        trainable_parameters)
from src.networks.training import inverse_for_samples, threshold_accuracy, train_inverse
from src.physics.grid import GridField, make_grid, sample_grf, threshold_binary
from src.physics.pde import DarcyProblem, solve_darcy
from src.physics.weakform import ResidualProblem
from src.utils.errors import ConfigurationError, NumericalError
from src.utils.rng import make_rng


def test_vector_field_shapes_and_dtype():
    model = VectorFieldModel((9, 9), hidden=4, n_freq=1)
    x = torch.randn(3, 9, 9, dtype=torch.float64)
    v = model(x, 0.3)
    assert v.shape == (3, 9, 9)
    assert v.dtype == torch.float64
    assert model(x, torch.tensor([0.1, 0.2, 0.3])).shape == (3, 9, 9)


def test_space_time_vector_field():
    model = VectorFieldModel((5, 9, 9), hidden=4, n_freq=1)
    assert model(torch.randn(2, 5, 9, 9, dtype=torch.float64), 0.5).shape == (2, 5, 9, 9)


def test_non_finite_state_is_rejected():
    model = VectorFieldModel((9, 9), hidden=4, n_freq=1)
    x = torch.zeros(1, 9, 9, dtype=torch.float64)
    x[0, 2, 2] = float("inf")
    with pytest.raises(NumericalError):
        model(x, 0.5)


def test_zero_initialized_finetune_reproduces_base(tiny_models):
    base, _, ft = tiny_models
    x = torch.randn(2, 9, 9, dtype=torch.float64)
    alpha = 1.0 + torch.rand(2, 9, 9, dtype=torch.float64)
    v_ab = torch.randn(2, 9, 9, dtype=torch.float64)
    with torch.no_grad():
        v_x, v_a = ft(x, alpha, v_ab, 0.4)
        assert torch.equal(v_x, base(x, 0.4))
    assert torch.equal(v_a, v_ab)


def test_finetune_base_copy_is_frozen(tiny_models):
    base, _, ft = tiny_models
    assert all(not p.requires_grad for p in ft.base.parameters())
    assert all(p.requires_grad for p in base.parameters())
    assert len(trainable_parameters(ft)) > 0


def test_finetune_rejects_misplaced_alpha(tiny_models):
    _, _, ft = tiny_models
    x = torch.randn(1, 9, 9, dtype=torch.float64)
    with pytest.raises(ConfigurationError):
        ft(x, torch.ones(1, 8, 8, dtype=torch.float64), torch.ones(1, 8, 8, dtype=torch.float64), 0.5)


def test_inverse_predictor_range(tiny_models):
    _, phi, _ = tiny_models
    out = phi(10 * torch.randn(4, 9, 9, dtype=torch.float64))
    assert out.shape == (4, 9, 9)
    assert float(out.min()) > 1.0 and float(out.max()) < 12.0
    with pytest.raises(ConfigurationError):
        InversePredictor((9, 9), (0.0, 1.0))
    with pytest.raises(ConfigurationError):
        InversePredictor((9, 9), (2.0, 1.0))


def test_inverse_predictor_folds_frames():
    phi = InversePredictor((5, 9, 9), (1.0, 4.0), hidden=4, n_freq=1)
    assert phi(torch.randn(2, 5, 9, 9, dtype=torch.float64)).shape == (2, 9, 9)


def test_build_model_from_descriptor(tiny_models):
    base, phi, ft = tiny_models
    for model in (base, phi, ft):
        rebuilt = build_model(model.descriptor())
        assert type(rebuilt) is type(model)
        assert rebuilt.descriptor() == model.descriptor()
    control = GaussianControlModel(AnalyticGaussianFlow(1.0, 0.5))
    assert build_model(control.descriptor()).descriptor() == control.descriptor()
    with pytest.raises(ConfigurationError):
        build_model({"kind": "unet"})


def test_param_gradient_of_constant_closure_is_zero(tiny_models):
    _, _, ft = tiny_models
    grad = param_gradient(ft, lambda: torch.tensor(3.0, dtype=torch.float64))
    assert grad.shape == (sum(p.numel() for p in trainable_parameters(ft)),)
    assert float(grad.abs().max()) == 0.0


def test_param_gradient_rejects_non_finite(tiny_models):
    base, _, _ = tiny_models
    with pytest.raises(NumericalError):
        param_gradient(base, lambda: base(torch.zeros(1, 9, 9, dtype=torch.float64), 0.5).sum() * float("nan"))


def test_input_vjp_matches_linear_map():
    mat = torch.randn(4, 3, dtype=torch.float64)
    x = torch.randn(2, 3, dtype=torch.float64)
    cot = torch.randn(2, 4, dtype=torch.float64)
    (g,) = input_vjp(lambda v: v @ mat.T, [x], cot)
    assert torch.allclose(g, cot @ mat)
    with pytest.raises(ConfigurationError):
        input_vjp(lambda v: v @ mat.T, [x], torch.zeros(2, 3, dtype=torch.float64))


def test_analytic_gaussian_flow_hits_target_moments():
    torch.manual_seed(3)
    flow = AnalyticGaussianFlow(1.0, 0.5)
    x1 = sample_ode(flow, torch.randn(20000, 1, dtype=torch.float64), TimeGrid(time_steps=200))
    assert float(x1.mean()) == pytest.approx(1.0, abs=0.03)
    assert float(x1.std()) == pytest.approx(0.5, abs=0.03)


def test_gaussian_control_starts_at_base():
    base = AnalyticGaussianFlow(1.0, 0.5)
    control = GaussianControlModel(base, hidden=8)
    x = torch.randn(5, 1, dtype=torch.float64)
    v, v_a = control(x, None, None, 0.3)
    assert v_a is None
    assert torch.equal(v, base(x, 0.3))


def test_inverse_training_zero_epochs_keeps_predictor(darcy9, rng):
    samples = torch.randn(4, 9, 9, dtype=torch.float64)
    phi = inverse_for_samples(samples, (3.0, 12.0), hidden=4, n_freq=1)
    assert phi.out_range == (1.5, 18.0)
    before = [p.clone() for p in phi.parameters()]
    history = train_inverse(phi, samples, darcy9, TestBatchConfig(n_test=8, per_node=False), rng, epochs=0)
    assert history.final_loss is None
    assert all(torch.equal(a, b) for a, b in zip(before, phi.parameters()))


def test_inverse_training_runs_and_records_losses(darcy9, rng):
    samples = torch.randn(6, 9, 9, dtype=torch.float64)
    phi = inverse_for_samples(samples, (3.0, 12.0), hidden=4, n_freq=1)
    history = train_inverse(phi, samples, darcy9, TestBatchConfig(n_test=8, per_node=False), rng, epochs=2,
                            learning_rate=1e-4, batch_size=3, quiet=True)
    assert len(history.epoch_losses) == 2
    assert history.initial_loss is not None


def test_inverse_training_needs_samples(darcy9, rng):
    phi = InversePredictor((9, 9), (1.0, 2.0), hidden=4, n_freq=1)
    with pytest.raises(ConfigurationError):
        train_inverse(phi, torch.zeros(0, 9, 9, dtype=torch.float64), darcy9, TestBatchConfig(), rng, epochs=1)


def test_threshold_accuracy():
    truth = torch.tensor([3.0, 12.0, 12.0, 3.0], dtype=torch.float64)
    predicted = torch.tensor([4.0, 11.0, 5.0, 8.0], dtype=torch.float64)
    assert threshold_accuracy(predicted, truth, (3.0, 12.0)) == pytest.approx(0.5)


@pytest.mark.slow
def test_inverse_recovers_binary_structure_from_solver_pairs():
    grid = make_grid((17, 17))
    problem = ResidualProblem(ProblemKind.DARCY, grid)
    rng = make_rng(0)
    raw = sample_grf(grid, GrfConfig(modes=8), rng, n=24)
    perms = threshold_binary(raw, 3.0, 12.0).values
    states = torch.stack([solve_darcy(DarcyProblem(GridField(grid, a))).values for a in perms])
    torch.manual_seed(0)
    phi = inverse_for_samples(states, (3.0, 12.0), hidden=16)
    tf_config = TestBatchConfig(sigma_min=1.5, sigma_max=3.0)
    history = train_inverse(phi, states, problem, tf_config, rng, epochs=150, learning_rate=2e-3, batch_size=8,
                            quiet=True)
    assert history.final_loss < history.initial_loss
    with torch.no_grad():
        predicted = phi(states)
    assert threshold_accuracy(predicted, perms, (3.0, 12.0)) >= 0.8
