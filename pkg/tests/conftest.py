import numpy as np
import pytest

from vsfusion import model as M
from vsfusion import tensor as tn
from vsfusion.training import cross_entropy_loss


def tiny_config(**kw) -> M.ModelConfig:
    base = dict(eye_dim=3, ppg_dim=2, semantic_dim=3, n_classes=3, d_model=4, conv_filters=2,
                n_heads=2, key_dim=3, value_dim=2, hidden_units=4, l2=0.001, seed=3)
    base.update(kw)
    return M.ModelConfig(**base)


def tiny_inputs(rng, B=3, T=2, config=None):
    config = config or tiny_config()
    return {"eye": rng.standard_normal((B, T, config.eye_dim)),
            "ppg": rng.standard_normal((B, T, config.ppg_dim)),
            "semantic": rng.standard_normal((B, T, config.semantic_dim))}


def loss_value(params, inputs, labels, config) -> float:
    P = M.as_tensors(params)
    probs = M.forward(inputs, P, config)
    weights = [P[k] for k in sorted(P) if M.is_weight(k)]
    return cross_entropy_loss(probs, labels, weights, config.l2).item()


def gradient_check(config, seed=0, h=1e-5):
    """Analytic vs central-difference gradients of the regularised loss, per parameter entry.

    Returns (worst relative error, number of entries checked). Relative error
    is |a - n| / max(|a|, |n|, 1e-7).
    """
    rng = np.random.default_rng(seed)
    params = M.init_params(config)
    # nudge biases off zero so every path carries gradient
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    inputs = tiny_inputs(rng, config=config)
    labels = rng.integers(config.n_classes, size=3)

    P = M.as_tensors(params, requires_grad=True)
    with tn.GradTape() as tape:
        probs = M.forward(inputs, P, config)
        loss = cross_entropy_loss(probs, labels, [P[k] for k in sorted(P) if M.is_weight(k)], config.l2)
    grads = tape.gradient(loss, list(P.values()))

    worst, checked = 0.0, 0
    for name, value in params.items():
        analytic = grads[P[name]]
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value(params, inputs, labels, config)
            flat[i] = orig - h
            down = loss_value(params, inputs, labels, config)
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-7)
            worst = max(worst, err)
            checked += 1
    return worst, checked


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
