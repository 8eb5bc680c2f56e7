"""Shared test utilities."""
import numpy as np

from neoseize import autodiff as ad
from neoseize.model import ModelConfig, init_params


def model_grad_error(seed=0, batch=2, per_param=12, cfg=None):
    """Worst relative error of the full model's loss gradient (train-mode BN, dropout off).

    Every parameter tensor and the input batch are probed at ``per_param``
    seeded random entries. Conv biases feeding train-mode batch norm have
    an exactly zero gradient (the mean is subtracted back out), so their
    central differences are pure rounding noise of order 1e-11; ``atol=1e-6``
    keeps that noise from being divided by a near-zero denominator.
    """
    cfg = cfg or ModelConfig(dropout_p=0.0)
    model = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = ad.parameter(rng.standard_normal((batch,) + (cfg.in_channels,) + cfg.input_hw))
    y = np.arange(batch) % 2
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def loss(*_):
        # batch-norm running stats must not drift between probes
        for k, v in buffers.items():
            model.buffers[k][...] = v
        return ad.weighted_bce(model.forward(x, mode="train"), y, 0.52)

    inputs = [x] + model.parameters()
    return ad.grad_check(loss, inputs, max_per_input=per_param, seed=seed, atol=1e-6)
