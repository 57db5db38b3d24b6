# pipeline/regressors/residual.py
import numpy as np

from poselift.autodiff.ops import add, add_bias, matmul, relu
from poselift.autodiff.optim import Params
from poselift.autodiff.tensor import Tensor

OUTPUT_INIT_STD = 1e-2


def he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class Linear:
    def __init__(self, params: Params, name: str, fan_in: int, fan_out: int, weights: np.ndarray):
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.weight = params.add(f"{name}.w", weights)
        self.bias = params.add(f"{name}.b", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)


class RegressorG:
    """
    Residual MLP: input layer to `width`, `depth` blocks of
    linear -> relu -> linear with an additive skip, output layer to out_dim.
    """

    def __init__(
        self,
        params: Params,
        name: str,
        in_dim: int,
        out_dim: int,
        width: int,
        depth: int,
        rng: np.random.Generator,
    ):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.input = Linear(params, f"{name}.in", in_dim, width, he_normal(rng, in_dim, width))
        self.blocks = [
            (
                Linear(params, f"{name}.block{d}.fc1", width, width, he_normal(rng, width, width)),
                Linear(params, f"{name}.block{d}.fc2", width, width, 0.5 * he_normal(rng, width, width)),
            )
            for d in range(depth)
        ]
        self.output = Linear(
            params, f"{name}.out", width, out_dim, rng.normal(0.0, OUTPUT_INIT_STD, size=(width, out_dim))
        )

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.input(x))
        for fc1, fc2 in self.blocks:
            h = add(h, fc2(relu(fc1(h))))
        return self.output(h)

    def zero_output(self) -> None:
        self.output.weight.data = np.zeros_like(self.output.weight.data)
        self.output.bias.data = np.zeros_like(self.output.bias.data)
