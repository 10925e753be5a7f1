import numpy as np
import pytest
import torch

from vlseg.corpus import generate_shapes_corpus
from vlseg.decoder import DecoderConfig
from vlseg.vlm import HashTextEncoder, tiny_encoder

SHAPE_CLASSES = ["background", "circle", "square"]


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "shapes"
    generate_shapes_corpus(root, n_labeled=4, n_unlabeled=16, n_val=8,
                           image_size=64, seed=0)
    return root


@pytest.fixture()
def encoder():
    return tiny_encoder(seed=0)


@pytest.fixture()
def text_embeds(encoder):
    prompts = [f"a photo of a {name}" for name in SHAPE_CLASSES]
    return HashTextEncoder(dim=encoder.out_dim).encode(prompts)


def small_decoder_config(**overrides) -> DecoderConfig:
    kwargs = dict(d=16, fuse_channels=(16, 8), skip_channels=(8, 8),
                  gn_groups=8, pool=2, aspp_dilations=(1, 2))
    kwargs.update(overrides)
    return DecoderConfig(**kwargs)


def finite_difference_grads(fn, x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Central-difference gradient of a scalar function at x (double precision)."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(fn(x))
            flat[i] = orig - eps
            f_minus = float(fn(x))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def assert_grads_close(analytic: torch.Tensor, numeric: torch.Tensor,
                       rtol: float = 1e-4, atol: float = 1e-7) -> None:
    diff = (analytic - numeric).abs()
    bound = atol + rtol * numeric.abs()
    worst = (diff - bound).max().item()
    assert (diff <= bound).all(), f"gradient mismatch, worst excess {worst:.3e}"


def check_input_gradients(module_fn, x: torch.Tensor, seed: int = 0,
                          rtol: float = 1e-4) -> None:
    """Compare autograd input gradients of sum(output * random weights)
    against central finite differences."""
    torch.manual_seed(seed)
    x = x.double().clone().requires_grad_(True)
    with torch.no_grad():
        weights = torch.randn_like(module_fn(x))

    def scalar(inp):
        return (module_fn(inp) * weights).sum()

    loss = scalar(x)
    loss.backward()
    numeric = finite_difference_grads(lambda t: scalar(t.detach()), x.detach().clone())
    assert_grads_close(x.grad, numeric, rtol=rtol)
