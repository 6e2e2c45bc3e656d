import pytest
import torch

from cadseq.cad_core import CadSequence, extrude, line, sol, circle, quantize_param


def q(v):
    """Quantized sketch coordinate."""
    return quantize_param("x", v)


def square(lo=-0.5, hi=0.5, **ext):
    """SOL + 4 lines + extrude; lines end at (hi,lo),(hi,hi),(lo,hi),(lo,lo)."""
    pts = [(hi, lo), (hi, hi), (lo, hi), (lo, lo)]
    return [sol(), *[line(q(x), q(y)) for x, y in pts], extrude(**ext)]


def ring(r_out=0.6, r_in=0.3, **ext):
    return [sol(), circle(q(0), q(0), quantize_param("r", r_out)),
            sol(), circle(q(0), q(0), quantize_param("r", r_in)), extrude(**ext)]


@pytest.fixture
def square_seq():
    return CadSequence(tuple(square()))


@pytest.fixture
def two_pair_seq():
    return CadSequence(tuple(square() + ring(d1=40)))


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
