"""One-shot GNN tour solver: pointer + edge heat map, constrained decoding,
policy-gradient training, exact oracles, classical baselines, TSPLIB tooling."""

__version__ = "0.1.0"

from . import autodiff, baselines, decoder, instances, model, trainer

__all__ = ["autodiff", "baselines", "decoder", "instances", "model", "trainer",
           "__version__"]
