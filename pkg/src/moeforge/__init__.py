"""moeforge: merge disparate dense transformers into one routed MoE model.

Stage 1 fuses attention, embeddings and norms from several source
checkpoints into a shared backbone and permutes each source feed-forward
block into the anchor's neuron coordinates. Stage 2 trains only the
routers. Everything runs on numpy arrays at desk scale and is bitwise
reproducible for a fixed seed.
"""

__version__ = "0.1.0"
__all__ = ["__version__"]
