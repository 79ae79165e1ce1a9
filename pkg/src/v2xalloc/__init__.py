"""V2X resource allocation with an implicit link graph, GraphSAGE embeddings and DDQN agents."""

__version__ = "0.1.0"
