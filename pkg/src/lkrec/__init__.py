"""News recommendation fusing a word encoder, pooled LLM layer states and
multi-hop knowledge-graph attention."""

__version__ = "0.1.0"
