"""Video important-person ranking: cue extraction, temporal rectification,
ranking, rationale generation, synthetic corpora, and evaluation."""

__version__ = "0.1.0"
