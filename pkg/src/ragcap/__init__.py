"""Retrieval-augmented captioning with an external visual-name memory."""
from .errors import (
    DimensionMismatch,
    EmptyBlock,
    EmptyCaption,
    EmptyMemory,
    FormatError,
    IoError,
    NonFiniteGradient,
    NonFiniteValue,
    RagcapError,
    ShapeMismatch,
    StaleCache,
    ZeroKey,
    ZeroVector,
)
from .memory import MemoryRecord, Source, VisualNameMemory, build, expand, load, save, stats
from .retrieval import RetrievalConfig, RetrievalResult, retrieve_names
from .vecmath import cosine_sim, l2_norm, mean_embed

__version__ = "0.1.0"
