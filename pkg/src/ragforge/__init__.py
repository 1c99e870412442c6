"""RAG pipeline engine and training-data factory.

Everything neural sits behind one client interface with deterministic
in-process stubs, so the full pipeline (ingest, segment, index, retrieve,
rerank, mine, synthesize, train, evaluate) runs offline and reproducibly.
"""

__version__ = "0.1.0"

from ragforge.records import REFUSAL_ANSWER, TrainingPair

__all__ = ["REFUSAL_ANSWER", "TrainingPair", "__version__"]
