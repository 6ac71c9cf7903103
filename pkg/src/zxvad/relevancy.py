"""How related are two label vocabularies? Mean absolute cosine similarity of label embeddings.

Used to judge whether a task-irrelevant corpus (its action labels) is indeed irrelevant to
the abnormal classes of a video anomaly dataset.
"""
import hashlib
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Union, runtime_checkable

import numpy as np
import pandas as pd
from eliot import log_message
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.metrics.pairwise import cosine_similarity

from zxvad.errors import ConfigError, ContractError, EmbeddingLookupError

DEFAULT_HUB_REPO = "fse/word2vec-google-news-300"
DEFAULT_HUB_FILE = "word2vec-google-news-300.model"


@runtime_checkable
class EmbeddingProvider(Protocol):
    source_id: str
    dimension: int

    def lookup(self, token: str) -> Optional[np.ndarray]:
        """Vector of ``token`` or None when it is out of vocabulary"""
        ...


class ToyEmbeddingProvider:
    """Explicit token table, or deterministic hashed vectors for every token when no table is given"""

    def __init__(self, table: Optional[Mapping[str, Sequence[float]]] = None, dimension: int = 16):
        self.table: Optional[Dict[str, np.ndarray]] = None
        if table is not None:
            self.table = {token.lower(): np.asarray(vector, dtype=np.float64) for token, vector in table.items()}
            dimensions = {vector.shape[0] for vector in self.table.values()}
            if len(dimensions) > 1:
                raise ContractError(f"toy embedding table mixes dimensions {sorted(dimensions)}")
            dimension = dimensions.pop() if dimensions else dimension
        self.dimension = dimension
        self.source_id = "toy-table" if table is not None else f"toy-hashed-{dimension}"

    def lookup(self, token: str) -> Optional[np.ndarray]:
        if self.table is not None:
            return self.table.get(token)
        seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng(seed).standard_normal(self.dimension)


class KeyedVectorsProvider:
    """Word vectors held by a gensim ``KeyedVectors`` instance"""

    def __init__(self, vectors, source_id: str):
        self.vectors = vectors
        self.source_id = source_id
        self.dimension = int(vectors.vector_size)

    def lookup(self, token: str) -> Optional[np.ndarray]:
        for candidate in (token, token.capitalize()):
            if candidate in self.vectors.key_to_index:
                return np.asarray(self.vectors[candidate], dtype=np.float64)
        return None

    @staticmethod
    def _keyed_vectors():
        try:
            from gensim.models import KeyedVectors
        except ImportError as e:
            raise ConfigError(["pretrained embeddings need gensim: install the 'embeddings' extra"]) from e
        return KeyedVectors

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "KeyedVectorsProvider":
        """Load a word2vec binary (.bin), word2vec text (.txt / .vec) or native gensim file"""
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"Embeddings file not found: {path}"])
        keyed_vectors = cls._keyed_vectors()
        if path.suffix in (".bin", ".gz"):
            vectors = keyed_vectors.load_word2vec_format(str(path), binary=True)
        elif path.suffix in (".txt", ".vec"):
            vectors = keyed_vectors.load_word2vec_format(str(path), binary=False)
        else:
            vectors = keyed_vectors.load(str(path), mmap="r")
        return cls(vectors, source_id=str(path))

    @classmethod
    def from_hub(cls, repo_id: str = DEFAULT_HUB_REPO, filename: str = DEFAULT_HUB_FILE) -> "KeyedVectorsProvider":
        from huggingface_hub import snapshot_download

        local_dir = Path(snapshot_download(repo_id=repo_id))
        provider = cls.from_file(local_dir / filename)
        provider.source_id = f"hf://{repo_id}/{filename}"
        return provider


class LabelSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    labels: List[str] = Field(..., min_length=1, description="Class labels, possibly multi-word")

    @field_validator("labels")
    @classmethod
    def _normalize(cls, labels: List[str]) -> List[str]:
        cleaned = [" ".join(label.lower().split()) for label in labels]
        if any(not label for label in cleaned):
            raise ValueError("labels must not be blank")
        return cleaned

    @property
    def count(self) -> int:
        return len(self.labels)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "LabelSet":
        """One label per line; blank lines and lines starting with '#' are skipped"""
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"Label file not found: {path}"])
        lines = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
        return cls(labels=[line for line in lines if line and not line.startswith("#")])


def embed_label(label: str, provider: EmbeddingProvider) -> np.ndarray:
    """Mean vector of the in-vocabulary tokens of a label"""
    tokens = label.lower().split()
    vectors = []
    for token in tokens:
        vector = provider.lookup(token)
        if vector is None:
            log_message(message_type="warning:oov_token", token=token, label=label, provider=provider.source_id)
            continue
        vectors.append(np.asarray(vector, dtype=np.float64))
    if not vectors:
        raise EmbeddingLookupError(label)
    return np.mean(vectors, axis=0)


def embed_labels(labels: LabelSet, provider: EmbeddingProvider) -> np.ndarray:
    matrix = np.stack([embed_label(label, provider) for label in labels.labels])
    zero = np.flatnonzero(np.linalg.norm(matrix, axis=1) == 0)
    if zero.size:
        raise ContractError(f"label '{labels.labels[int(zero[0])]}' embeds to the zero vector")
    return matrix


def pairwise_abs_cos(p: LabelSet, q: LabelSet, provider: EmbeddingProvider) -> pd.DataFrame:
    """|cos(pi_p, pi_q)| for every label pair, rows from ``p`` and columns from ``q``"""
    matrix = np.abs(cosine_similarity(embed_labels(p, provider), embed_labels(q, provider)))
    return pd.DataFrame(np.clip(matrix, 0.0, 1.0), index=p.labels, columns=q.labels)


def mean_abs_cos_sim(p: LabelSet, q: LabelSet, provider: EmbeddingProvider) -> float:
    return float(pairwise_abs_cos(p, q, provider).to_numpy().mean())
