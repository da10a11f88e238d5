"""Patient similarity from longitudinal event records."""

from .clustering import (PartitionPair, kmeans, kmeans_from_similarity, nmi, purity,
                         rand_index, seeded_kmeans)
from .embedding import EmbeddingConfig, EmbeddingTable, train_embeddings
from .records import PatientRecord, Vocabulary, filter_patients, filter_vocabulary, parse_events
from .represent import PatientMatrix, to_one_hot, to_patient_matrix, to_summed_vector
from .similarity import (build_similarity_matrix, distance_correlation, distance_covariance,
                         rv_coefficient)

__version__ = "0.1.0"
