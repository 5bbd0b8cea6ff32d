"""Additive vector quantization toolkit.

Learns high-capacity additive codebooks by dictionary annealing, encodes
datasets with beam-search multi-path encoding, and answers approximate
nearest-neighbor queries either by exhaustive asymmetric distance
computation or through a prefix tree over the codes.
"""

from .annealing import (
    TrainConfig,
    TrainReport,
    da_sweep,
    heat_up,
    cool_down,
    rvq_train,
    train_from_scratch,
    train_online,
)
from .atree import (
    ATree,
    SearchParams,
    SearchStats,
    atree_search,
    build_atree,
    deserialize_atree,
    node_distance,
    serialize_atree,
)
from .clustering import (
    Centroids,
    PcaModel,
    dimension_schedule,
    improved_kmeans,
    lloyd_kmeans,
    pca_fit,
    quantization_error,
)
from .codebook import (
    AdcTable,
    Codebook,
    CrossProductTable,
    EncodedDataset,
    adc_distance,
    adc_table,
    cross_products,
    distortion,
    encode_dataset,
    encode_multipath,
    exhaustive_adc_search,
    read_codebook,
    read_encoded,
    reconstruct,
    reorder_by_variance,
    write_codebook,
    write_encoded,
)
from .data import (
    GroundTruth,
    brute_force_knn,
    generate_synthetic,
    read_bvecs,
    read_fvecs,
    read_ivecs,
    write_fvecs,
    write_ivecs,
)
from .diagnostics import (
    EvalReport,
    LocalityProfile,
    MiMatrix,
    evaluate,
    locality_profile,
    mi_matrix,
)
from .estimators import AggregatingTreeIndex, AnnealedQuantizer, ExhaustiveAdcIndex
from .validation import FormatError

__version__ = "0.1.0"
