"""Dataset loading, synthetic task generation and batching."""

from vimsvp.data.cifar import (
    RECORD_BYTES,
    encode_records,
    load_cifar10_binary,
    parse_records,
    to_uint8,
    write_cifar10_binary,
)
from vimsvp.data.dataset import Dataset, balanced_indices, batch_iterator
from vimsvp.data.synthetic import (
    SyntheticTaskSpec,
    generate_synthetic,
    match_motifs,
    motif_library,
    quadrant_of,
)

__all__ = [
    "RECORD_BYTES", "Dataset", "SyntheticTaskSpec", "balanced_indices", "batch_iterator", "encode_records",
    "generate_synthetic", "load_cifar10_binary", "match_motifs", "motif_library", "parse_records",
    "quadrant_of", "to_uint8", "write_cifar10_binary",
]
