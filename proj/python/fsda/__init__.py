"""Prototype-based few-shot domain-adaptive semantic segmentation."""

from ._core import (  # noqa: F401
    IGNORE_LABEL,
    Model,
    __version__,
    aggregate_bank,
    construct_support_set,
    cosine_similarity,
    cross_entropy_loss,
    episode_loss,
    extract_prototypes,
    generate_synthetic_domain,
    masked_average_pool,
    miou,
    poly_lr,
    predict_labels,
    prototype_softmax,
    remap_episode_labels,
    score_map,
    segment_image,
)
