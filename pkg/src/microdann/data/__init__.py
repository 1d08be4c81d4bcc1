from .augment import AugmentPolicy, augment
from .folder import load_image_folder, normalize, write_image_folder, write_manifest
from .splits import (
    EpochBatcher,
    SplitSpec,
    make_batches,
    sample_few_shot,
    split_counts,
    split_source,
    split_target,
)
from .synth import (
    DEFAULT_DOMAINS,
    DEFAULT_SPECIES,
    SPECIES_NAMES,
    DomainTransform,
    ImageSample,
    SpeciesSpec,
    generate_domain,
    synth_generate,
)

__all__ = [
    "AugmentPolicy", "augment", "load_image_folder", "normalize", "write_image_folder",
    "write_manifest", "EpochBatcher", "SplitSpec", "make_batches", "sample_few_shot",
    "split_counts", "split_source", "split_target", "DEFAULT_DOMAINS", "DEFAULT_SPECIES",
    "SPECIES_NAMES", "DomainTransform", "ImageSample", "SpeciesSpec", "generate_domain",
    "synth_generate",
]
