from .manifest import (
    HEADER,
    QUALITY_DIMS,
    ImageRecord,
    Manifest,
    Rejection,
    augment_dataset,
    clean_manifest,
    read_manifest,
    split,
    weighted_sampler,
    write_manifest,
)
from .ppm import decode_ppm, encode_ppm, load_ppm, save_ppm
from .preprocess import AUGMENT_OPS, augment, contrast_stretch, normalize, prepare, resize_bilinear, to_uint8
from .synth import synth_generate
