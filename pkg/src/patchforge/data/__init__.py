from .annotations import (
    NON_PERSON,
    PERSON,
    AnnotationRecord,
    FilterResult,
    ImageInfo,
    MalformedAnnotationError,
    compute_padded_box,
    filter_annotations,
    index_by_image,
    load_coco,
    parse_coco,
    pixel_box,
)
from .crops import ExtractionSummary, extract_crops, load_crop, load_split
from .splits import (
    CropSpec,
    DatasetManifest,
    InsufficientPoolError,
    build_splits,
    candidate_crops,
    read_manifest,
    select_attack_subset,
    write_manifest,
)
