from .dataset import SPLITS, StDataset, split_for_slide
from .expression import (
    SpotExpression,
    normalize_expression,
    read_gene_list,
    restrict_genes,
    select_variable_genes,
)
from .io import DatasetFormatError, dataset_from_bytes, dataset_to_bytes, read_dataset, write_dataset
from .pyramid import build_pyramid, crop_centered, downsample2, extract_pyramid_patches
from .synth import SynthConfig, oracle_predictions, synth_generate

__all__ = [name for name in dir() if not name.startswith("_")]
