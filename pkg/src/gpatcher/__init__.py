"""Spectral patch extraction and patch-mixer node classification."""
__version__ = "0.1.0"

from .errors import (DegenerateBound, DimensionTooLarge, EmptyIndexSet, EmptyMask,  # noqa: F401
                     GPatcherError, InfeasibleSpec, InvalidBand, ManifestMismatch,
                     NoConvergence, ParseError, ShapeMismatch)
from .graph import (Graph, HeterophilyVector, NormalizedAdjacency, induce_graph,  # noqa: F401
                    node_heterophily, normalize_adjacency, permute_nodes)
from .spectral import (FilterSpec, SpectralDecomposition, SpectralHeterophily,  # noqa: F401
                       eigendecompose, frequency_response, lemma1_bound,
                       spectral_heterophily, theorem1_bound_term)
from .patcher import (PatchSet, ScoreMatrix, extract_patches, ppr_patches,  # noqa: F401
                      score_adaptive, score_ppr_closed, score_ppr_iterative, top_p_select)
from .mixer import MixerConfig, MixerModel, backward, forward, init_params  # noqa: F401
from .trainer import (TrainConfig, TrainReport, baseline_gcn, baseline_mlp,  # noqa: F401
                      evaluate, run_ablation, train)
from .datasets import (DatasetManifest, SynthSpec, generate_scalability_suite,  # noqa: F401
                       generate_synthetic, load_dataset, write_dataset)
