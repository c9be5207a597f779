"""slicematch: 2D slice to 3D volume rigid registration.

Transformer-style dense feature matching between a 2D frame and a 3D volume
(dual-softmax correspondences over linear-attention-refined tokens) feeding
either a differentiable weighted Procrustes solver or RANSAC, with an
optional mutual-information polish, plus the synthetic phantom pipeline and
evaluation harness around it.
"""

from .geometry import (CalibrationSpec, PoseError, RigidPose, apply, compose,
                       invert, load_pose, pose_error, save_pose)
from .volume import (Frame2D, Volume3D, extract_slice, load_frame, load_volume,
                     make_phantom, save_frame, save_volume, us_degrade)
from .features import (ExtractorConfig, ExtractorWeights, FeatureMap, OracleSpec,
                       TokenSequence, extract_features, oracle_descriptors,
                       positional_encoding, random_extractor_weights, tokenize)
from .attention import (AttentionWeights, linear_attention, loftr_transform,
                        random_attention_weights, zero_attention_weights)
from .matching import (ConfidenceMatrix, MatchSet, dual_softmax, fine_refine,
                       gumbel_sample, hard_matches, refine_matchset, score_matrix)
from .pose import (DegenerateMatchesError, IllConditionedGradientError,
                   ProcrustesGradient, pose_loss, pose_loss_and_grad, ransac_pose,
                   weighted_procrustes)
from .mi import MiConfig, MiRefineResult, center_align_pose, mi_refine, mutual_information

__version__ = "0.1.0"
