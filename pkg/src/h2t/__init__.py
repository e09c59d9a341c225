"""Unsupervised whole-slide representations from prototypical patterns.

Two stages: mine prototype vectors from a reference cohort with seeded
mini-batch k-means, then project each slide against them with weighted
average pooling. Around that core: pattern assignment maps with histogram
and co-localization features, a forward-only attention oracle, linear
probing with stratified folds and paired-t statistics, and isolation-forest
normality scoring.
"""

from .anomaly import IsolationForest, fit_forest, normality_score, normality_scores
from .attention import (AttentionConfig, TransformerWeights, mha_forward,
                        positional_encoding, positional_encoding_batch,
                        transformer_forward)
from .errors import ConfigError, DataError, H2TError, NumericError
from .evaluation import (FoldPlan, LinearProbe, TaskConfig, auroc,
                         average_precision, benjamini_hochberg,
                         compare_methods, macro_auroc, make_folds, mean_ap,
                         pearson, run_experiment, train_probe)
from .feature_store import (ClassSpec, CohortManifest, PatchRecord, SlideEntry,
                            SyntheticSpec, generate_synthetic_cohort,
                            load_manifest, read_slide_features, save_manifest,
                            write_slide_features)
from .pam import (ColocalizationMatrix, PatternAssignmentMap, build_pam,
                  colocalization, histogram, one_hot_pam)
from .projection import (SlideRepresentation, load_representation, project,
                         project_batch, save_representation)
from .prototypes import (PrototypeSet, assign_pattern, fit_features,
                         fit_prototypes, l2_normalize, load_prototypes,
                         save_prototypes)

__version__ = "0.1.0"
