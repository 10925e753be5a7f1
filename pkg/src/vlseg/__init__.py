"""Semi-supervised semantic segmentation with vision-language guidance.

A library built around five mechanisms: consistency training on unlabeled
images, initialization from a vision-language encoder, spatial fine-tuning of
its attention layers, a language-guided decoder over similarity maps, and
dense guidance from the frozen encoder steered by class-definition concepts.
"""

from .corpus import (AugmentationRecipe, IGNORE_INDEX, SegSample, SplitSpec,
                     apply_cutmix, feature_perturb, generate_shapes_corpus,
                     load_split, read_split, strong_augment_pair, weak_augment)
from .decoder import DecoderConfig, LanguageGuidedDecoder, SegModel, similarity_map
from .errors import ConfigurationError, NumericError, ValidationError
from .evalcli import (ConfusionMatrix, ResultsTable, accumulate, export_mask,
                      iou_report, load_results_table, plot_label_curves, voc_palette)
from .guidance import (ClassDefinitionSet, DensePseudoLabel, aggregate_concepts,
                       concept_scores, load_class_definitions, pseudolabel_image)
from .objective import (LossConfig, PredictionSet, consistency_loss,
                        guided_consistency_loss, lambda_schedule, supervised_loss,
                        total_loss, unlabeled_loss)
from .trainer import (FitResult, TrainConfig, Trainer, fit, load_config, poly_lr,
                      sliding_window_infer)
from .vlm import (HashTextEncoder, ParameterPartition, PatchVisionEncoder,
                  build_prompts, encode_text, partition_parameters,
                  random_text_anchors, tiny_encoder)

__version__ = "0.1.0"
