"""Gradient inversion lab: generative feature-domain attacks on shared FL
gradients, client-side defenses, and an experiment harness."""

__version__ = "0.1.0"

from .attack import (AttackConfig, AttackResult, extract_label_single,
                     extract_labels_batch, run_direct_pixel, run_gifd,
                     run_variant, select_best_trial)
from .data import (DatasetSpec, ImageStore, StyleTransform, apply_style,
                   load_dataset, save_images)
from .defense import (DefenseConfig, TransformEstimate, apply_defense,
                      apply_transform, clip_defense, gaussian_noise_defense,
                      infer_transform, soteria_defense, sparsify_defense)
from .flsim import (ExchangeRecord, load_public_report, load_truth,
                    produce_exchange, save_exchange)
from .invopt import (LossConfig, LRSchedule, fidelity_regularizer,
                     gradient_match_distance, lr_at, project_l1_ball,
                     spherical_step, total_attack_loss)
from .metrics import (MetricsRecord, PerceptualFeatures, compute_metrics, mse,
                      perceptual_distance, psnr, ssim)
from .models import (ClientBatch, GanTrainConfig, GradientReport,
                     LayeredGenerator, SmallConvNet, checkpoint_digest,
                     classification_loss, compute_batch_gradients,
                     load_checkpoint, save_checkpoint, train_classifier,
                     train_toy_gan)
