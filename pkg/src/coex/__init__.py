"""Blind image denoising via a competition of convolutional experts.

Small experts specialize onto automatically discovered noise domains through
winner-take-all training; a lightweight gating network routes each image to
a single expert at inference, so ensemble size never increases inference
cost.
"""

from .rng import Rng, derive_seed
from .nn import (AdamState, ShapeMismatchError, adam_step, conv3x3_backward,
                 conv3x3_forward, fc_backward, fc_forward, fd_check_params,
                 gap_backward, gap_forward, mse_loss, prelu_backward,
                 prelu_forward, relu_backward, relu_forward, softmax,
                 softmax_cross_entropy)
from .networks import (CheckpointError, CheckpointShapeError,
                       CheckpointTruncatedError, CheckpointVersionError,
                       ExpertConfig, ExpertNet, GateConfig, GateNet,
                       ModelBundle, build_expert, build_gate, count_params,
                       expert_denoise, expert_gradient_report, gate_logits,
                       gate_gradient_report, load_checkpoint, save_checkpoint)
from .noise import (AWGN, JPEG, EvalGrid, NoiseSampler, NoiseSpec, add_awgn,
                    apply_noise, dct8x8, idct8x8, jpeg_degrade, load_image,
                    make_eval_grid, quant_table, sample_noise_spec,
                    save_image, synth_dataset, synth_image)
from .training import (CompetitionTrainer, PatchBatch, TrainConfig, TrainLog,
                       clone_experts, competition_step, compute_loss_vector,
                       param_digest, pretrain_step, sample_patch_batch, train,
                       winner)
from .evaluation import (AssignmentGrid, EvalReport, assignment_grid,
                         denoise_blind, effective_complexity, evaluate_grid,
                         psnr, routing_patch_plan, select_expert, ssim)

__version__ = "0.1.0"
