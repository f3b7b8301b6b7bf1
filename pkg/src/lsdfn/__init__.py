"""Large-sampling-field dynamic filtering.

Position-specific kernels applied over a strided s x s grid of sampled
neighborhoods, fused with split sample/position attention. Ships the operator
with analytical gradients, canonical-order reference implementations,
effective-receptive-field measurement, and a synthetic optical-flow training
harness.
"""

from .tensor import (Tensor, Rng, derive_seed, gaussian_fill, read_tensor,
                     write_tensor, TensorFileError, BadMagicError,
                     BadHeaderError, TruncatedPayloadError, conv2d_shared,
                     conv2d_shared_backward, finite_diff_grad, grad_check,
                     GradCheckReport)
from .layer import (LsDfnConfig, LsDfnParams, LsDfnGrads, KernelField,
                    AttentionField, SampledFeatures, sample_offsets,
                    split_kernel_params, interleave_kernel_params,
                    assemble_kernel, build_attention, sample_conv,
                    attended_sample_conv, fuse_samples, lsdfn_forward,
                    lsdfn_backward, init_params, count_params,
                    attention_weight_counts, save_params, load_params)
from .reference import (sampled_conv_reference, full_attention_reference,
                        outer_attention, dfn_reference,
                        lsdfn_forward_reference)
from .stack import Conv2dStage, ReluStage, LsDfnStage, ConcatSkipStage, Stack
from .erf import (ErfMap, ErfMetrics, compute_erf, erf_metrics, erf_to_image,
                  sampling_footprint, lsdfn_footprint, stack_footprint)
from .images import (pgm_bytes, ppm_bytes, write_pgm, write_ppm,
                     parse_netpbm_header, flow_to_rgb)
from .flow import (FlowSample, ModelSpec, TrainConfig, MetricsRow,
                   gen_flow_dataset, dataset_arrays, aepe, aepe_batch,
                   build_model, parameter_report, matched_baseline_width,
                   predict_all, train, save_model, load_model)

__all__ = [n for n in dir() if not n.startswith("_")]
