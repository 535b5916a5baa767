"""Statistical texture operators with verified reverse-mode gradients."""

from .tensor import (LinearLayer, Mlp, ShapeError, Tensor, TsrFormatError,
                     apply_linear_cols, apply_mlp, avg_pool2d, check_gradient,
                     concat, conv2d, global_avg_pool, init_linear, init_mlp,
                     leaky_relu, load_tsr, matmul, max_all, min_all,
                     nearest_upsample, save_tsr, softmax_axis)
from .qco import (QuantOutput1D, QuantOutput2D, cooccurrence_encode, count_1d,
                  count_2d, encode_average_1d, encode_average_2d, pair_levels,
                  qco1d, qco2d, quantization_levels, quantize_encode,
                  similarity_map)
from .tem import (TemParams, build_level_graph, init_tem_params, reassign,
                  reconstruct_levels, reference_hist_equalize, tem_forward)
from .ptfem import (PtfemBranch, PtfemParams, glcm_oracle, init_ptfem_params,
                    ptfem_forward, region_bounds, texture_unit)
from .stlnet import (ConvLayer, Flags, StlnetParams, TrainConfig,
                     backbone_forward, cross_entropy_mean, evaluate_miou,
                     init_stlnet_params, load_checkpoint, named_parameters,
                     ohem_loss, poly_lr, save_checkpoint, stlnet_forward,
                     total_loss, train)
from .data import (SegSample, generate_dataset, generate_sample, load_dataset,
                   load_png, save_dataset, save_png)
from .verify import THRESHOLDS, qco_interior_margin, run_gradient_suite

__all__ = [n for n in dir() if not n.startswith("_")]
