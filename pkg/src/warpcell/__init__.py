"""Spline-warped recurrent cells for tracking memory through motion, in plain numpy."""

from .cells import (CellState, ConvLSTMParams, TrajLSTMParams, WarpLSTMParams, convlstm_step, init_bottleneck,
                    init_convlstm, init_trajlstm, init_warplstm, predict_displacements, run_sequence, trajlstm_step,
                    warplstm_step)
from .gradcheck import DiffOp, GradReport, finite_diff_check
from .matching import AttentionParams, CorrespondenceHead, attention_pool, avg_pool_spatial, correspondence_score, roi_pool
from .spline import (ControlPointSet, InterpolationError, SplineInterpolant, boundary_points, dense_flow,
                     eval_interpolant, grid_control_points, solve_interpolant, sparse_warp)
from .tensor import ConvParams, bilinear_sample, conv2d, load_tensor, save_tensor
from .tubelets import Box, Detection, Tubelet, frame_map, link_tubelets, make_pairs, split_by_combined_label

__version__ = "0.1.0"
