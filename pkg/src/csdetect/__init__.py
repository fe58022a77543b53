"""Point-object detection with compressed-sensing output codes.

The pipeline: point sets are encoded onto L random lines as sparse
distance vectors, compressed to short dense codes by a Gaussian sensing
matrix, regressed from images by a small trainable network, recovered by
L1 minimization, and decoded back to 2D detections by mean-shift
clustering. The recovery layer is differentiable through dedicated
gradient rules (exact and batch-approximate), verified against a
smoothed-problem finite-difference oracle.
"""

from .decoding import DecodeConfig, Detection, decode, decode_line, mean_shift
from .encoding import (DenseCode, PatchShape, PointSet, ProjectionGeometry,
                       SparseCode, encode_dense, encode_sparse, make_geometry)
from .evaluation import EvalConfig, EvalReport, evaluate, f1_score, match, report
from .recovery import (ListaParams, RecoveryConfig, ista_recover,
                       lista_forward, recover_all_lines, soft_threshold)
from .recovery_grad import (GradCheckInstance, RecoverySolution, SmoothConfig,
                            approx_grad_D, approx_grad_x, exact_grad_D,
                            exact_grad_x, finite_diff_check, smoothed_recover)
from .regressor import (LossConfig, MlpModel, TrainLabel, TrainState, forward,
                        load_checkpoint, loss, save_checkpoint, train)
from .sensing import (IndexSet, SensingMatrix, gram_submatrix,
                      load_sensing_matrix, make_sensing_matrix, submatrix_cols)
from .synthdata import (DatasetRecord, SynthConfig, generate, load_dataset,
                        make_dataset, save_dataset)

__version__ = "0.1.0"
