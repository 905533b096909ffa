"""Sampled iterative Tikhonov regularization for streaming linear inverse
problems: row-block solvers with adaptive regularization-parameter
selection, classic ill-posed test problems, and a matrix-free
super-resolution forward model."""

from .exceptions import (InvalidArgumentError, MaxIterationsError,
                         NumericalBreakdownError, RejectedIncrementError,
                         SelectionFailedError, SingularSystemError,
                         StikError, UndefinedObjectiveError)
from .linops import (ComposedOperator, DenseOperator, IdentityOperator,
                     LinearOperator, RowBlockView, ScaledOperator,
                     StackedOperator, load_matrix, load_vector, row_block,
                     save_matrix, save_vector)
from .problems import (InverseProblem, TestProblemSpec, add_noise,
                       gen_test_problem, relative_error)
from .regparam import (AdaptiveSelector, FixedIncrement, GridSpec,
                       SelectionResult, SelectorContext, candidate_solve,
                       default_grid, full_data_select, hutchinson_trace,
                       loo_cv_value, sdp_select, select_lambda,
                       sgcv_objective, supre_objective, trace_term)
from .sampling import (SamplePlan, SampleSchedule, make_block_partition,
                       next_block)
from .solvers import (IterationRecord, LSQRResult, RunResult, lsqr_solve,
                      make_solver, run, tikhonov_direct, write_records_csv)
from .superres import (FrameModel, FrameSet, gen_frames, iter_frames,
                       make_affine_op, make_restriction_op, read_frame_dir,
                       read_pgm, synthetic_image, write_frame_dir, write_pgm)

__version__ = "0.1.0"
