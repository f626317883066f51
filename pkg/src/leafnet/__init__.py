"""leafnet: a self-contained residual-CNN training toolkit.

Tape-based autodiff over numpy arrays, residual backbones with a
regularised classification head, partial-layer fine-tuning, cosine-decay
plus plateau learning-rate control, callback-driven training with
bit-exact checkpoints, an augmented image pipeline, and a full multiclass
metric suite.
"""

from . import backend
from .errors import LeafnetError
from .layers import (
    BatchNormState,
    ConvParams,
    DenseParams,
    DropoutParams,
    ResidualBlockParams,
    batchnorm_forward,
    conv2d_forward,
    cross_entropy_loss,
    dense_forward,
    dropout,
    global_avg_pool,
    leaky_relu,
    max_pool2d,
    relu,
    residual_block_forward,
    softmax,
)
from .models import (
    HeadSpec,
    LayerSpec,
    ModelGraph,
    attach_head,
    build_backbone,
    parameter_summary,
    set_trainable,
    strip_head,
)
from .optim import (
    CosineSchedule,
    OptimizerState,
    PlateauReducer,
    apply_step,
    cosine_lr,
    plateau_update,
)
from .tensor import (
    Tape,
    Tensor,
    backward,
    elementwise,
    grad_check,
    matmul,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_sum,
)
from .training import (
    EpochRecord,
    TrainConfig,
    TrainResult,
    evaluate,
    split_train_val,
    train,
)

__version__ = "0.1.0"
