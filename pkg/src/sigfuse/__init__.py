"""Multi-feature fusion network with a client-server signature protocol."""

from .data import (AttributeTable, Dataset, FeatureBank, SyntheticSpec,
                   ViewSpec, lbp_extract, load_bank, parse_attr_file,
                   save_bank, split_dataset, synth_generate)
from .evaluate import (EvalReport, average_precision, combination_sweep,
                       evaluate_mask, report_emit)
from .model import (BranchParams, FeatureKind, HybridNet, PROFILES, Profile,
                    TrunkParams, branch_forward, build_net, load_model,
                    merge_sum, net_backward, net_forward, save_model,
                    set_trainable, trunk_forward)
from .nn import (DenseLayer, LayerGrad, ShapeError, bce_loss, dense_backward,
                 dense_forward, finite_diff_check, make_rng, relu, sgd_step,
                 sigmoid)
from .protocol import (SignatureServer, client_query, decode_request,
                       encode_request, serve)
from .training import (TrainConfig, TrainResult, train_allfeatnet,
                       train_allfeatnetinit, train_dedicated, train_moddrop,
                       train_multistage_seedinit, train_regime)

__version__ = "0.1.0"
