"""Link prediction on heterogeneous networks: concentrated random-walk
sampling, a connection-aware transformer, and an ensemble pair predictor."""

from .autodiff import (
    Parameter,
    Tensor,
    apply_primitive,
    backpropagate,
    check_gradients,
)
from .encoder import ConnectionVocab, EncoderConfig, EncodingTables, embed_sequence
from .experiment import ExperimentConfig, run_experiment, sensitivity_sweep
from .graph import (
    HetGraph,
    LinkDataset,
    NodeRef,
    UNREACHABLE,
    bfs_distance,
    build_graph,
    parse_edge_file,
    parse_link_file,
    split_links,
)
from .model import LinkModel, PredictorParams
from .objectives import (
    LossConfig,
    SequenceLabels,
    connection_attention,
    contrastive_loss,
    observation_loss,
    total_loss,
)
from .predictor import (
    RepresentationIndex,
    build_index,
    ensemble_predict,
    evaluate_metrics,
    predict_pair,
)
from .sampler import (
    ConcentratedSequence,
    SamplerConfig,
    concentrated_step,
    metapath_to_concentrated,
    sample_corpus,
    sample_sequence,
)
from .trainer import Adam, TrainConfig, fit, train_epoch

__version__ = "0.1.0"
