"""From-scratch recurrent networks for yearly electricity load forecasting."""

from .linalg import (
    Activation,
    ConfigError,
    ShapeError,
    activation_grad,
    apply_activation,
    concat_rows,
    conv1d_same,
    hadamard,
    matmul,
)
from .cells import (
    CellState,
    ConvLstmParams,
    GruParams,
    LstmParams,
    RnnParams,
    StepCache,
    backward_sequence,
    convlstm_step,
    gru_step,
    init_params,
    lstm_step,
    rnn_step,
    run_bidirectional,
    run_sequence,
)
from .model import (
    AdamState,
    CheckpointFormatError,
    DenseHead,
    DivergenceError,
    ModelSpec,
    TrainConfig,
    TrainedModel,
    adam_update,
    checkpoint_load,
    checkpoint_save,
    forward,
    huber_grad,
    huber_loss,
    init_adam,
    init_model,
    named_parameters,
    train,
)
from .data import (
    G20_ENTITIES,
    ConsumptionSeries,
    ContinuityError,
    CoverageError,
    DataError,
    DegenerateScaleError,
    FormatError,
    InsufficientDataError,
    RangeError,
    Scaler,
    SplitSpec,
    WindowedDataset,
    WindowSample,
    filter_entities,
    fit_scaler,
    load_csv,
    make_windows,
    split,
    write_csv,
)
from .forecast import (
    ForecastReport,
    ForecastTrajectory,
    autoregressive_forecast,
    build_report,
    emit_plot_series,
    evaluate,
    growth_summary,
    predict_test_years,
)

__version__ = "0.1.0"
