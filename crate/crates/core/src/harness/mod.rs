//! Desk-scale classification experiments: data, MLPs, optimizers, the
//! training loop and ablation grids.

pub mod ablation;
pub mod data;
pub mod model;
pub mod optim;
pub mod train;

pub use ablation::{
    mean_std, run_ablation, write_ablation_csv, write_ablation_json, AblationAxis, AblationCell, AblationRow,
    AblationSpec, AblationTable, AxisValue, GeneratorSource,
};
pub use data::{
    load_mnist_dir, load_mnist_idx, make_synthetic, mnist_dir_from_env, synthetic_splits, DataSplits, Dataset, Split,
    DATA_DIR_ENV,
};
pub use model::{accuracy, MlpSpec};
pub use optim::{adam_step, sgd_step, AdamParams, AdamState, Optimizer, OptimizerKind};
pub use train::{
    evaluate, evaluate_params, train, train_with_search, LrTrial, McncSetup, TrainConfig, TrainResult, TrainedModel,
    DEFAULT_LR_SEARCH,
};
