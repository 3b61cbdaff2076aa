//! Experiment drivers shared by the command-line tool and the acceptance suite.

pub mod equivalence;
pub mod mlp;
pub mod mnist;
pub mod random_net;

pub use equivalence::{equivalence_check, relative_deviation, EquivalenceReport};
pub use mlp::{train_mlp, MlpConfig, MlpReport};
pub use mnist::{log_space, report_rows, run_mnist, MnistConfig, MnistResult};
pub use random_net::{run_random_net, RandomNetConfig, RandomNetResult, TradeoffPoint};
