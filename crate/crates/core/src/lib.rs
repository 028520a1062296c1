//! Per-agent credit assignment for sequential cooperative bandit teams.
//!
//! A team of `K` agents acts in a fixed order; agent `k` observes the action
//! of agent `k - 1` and all agents share one noisy team reward. The crate
//! provides:
//!
//! - [`reward_env`]: additive-plus-pairwise synthetic team rewards.
//! - [`policy`]: tabular Markov-1 chain policies, rollouts and PPO-clipped updates.
//! - [`exact_oracle`]: exact chain marginals, counterfactual (SeqAU) advantages,
//!   learnability, factoredness and bias-bound checks.
//! - [`ridge`]: the ridge-regression additive reward decomposition.
//! - [`estimators`]: CAPO (exact and fictitious sampling), CAPO-Direct,
//!   MA-GRPO, HA-GRPO and C3 advantage estimators.
//! - [`trainer`]: budget-matched training loops and regret tracking.
//! - [`harness`]: the experiment sweeps behind the `seqcredit` CLI.
//!
//! Agent indices and action indices are 0-based throughout.

pub mod error;
pub mod estimators;
pub mod exact_oracle;
pub mod harness;
pub mod policy;
pub mod reward_env;
pub mod ridge;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use estimators::{AdvantageTable, EstimatorId};
pub use exact_oracle::ChainLaw;
pub use policy::{ChainPolicy, PpoConfig, RolloutBatch};
pub use reward_env::{PairwiseReward, RewardModel};
pub use ridge::{AttributionFit, FeatureMatrix};
pub use trainer::{Method, TrainConfig, TrainTrace};
