//! Candidate ranking: the CupRank dual encoder, its training loop and
//! checkpoints, and the Random, Self-Ranking and RankNet baselines.

pub mod baselines;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod ranknet;
pub mod train;

pub use baselines::{parse_self_rank_reply, random_rank, self_rank};
pub use checkpoint::{
    checkpoint_digest, load_cuprank, load_ranknet, save_cuprank, save_ranknet, CheckpointHeader,
};
pub use layers::Params;
pub use loss::{listwise_loss, listwise_loss_generic, listwise_loss_grad};
pub use model::{
    cosine_score, CupRank, PairInput, PreparedGroup, RankScore, RankerConfig, RankerParams,
    ScoredCandidate,
};
pub use ranknet::{ranknet_train, RankNet, RankNetConfig};
pub use train::{mean_loss, top1_accuracy, train, train_groups, Adam, TrainLogEntry, TrainOutcome};
