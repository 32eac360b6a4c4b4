//! Block-wise reconstruction: the block, global and intra-block losses,
//! their fusion, and the per-block Adam loop.

mod adam;
mod engine;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use engine::{
    measure_block, reconstruct_block, reconstruct_cached, run_mgrq, Balance, BatchTargets, BlockCache, BlockObjective,
    Components, FpTrace, LogRow, LossLog, MgrqOutput, ReconstructionConfig,
};
pub use loss::{
    auto_balance, block_ibls_loss, ebgs_loss, fuse_losses, ibls_loss, mse, obwr_loss, LossBreakdown, BALANCE_FLOOR,
    BALANCE_MAX, BALANCE_MIN,
};
