//! The gated recurrent filter: memory update, state prediction and state
//! update units around an extended-Kalman recursion.

mod cell;
mod params;

pub use cell::{
    build_input_mug, build_input_spg, build_input_sug, filter_trajectory, initial_memory,
    memory_update_gate, mug_input, nn_forward, normalize_state, spg_input, state_prediction_gate,
    state_update_gate, step, sug_input, unroll, CellState, FilterRun, GateMask, MemoryVars,
    StepRecord, StepVars, VARIANCE_FLOOR,
};
pub use params::{
    Block, BlockId, BlockRecord, BlockVars, Checkpoint, GateDims, GateParams, ParamVars,
    StateScaling, CHECKPOINT_VERSION,
};
