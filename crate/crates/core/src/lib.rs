//! Table fact verification driven by executable logic-form programs.

pub mod encode;
pub mod exec;
pub mod gvat;
pub mod learn;
pub mod program;
pub mod search;
pub mod select;
pub mod synth;
pub mod tabular;
pub mod verbalize;
