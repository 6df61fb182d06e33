//! Compiler and cycle-level simulator for multi-board trapped-ion control
//! systems.

pub mod bench;
pub mod cfg;
pub mod codegen;
pub mod decimal;
pub mod interp;
pub mod ir;
pub mod isa;
pub mod liveness;
pub mod pipeline;
pub mod program;
pub mod regalloc;
pub mod scan;
pub mod sim;
pub mod ssa;
pub mod steptable;
