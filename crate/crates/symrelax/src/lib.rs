//! A miniature end-to-end compiler for dynamically shaped tensor programs:
//! symbolic shape annotations with forward deduction, a cross-level IR
//! bridging graph functions to loop-level tensor programs and library calls,
//! dynamic shape--aware passes, and a bytecode virtual machine.

pub mod deduce;
pub mod ir;
pub mod passes;
pub mod symexpr;
pub mod tensor;
pub mod text;
pub mod tprog;
pub mod vm;
