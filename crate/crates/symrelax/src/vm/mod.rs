//! Bytecode lowering and the reference runtime: a register machine with a
//! host-side shape heap, a library registry, and a pre-lowering graph
//! interpreter used as the testing oracle.

use thiserror::Error;

use crate::deduce::DeduceError;
use crate::tensor::{Storage, Tensor};
use crate::tprog::ExecError;

mod asm;
mod exec;
mod interp;
mod lower;
pub mod ops;
mod registry;

pub use asm::{parse_program, print_program};
pub use exec::{run_vm, ExecStats};
pub use interp::interpret;
pub use lower::{
    lower_to_vm, DimPat, Instruction, Operand, ShapeBin, ShapePat, ShapeStep, VMFunction,
    VMProgram,
};
pub use registry::{default_library_registry, LibraryRegistry, Routine};

/// A first-class runtime value: tensors, shape tuples, tuples, and raw
/// storages introduced by memory planning.
#[derive(Clone, Debug)]
pub enum RuntimeValue {
    Tensor(Tensor),
    Shape(Vec<i64>),
    Tuple(Vec<RuntimeValue>),
    Storage(Storage),
}

impl RuntimeValue {
    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            RuntimeValue::Tensor(t) => Some(t),
            _ => None,
        }
    }

    /// Short structural description used in shape-check diagnostics.
    pub fn describe(&self) -> String {
        match self {
            RuntimeValue::Tensor(t) => format!(
                "Tensor(({}), {})",
                t.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", "),
                t.dtype.name()
            ),
            RuntimeValue::Shape(dims) => format!(
                "Shape({})",
                dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            ),
            RuntimeValue::Tuple(elems) => format!(
                "Tuple({})",
                elems.iter().map(|e| e.describe()).collect::<Vec<_>>().join(", ")
            ),
            RuntimeValue::Storage(s) => format!("Storage({} bytes)", s.borrow().len()),
        }
    }
}

impl std::fmt::Display for RuntimeValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RuntimeValue::Tensor(t) => {
                write!(f, "{} ", self.describe())?;
                let items: Vec<String> = match t.dtype {
                    crate::ir::DType::F32 => {
                        t.to_f32_vec().iter().map(|x| x.to_string()).collect()
                    }
                    crate::ir::DType::I64 => {
                        t.to_i64_vec().iter().map(|x| x.to_string()).collect()
                    }
                    crate::ir::DType::Bool => t
                        .to_bool_vec()
                        .iter()
                        .map(|x| if *x { "1".into() } else { "0".into() })
                        .collect(),
                };
                write!(f, "[{}]", items.join(", "))
            }
            RuntimeValue::Tuple(elems) => {
                write!(f, "(")?;
                for (i, e) in elems.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{}", e)?;
                }
                write!(f, ")")
            }
            _ => write!(f, "{}", self.describe()),
        }
    }
}

#[derive(Debug, Error)]
pub enum VmError {
    #[error("unknown entry function `{0}`")]
    UnknownEntry(String),
    #[error("entry `{name}` expects {expected} arguments, got {got}")]
    Arity { name: String, expected: usize, got: usize },
    #[error("shape check {site} failed: expected {expected}, got {actual}")]
    ShapeCheckFailed { site: usize, expected: String, actual: String },
    #[error("{context}: kernel error: {source}")]
    Kernel {
        context: String,
        #[source]
        source: ExecError,
    },
    #[error("{context}: library `{name}` failed: {message}")]
    Library { context: String, name: String, message: String },
    #[error("unresolved extern `{0}`")]
    UnresolvedExtern(String),
    #[error("module is not fully lowered: {0}")]
    NotPlanned(String),
    #[error(transparent)]
    Deduce(#[from] DeduceError),
    #[error("{0}")]
    Invalid(String),
}

/// Branch-condition truthiness: a tensor is true when its first element is
/// nonzero.
pub(crate) fn truthy(v: &RuntimeValue) -> Result<bool, VmError> {
    match v {
        RuntimeValue::Tensor(t) => {
            if t.num_elements() == 0 {
                return Ok(false);
            }
            Ok(match t.dtype {
                crate::ir::DType::F32 => t.get_f32(0) != 0.0,
                crate::ir::DType::I64 => t.get_i64(0) != 0,
                crate::ir::DType::Bool => t.get_bool(0),
            })
        }
        other => Err(VmError::Invalid(format!(
            "branch condition must be a tensor, got {}",
            other.describe()
        ))),
    }
}
