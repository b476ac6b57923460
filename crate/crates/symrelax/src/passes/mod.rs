//! Module-to-module transformations: legalization to tensor programs,
//! operator fusion, partial library lowering, and memory planning.

use std::collections::HashMap;

use thiserror::Error;

use crate::deduce::apply_rule;
use crate::ir::{Annotation, Binding, Expr, Function, Module, ShapeSpec};
use crate::symexpr::SymExpr;
use crate::tprog::DeriveError;

mod fuse;
mod legalize;
mod library;
mod plan;

pub use fuse::{fuse_ops, fuse_tensor_ir, FusionGroup};
pub use legalize::legalize;
pub use library::{default_registry, lower_to_library, LibraryPattern};
pub use plan::{plan_memory, StorageDesc, StoragePlan};

#[derive(Debug, Error)]
pub enum PassError {
    #[error(transparent)]
    Derive(#[from] DeriveError),
    #[error("invalid custom fusion group: {0}")]
    InvalidCustomGroup(String),
    #[error("fusion group `{0}` is not a straight line of tensor-program calls")]
    NonStraightLineGroup(String),
    #[error("pass requires a lowered module: {0}")]
    NotLowered(String),
}

/// Best static annotation for an expression given the per-variable
/// environment. Unlike full deduction this never records checks; it is used
/// by passes to recover precise shapes even where a written annotation is
/// deliberately coarse.
pub(crate) fn static_ann(e: &Expr, env: &HashMap<String, Annotation>) -> Annotation {
    match e {
        Expr::Var(n) => env.get(n).cloned().unwrap_or(Annotation::Object),
        Expr::ConstTensor { dims, data } => Annotation::tensor(
            dims.iter().map(|d| SymExpr::constant(*d)).collect(),
            data.dtype(),
        ),
        Expr::ShapeLit(dims) => Annotation::Shape { spec: ShapeSpec::Known(dims.clone()) },
        Expr::TupleMake(elems) => {
            Annotation::Tuple(elems.iter().map(|x| static_ann(x, env)).collect())
        }
        Expr::TupleGet(x, i) => match static_ann(x, env) {
            Annotation::Tuple(elems) if *i < elems.len() => elems[*i].clone(),
            _ => Annotation::Object,
        },
        Expr::CallOp { op, attrs, args } => {
            let anns: Vec<Annotation> = args.iter().map(|a| static_ann(a, env)).collect();
            let out = apply_rule(*op, attrs, &anns);
            if out.conflict.is_some() {
                Annotation::Object
            } else {
                out.ann
            }
        }
        Expr::CallTir { out_ann, .. } | Expr::CallDpsLibrary { out_ann, .. } => out_ann.clone(),
        Expr::AllocTensor { dims, dtype, .. } => Annotation::tensor(dims.clone(), *dtype),
        _ => Annotation::Object,
    }
}

/// Record the binding's precise annotation in the environment: explicit
/// (match_cast) assertions win, otherwise the statically recovered one.
pub(crate) fn env_insert(env: &mut HashMap<String, Annotation>, b: &Binding) {
    let ann = match b {
        Binding::MatchCast { ann, .. } => ann.clone(),
        Binding::Bind { value, ann, .. } => {
            let precise = static_ann(value, env);
            if precise == Annotation::Object {
                ann.clone().unwrap_or(Annotation::Object)
            } else {
                precise
            }
        }
    };
    env.insert(b.var().to_string(), ann);
}

/// Initial environment for a function: its parameter annotations.
pub(crate) fn param_env(f: &Function) -> HashMap<String, Annotation> {
    f.params.iter().cloned().collect()
}

/// Names a module has not used yet for a tensor program.
pub(crate) fn fresh_prim_name(m: &Module, base: &str) -> String {
    if !m.prim_funcs.contains_key(base) {
        return base.to_string();
    }
    let mut k = 1;
    loop {
        let name = format!("{}_{}", base, k);
        if !m.prim_funcs.contains_key(&name) {
            return name;
        }
        k += 1;
    }
}
