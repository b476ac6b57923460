//! Legalization: rewrite graph-level operator calls into calls to derived
//! loop-level tensor programs, leaving already-lowered calls untouched.

use std::collections::HashMap;

use super::{env_insert, fresh_prim_name, param_env, static_ann, PassError};
use crate::deduce::apply_rule;
use crate::ir::{Annotation, Binding, Body, Expr, Module, OpName};
use crate::tprog::derive_prim;

/// Lower every `CallOp` with known shapes to a `CallTir` against a freshly
/// derived tensor program. `unique` has no loop-level form and becomes a
/// builtin library call with a rank-only output.
pub fn legalize(m: &Module) -> Result<Module, PassError> {
    let mut out = m.clone();
    let mut next_id = m.next_sym_id;
    let names: Vec<String> = m.graph_funcs.keys().cloned().collect();
    for name in names {
        let mut f = out.graph_funcs[&name].clone();
        let mut env = param_env(&f);
        let mut body = f.body.clone();
        legalize_body(&mut out, &mut body, &mut env, &mut next_id)?;
        f.body = body;
        out.graph_funcs[&name] = f;
    }
    out.next_sym_id = next_id;
    Ok(out)
}

fn legalize_body(
    m: &mut Module,
    body: &mut Body,
    env: &mut HashMap<String, Annotation>,
    next_id: &mut u32,
) -> Result<(), PassError> {
    for block in &mut body.blocks {
        for b in block.bindings_mut() {
            if let Binding::Bind { var, value, .. } = b {
                match value {
                    Expr::CallOp { .. } => {
                        let var = var.clone();
                        *value = legalize_call(m, &var, value, env, next_id)?;
                    }
                    Expr::If { cond: _, then_body, else_body } => {
                        let mut env1 = env.clone();
                        legalize_body(m, then_body, &mut env1, next_id)?;
                        let mut env2 = env.clone();
                        legalize_body(m, else_body, &mut env2, next_id)?;
                    }
                    _ => {}
                }
            }
            env_insert(env, b);
        }
    }
    Ok(())
}

fn legalize_call(
    m: &mut Module,
    var: &str,
    value: &Expr,
    env: &HashMap<String, Annotation>,
    next_id: &mut u32,
) -> Result<Expr, PassError> {
    let Expr::CallOp { op, attrs, args } = value else { unreachable!() };
    let arg_anns: Vec<Annotation> = args.iter().map(|a| static_ann(a, env)).collect();
    let out_ann = apply_rule(*op, attrs, &arg_anns).ann;

    if *op == OpName::Unique {
        if !m.extern_decls.iter().any(|e| e == "unique") {
            m.extern_decls.push("unique".to_string());
        }
        return Ok(Expr::CallDpsLibrary {
            extern_name: "unique".to_string(),
            args: args.clone(),
            out_ann,
        });
    }

    let name = fresh_prim_name(m, &format!("{}_{}", op.name(), var));
    let prim = derive_prim(*op, attrs, &arg_anns, &out_ann, &name, next_id)?;
    m.prim_funcs.insert(name.clone(), prim);

    // tensor-valued arguments become kernel buffers; shape values inform
    // only the derived program's dims
    let tensor_args: Vec<Expr> = args
        .iter()
        .zip(&arg_anns)
        .filter(|(_, a)| matches!(a, Annotation::Tensor { .. }))
        .map(|(e, _)| e.clone())
        .collect();
    Ok(Expr::CallTir { prim: name, args: tensor_args, out_ann })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deduce::annotate_module;
    use crate::ir::well_formed;
    use crate::text::parse_module;

    fn prep(src: &str) -> Module {
        let (m, _) = annotate_module(&parse_module(src).unwrap()).unwrap();
        m
    }

    #[test]
    fn pipeline_with_unique_and_match_cast() {
        let m = prep(
            "fn main(x: Tensor((n, 4), f32)) -> Tensor sym(n) {\n\
               lv0 = flatten(x);\n\
               s = shape(n, 4);\n\
               lv1 = reshape(lv0, s);\n\
               lv2 = exp(lv1);\n\
               f = flatten(lv2);\n\
               u = unique(f);\n\
               v = match_cast(u, Tensor((m,), f32));\n\
               return v;\n\
             }\n",
        );
        let out = legalize(&m).unwrap();
        assert_eq!(out.prim_funcs.len(), 4);
        let f = &out.graph_funcs["main"];
        let mut tirs = 0;
        let mut libs = 0;
        let mut casts = 0;
        for b in f.body.blocks.iter().flat_map(|bl| bl.bindings()) {
            match b {
                Binding::Bind { value: Expr::CallTir { .. }, .. } => tirs += 1,
                Binding::Bind { value: Expr::CallDpsLibrary { extern_name, .. }, .. } => {
                    assert_eq!(extern_name, "unique");
                    libs += 1;
                }
                Binding::MatchCast { .. } => casts += 1,
                _ => {}
            }
        }
        assert_eq!((tirs, libs, casts), (4, 1, 1));
        assert!(out.extern_decls.contains(&"unique".to_string()));
        assert!(well_formed(&out).is_empty());
    }

    #[test]
    fn idempotent_on_lowered_module() {
        let m = prep(
            "fn main(x: Tensor((n,), f32)) -> Tensor sym(n) {\n\
               y = exp(x);\n\
               return y;\n\
             }\n",
        );
        let once = legalize(&m).unwrap();
        let twice = legalize(&once).unwrap();
        assert_eq!(once.prim_funcs.len(), twice.prim_funcs.len());
        assert_eq!(
            crate::text::print_module(&once),
            crate::text::print_module(&twice)
        );
    }

    #[test]
    fn matmul_add_gets_two_kernels() {
        let m = prep(
            "fn main(a: Tensor((n, k), f32), b: Tensor((k, m), f32), c: Tensor((n, m), f32)) \
             -> Tensor sym(n, k, m) {\n\
               p = matmul(a, b);\n\
               q = add(p, c);\n\
               return q;\n\
             }\n",
        );
        let out = legalize(&m).unwrap();
        assert_eq!(out.prim_funcs.len(), 2);
        assert!(well_formed(&out).is_empty());
    }

    #[test]
    fn rank_only_input_needs_match_cast() {
        let m = prep(
            "fn main(x: Tensor(ndim=1, f32)) -> Tensor sym() {\n\
               y = exp(x);\n\
               return y;\n\
             }\n",
        );
        let err = legalize(&m).unwrap_err();
        assert!(err.to_string().contains("match_cast"), "{err}");
    }
}
