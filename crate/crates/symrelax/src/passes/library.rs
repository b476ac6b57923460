//! Partial library lowering: rewrite regions matching registered operator
//! chains into destination-passing library calls, leaving the rest for
//! later passes.

use std::collections::{HashMap, HashSet};

use super::fuse::collect_uses;
use super::{env_insert, param_env, static_ann, PassError};
use crate::ir::{Annotation, Binding, Block, Expr, Module, OpName};

/// A linear operator chain a library routine covers, matched against
/// tensor-program provenance hints.
#[derive(Clone)]
pub struct LibraryPattern {
    pub name: String,
    /// Consecutive operator hints, in dataflow order.
    pub ops: Vec<OpName>,
    pub extern_name: String,
    /// Optional availability predicate over (input annotations, output
    /// annotation) of the matched region.
    pub available: Option<fn(&[Annotation], &Annotation) -> bool>,
}

impl LibraryPattern {
    pub fn chain(name: &str, ops: Vec<OpName>, extern_name: &str) -> LibraryPattern {
        LibraryPattern {
            name: name.to_string(),
            ops,
            extern_name: extern_name.to_string(),
            available: None,
        }
    }
}

/// Library routines the reference runtime ships with.
pub fn default_registry() -> Vec<LibraryPattern> {
    // arity gates keep regions whose positional inputs cannot be
    // reconstructed (e.g. fused kernels that deduplicated a repeated
    // operand) on the kernel path
    let mut linear =
        LibraryPattern::chain("linear_bias", vec![OpName::Matmul, OpName::Add], "linear_bias");
    linear.available = Some(|ins, _| ins.len() == 3);
    let mut matmul = LibraryPattern::chain("matmul", vec![OpName::Matmul], "matmul");
    matmul.available = Some(|ins, _| ins.len() == 2);
    vec![linear, matmul]
}

/// Rewrite maximal non-overlapping matches to `call_dps_library`. Scan is in
/// program order; at each position the longest matching pattern wins.
pub fn lower_to_library(m: &Module, registry: &[LibraryPattern]) -> Result<Module, PassError> {
    let mut patterns: Vec<&LibraryPattern> = registry.iter().collect();
    patterns.sort_by_key(|p| std::cmp::Reverse(p.ops.len()));

    let mut out = m.clone();
    let names: Vec<String> = m.graph_funcs.keys().cloned().collect();
    for fname in &names {
        let f = &m.graph_funcs[fname];
        let uses = collect_uses(f);
        let mut env = param_env(f);
        let mut new_blocks = Vec::with_capacity(f.body.blocks.len());
        for (bi, block) in f.body.blocks.iter().enumerate() {
            let bindings = block.bindings();
            let mut rewritten: Vec<Binding> = Vec::with_capacity(bindings.len());
            let mut i = 0;
            while i < bindings.len() {
                let mut matched = false;
                for pat in &patterns {
                    if let Some(len) = try_match(m, f, bi, bindings, i, pat, &uses, &env) {
                        let members = &bindings[i..i + len];
                        rewritten.push(rewrite_region(members, pat, &env));
                        if !out.extern_decls.iter().any(|e| e == &pat.extern_name) {
                            out.extern_decls.push(pat.extern_name.clone());
                        }
                        for b in members {
                            env_insert(&mut env, b);
                        }
                        i += len;
                        matched = true;
                        break;
                    }
                }
                if !matched {
                    env_insert(&mut env, &bindings[i]);
                    rewritten.push(bindings[i].clone());
                    i += 1;
                }
            }
            new_blocks.push(match block {
                Block::Dataflow(_) => Block::Dataflow(rewritten),
                Block::Plain(_) => Block::Plain(rewritten),
            });
        }
        out.graph_funcs[fname].body.blocks = new_blocks;
    }
    Ok(out)
}

/// Number of consecutive bindings starting at `start` whose concatenated op
/// hints equal the pattern, chained through confined intermediates.
#[allow(clippy::too_many_arguments)]
fn try_match(
    m: &Module,
    _f: &crate::ir::Function,
    bi: usize,
    bindings: &[Binding],
    start: usize,
    pat: &LibraryPattern,
    uses: &super::fuse::Uses,
    env: &HashMap<String, Annotation>,
) -> Option<usize> {
    let mut covered = 0usize;
    let mut len = 0usize;
    while covered < pat.ops.len() {
        let b = bindings.get(start + len)?;
        let Binding::Bind { value: Expr::CallTir { prim, args, .. }, .. } = b else {
            return None;
        };
        let p = m.prim_funcs.get(prim)?;
        if p.op_hints.is_empty()
            || covered + p.op_hints.len() > pat.ops.len()
            || p.op_hints[..] != pat.ops[covered..covered + p.op_hints.len()]
        {
            return None;
        }
        if !args.iter().all(|a| matches!(a, Expr::Var(_) | Expr::ConstTensor { .. })) {
            return None;
        }
        if len > 0 {
            // chained through the previous member, which no one else sees
            let prev = bindings[start + len - 1].var();
            let consumes_prev = args.iter().any(|a| a.as_var() == Some(prev));
            if !consumes_prev
                || !uses.confined(prev, bi, start + len..start + len + 1)
            {
                return None;
            }
        }
        covered += p.op_hints.len();
        len += 1;
    }
    if covered != pat.ops.len() {
        return None;
    }
    if let Some(avail) = pat.available {
        let (inputs, out_ann) = region_io(&bindings[start..start + len], env);
        let in_anns: Vec<Annotation> = inputs
            .iter()
            .map(|e| static_ann(e, env))
            .collect();
        if !avail(&in_anns, &out_ann) {
            return None;
        }
    }
    Some(len)
}

/// External inputs (first-use order) and output annotation of a region.
fn region_io(
    members: &[Binding],
    _env: &HashMap<String, Annotation>,
) -> (Vec<Expr>, Annotation) {
    let defined: HashSet<&str> = members.iter().map(|b| b.var()).collect();
    let mut inputs: Vec<Expr> = Vec::new();
    for b in members {
        if let Binding::Bind { value: Expr::CallTir { args, .. }, .. } = b {
            for a in args {
                // keep duplicates: the routine's inputs are positional
                let internal = a.as_var().is_some_and(|v| defined.contains(v));
                if !internal {
                    inputs.push(a.clone());
                }
            }
        }
    }
    let out_ann = match members.last().unwrap().value() {
        Expr::CallTir { out_ann, .. } => out_ann.clone(),
        _ => Annotation::Object,
    };
    (inputs, out_ann)
}

fn rewrite_region(
    members: &[Binding],
    pat: &LibraryPattern,
    env: &HashMap<String, Annotation>,
) -> Binding {
    let (inputs, out_ann) = region_io(members, env);
    let last = members.last().unwrap();
    Binding::Bind {
        var: last.var().to_string(),
        ann: Some(out_ann.clone()),
        value: Expr::CallDpsLibrary { extern_name: pat.extern_name.clone(), args: inputs, out_ann },
        span: last.span(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deduce::annotate_module;
    use crate::ir::well_formed;
    use crate::passes::legalize;
    use crate::text::parse_module;

    fn prep(src: &str) -> Module {
        let (m, _) = annotate_module(&parse_module(src).unwrap()).unwrap();
        legalize(&m).unwrap()
    }

    fn lib_calls(m: &Module) -> Vec<String> {
        let mut out = Vec::new();
        for f in m.graph_funcs.values() {
            for b in f.body.blocks.iter().flat_map(|b| b.bindings()) {
                if let Expr::CallDpsLibrary { extern_name, .. } = b.value() {
                    out.push(extern_name.clone());
                }
            }
        }
        out
    }

    #[test]
    fn matmul_add_matches_linear_bias() {
        let m = prep(
            "fn main(a: Tensor((n, k), f32), b: Tensor((k, 4), f32), c: Tensor((n, 4), f32)) \
             -> Tensor sym(n, k) {\n\
               df {\n\
                 p = matmul(a, b);\n\
                 q = add(p, c);\n\
               }\n\
               return q;\n\
             }\n",
        );
        let out = lower_to_library(&m, &default_registry()).unwrap();
        assert_eq!(lib_calls(&out), vec!["linear_bias"]);
        assert!(out.extern_decls.contains(&"linear_bias".to_string()));
        assert!(well_formed(&out).is_empty());
    }

    #[test]
    fn empty_registry_is_identity() {
        let m = prep(
            "fn main(a: Tensor((n, n), f32)) -> Tensor sym(n) {\n\
               p = matmul(a, a);\n\
               return p;\n\
             }\n",
        );
        let out = lower_to_library(&m, &[]).unwrap();
        assert_eq!(crate::text::print_module(&out), crate::text::print_module(&m));
    }

    #[test]
    fn longest_pattern_wins_and_rest_remains() {
        // matmul feeds add, then another matmul consumes the result:
        // linear_bias claims the first two, the second matmul gets the
        // one-op pattern
        let m = prep(
            "fn main(a: Tensor((n, n), f32), c: Tensor((n, n), f32)) -> Tensor sym(n) {\n\
               df {\n\
                 p = matmul(a, a);\n\
                 q = add(p, c);\n\
                 r = matmul(q, a);\n\
               }\n\
               return r;\n\
             }\n",
        );
        let out = lower_to_library(&m, &default_registry()).unwrap();
        assert_eq!(lib_calls(&out), vec!["linear_bias", "matmul"]);
    }

    #[test]
    fn escaping_intermediate_blocks_the_chain() {
        let m = prep(
            "fn main(a: Tensor((n, n), f32), c: Tensor((n, n), f32)) -> Tuple(Tensor, Tensor) \
             sym(n) {\n\
               df {\n\
                 p = matmul(a, a);\n\
                 q = add(p, c);\n\
                 t = tuple(p, q);\n\
               }\n\
               return t;\n\
             }\n",
        );
        let out = lower_to_library(&m, &default_registry()).unwrap();
        // p escapes into the tuple, so only the bare matmul pattern applies
        assert_eq!(lib_calls(&out), vec!["matmul"]);
    }

    #[test]
    fn availability_predicate_filters() {
        let m = prep(
            "fn main(a: Tensor((n, n), f32)) -> Tensor sym(n) {\n\
               p = matmul(a, a);\n\
               return p;\n\
             }\n",
        );
        let mut reg = vec![LibraryPattern::chain("matmul", vec![OpName::Matmul], "matmul")];
        reg[0].available = Some(|_, _| false);
        let out = lower_to_library(&m, &reg).unwrap();
        assert!(lib_calls(&out).is_empty());
    }
}
