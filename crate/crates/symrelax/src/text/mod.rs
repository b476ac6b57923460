//! Textual syntax: lexer, parser, canonical printer, and the RTEN tensor
//! exchange format.

use thiserror::Error;

use crate::ir::SourceSpan;

pub mod lexer;
pub mod parser;
pub mod printer;
pub mod rten;

pub use parser::parse_module;
pub use printer::{annotation_str, print_module};

#[derive(Clone, Debug, Error)]
#[error("syntax error at {}:{}: {message}", span.start_line, span.start_col)]
pub struct SyntaxError {
    pub span: SourceSpan,
    pub message: String,
}

/// Canonical form of a module source: parse, then print.
pub fn canonical(src: &str) -> Result<String, SyntaxError> {
    Ok(print_module(&parse_module(src)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Annotation, Binding, Block, DType, Expr, OpAttrs, OpName, ShapeSpec};
    use crate::symexpr::SymExpr;
    use crate::tprog::PatternKind;

    /// The printed form must be a fixpoint of parse-then-print.
    fn assert_roundtrip(src: &str) {
        let canon = canonical(src).expect("parses");
        let again = canonical(&canon).expect("canonical form parses");
        assert_eq!(canon, again, "printer is not a parse fixpoint for:\n{}", src);
    }

    #[test]
    fn roundtrip_flatten_pipeline() {
        assert_roundtrip(
            "fn main(x: Tensor((n, 4), f32)) -> Tensor((4*n,), f32) sym(n) {\n\
               df {\n\
                 lv0: Tensor((4*n,), f32) = flatten(x);\n\
                 lv1 = exp(lv0);\n\
               }\n\
               return lv1;\n\
             }\n",
        );
    }

    #[test]
    fn roundtrip_match_cast_and_if() {
        assert_roundtrip(
            "fn f(x: Tensor(ndim=2, f32), c: Tensor((1,), bool)) -> Tensor sym() {\n\
               y = match_cast(x, Tensor((p, q), f32));\n\
               z = if c {\n\
                 a = exp(y);\n\
                 return a;\n\
               } else {\n\
                 return y;\n\
               };\n\
               return z;\n\
             }\n",
        );
    }

    #[test]
    fn roundtrip_prim_fn_reduce() {
        assert_roundtrip(
            "prim_fn mm(A: Buffer((n, k), f32), B: Buffer((k, m), f32), O: Buffer((n, m), f32)) \
             sym(k) outputs(1) hints(matmul) {\n\
               stage O(i < n, j < m) reduce(r < k) init(0.0) combine(sum) {\n\
                 (A[i, r] * B[r, j])\n\
               }\n\
             }\n",
        );
    }

    #[test]
    fn roundtrip_library_and_planning_forms() {
        assert_roundtrip(
            "extern \"matmul\";\n\
             fn g(x: Tensor((n, n), f32)) -> Object sym(n) bound(n <= 64) {\n\
               s = alloc_storage(4*n*n, f32);\n\
               t = alloc_tensor(s, (n, n), f32);\n\
               u = library_call(\"matmul\", (x, x), (t,));\n\
               return t;\n\
             }\n",
        );
    }

    #[test]
    fn roundtrip_tuples_shapes_consts() {
        assert_roundtrip(
            "fn h(s: Shape((a, b))) -> Tuple(Tensor, Shape) sym(a, b) {\n\
               df {\n\
                 c = const(f32, (2, 2), [1.0, 0.0, 0.0, 1.0]);\n\
                 p = tuple(c, s);\n\
                 q = p.0;\n\
               }\n\
               return tuple(q, shape(a + b, 2*a));\n\
             }\n",
        );
    }

    #[test]
    fn roundtrip_split_and_attrs() {
        assert_roundtrip(
            "fn k(x: Tensor((4, n), f32)) -> Tensor sym(n) {\n\
               df {\n\
                 t = permute_dims(x, axes=(1, 0));\n\
                 p = split(t, sections=2, axis=1);\n\
                 a = p.0;\n\
                 b = sum(a, axis=0);\n\
               }\n\
               return b;\n\
             }\n",
        );
    }

    #[test]
    fn parse_builds_expected_structure() {
        let m = parse_module(
            "fn main(x: Tensor((n, 4), f32)) -> Tensor((4*n,), f32) sym(n) {\n\
               df {\n\
                 lv0 = flatten(x);\n\
               }\n\
               return lv0;\n\
             }\n",
        )
        .unwrap();
        let f = &m.graph_funcs["main"];
        assert_eq!(f.sym_vars.len(), 1);
        assert_eq!(f.sym_vars[0].name, "n");
        let (shape, dtype) = f.params[0].1.as_tensor().unwrap();
        assert_eq!(dtype, Some(DType::F32));
        let dims = shape.known_dims().unwrap();
        assert_eq!(dims.len(), 2);
        assert_eq!(dims[1], SymExpr::constant(4));
        let ret = match &f.ret_ann {
            Annotation::Tensor { shape: ShapeSpec::Known(dims), .. } => dims,
            _ => panic!("known tensor return shape"),
        };
        assert_eq!(format!("{}", ret[0]), "4*n");
        let Block::Dataflow(bindings) = &f.body.blocks[0] else { panic!("df block") };
        assert!(matches!(
            bindings[0],
            Binding::Bind { value: Expr::CallOp { op: OpName::Flatten, attrs: OpAttrs::None, .. }, .. }
        ));
    }

    #[test]
    fn parse_prim_fn_classifies() {
        let m = parse_module(
            "prim_fn ew(A: Buffer((n,), f32), O: Buffer((n,), f32)) outputs(1) {\n\
               stage O(i < n) { (A[i] + 1.0) }\n\
             }\n",
        )
        .unwrap();
        assert_eq!(crate::tprog::classify(&m.prim_funcs["ew"]), PatternKind::ElementWise);
    }

    #[test]
    fn unknown_annotation_head_is_error() {
        let err = parse_module("fn f(x: Tensr) -> Object { return x; }").unwrap_err();
        assert!(err.message.contains("unknown annotation head"));
    }

    #[test]
    fn undeclared_sym_var_is_error() {
        let err = parse_module(
            "fn f(x: Tensor) -> Object {\n  y: Tensor((n,), f32) = x;\n  return y;\n}\n",
        )
        .unwrap_err();
        assert!(err.message.contains("unknown symbolic variable"));
    }

    #[test]
    fn missing_return_is_error() {
        let err = parse_module("fn f(x: Tensor) -> Object { y = exp(x); }").unwrap_err();
        assert!(err.message.contains("missing a `return`"));
    }

    #[test]
    fn colliding_var_names_print_distinctly() {
        let mut m = parse_module(
            "fn f(x: Tensor((n,), f32)) -> Object sym(n) {\n  return x;\n}\n",
        )
        .unwrap();
        // Give the function a second, distinct variable also named `n`.
        let clash = m.fresh_sym("n");
        let f = m.graph_funcs.get_mut("f").unwrap();
        f.sym_vars.push(clash.clone());
        f.ret_ann = Annotation::tensor(vec![SymExpr::Var(clash)], DType::F32);
        let printed = print_module(&m);
        assert!(printed.contains("sym(n, n_1)"));
        assert_roundtrip(&printed);
    }
}
