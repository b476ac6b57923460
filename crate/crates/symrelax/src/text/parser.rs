//! Recursive-descent parser for the `.srx` module syntax.

use std::collections::HashMap;

use crate::ir::{
    Annotation, Binding, Block, Body, ConstData, DType, Expr, Function, Module, OpAttrs, OpName,
    ShapeSpec, SourceSpan,
};
use crate::symexpr::{normalize, SymExpr, SymVar};
use crate::tprog::{
    BufferDecl, Cmp, CmpOp, Combiner, PrimFunc, ScalarBinOp, ScalarConst, ScalarExpr, Stage,
};

use super::lexer::{tokenize, Tok, Token};
use super::SyntaxError;

pub fn parse_module(src: &str) -> Result<Module, SyntaxError> {
    let tokens = tokenize(src)?;
    let mut p = Parser { tokens, pos: 0, module: Module::default() };
    while !p.at_end() {
        p.parse_item()?;
    }
    Ok(p.module)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    module: Module,
}

/// Symbolic variable scope for one function or tensor program.
struct SymScope {
    vars: Vec<SymVar>,
}

impl SymScope {
    fn new() -> Self {
        SymScope { vars: Vec::new() }
    }

    fn lookup(&self, name: &str) -> Option<SymVar> {
        self.vars.iter().find(|v| v.name == name).cloned()
    }

    fn declare(&mut self, name: &str, module: &mut Module) -> SymVar {
        if let Some(v) = self.lookup(name) {
            return v;
        }
        let v = module.fresh_sym(name);
        self.vars.push(v.clone());
        v
    }
}

impl Parser {
    fn at_end(&self) -> bool {
        self.pos >= self.tokens.len()
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.tokens.get(self.pos + 1).map(|t| &t.tok)
    }

    fn cur_span(&self) -> SourceSpan {
        self.tokens
            .get(self.pos)
            .or_else(|| self.tokens.last())
            .map(|t| t.span)
            .unwrap_or_default()
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, SyntaxError> {
        Err(SyntaxError { span: self.cur_span(), message: message.into() })
    }

    fn expect(&mut self, tok: Tok) -> Result<SourceSpan, SyntaxError> {
        match self.tokens.get(self.pos) {
            Some(t) if t.tok == tok => {
                let s = t.span;
                self.pos += 1;
                Ok(s)
            }
            Some(t) => Err(SyntaxError {
                span: t.span,
                message: format!("expected {:?}, found {:?}", tok, t.tok),
            }),
            None => Err(SyntaxError {
                span: self.cur_span(),
                message: format!("expected {:?}, found end of input", tok),
            }),
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_ident(&mut self) -> Result<(String, SourceSpan), SyntaxError> {
        match self.bump() {
            Some(Token { tok: Tok::Ident(s), span }) => Ok((s, span)),
            Some(t) => Err(SyntaxError {
                span: t.span,
                message: format!("expected identifier, found {:?}", t.tok),
            }),
            None => self.err("expected identifier, found end of input"),
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(s)) if s == kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), SyntaxError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            self.err(format!("expected `{}`", kw))
        }
    }

    fn expect_int(&mut self) -> Result<i64, SyntaxError> {
        match self.bump() {
            Some(Token { tok: Tok::Int(x), .. }) => Ok(x),
            Some(t) => Err(SyntaxError {
                span: t.span,
                message: format!("expected integer, found {:?}", t.tok),
            }),
            None => self.err("expected integer, found end of input"),
        }
    }

    // -----------------------------------------------------------------
    // Items
    // -----------------------------------------------------------------

    fn parse_item(&mut self) -> Result<(), SyntaxError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == "fn" => self.parse_fn(),
            Some(Tok::Ident(s)) if s == "prim_fn" => self.parse_prim_fn(),
            Some(Tok::Ident(s)) if s == "extern" => {
                self.bump();
                let name = match self.bump() {
                    Some(Token { tok: Tok::Str(s), .. }) => s,
                    _ => return self.err("expected extern name string"),
                };
                self.expect(Tok::Semi)?;
                self.module.extern_decls.push(name);
                Ok(())
            }
            Some(_) => self.err("expected `fn`, `prim_fn` or `extern`"),
            None => Ok(()),
        }
    }

    fn parse_fn(&mut self) -> Result<(), SyntaxError> {
        let start = self.cur_span();
        self.expect_keyword("fn")?;
        let (name, _) = self.expect_ident()?;
        if self.module.graph_funcs.contains_key(&name) {
            return self.err(format!("duplicate definition of function `{}`", name));
        }
        let mut scope = SymScope::new();

        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        while self.peek() != Some(&Tok::RParen) {
            let (pname, _) = self.expect_ident()?;
            self.expect(Tok::Colon)?;
            let ann = self.parse_ann(&mut scope, true)?;
            params.push((pname, ann));
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;

        let mut ret_ann = Annotation::Object;
        let mut has_ret = false;
        if self.eat(&Tok::Arrow) {
            ret_ann = self.parse_ann(&mut scope, true)?;
            has_ret = true;
        }

        if self.eat_keyword("sym") {
            self.expect(Tok::LParen)?;
            while self.peek() != Some(&Tok::RParen) {
                let (vname, _) = self.expect_ident()?;
                scope.declare(&vname, &mut self.module);
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(Tok::RParen)?;
        }

        let mut upper_bounds = HashMap::new();
        if self.eat_keyword("bound") {
            self.expect(Tok::LParen)?;
            while self.peek() != Some(&Tok::RParen) {
                let (vname, vspan) = self.expect_ident()?;
                let v = scope.lookup(&vname).ok_or(SyntaxError {
                    span: vspan,
                    message: format!("bound on undeclared symbolic variable `{}`", vname),
                })?;
                self.expect(Tok::Le)?;
                let b = self.expect_int()?;
                upper_bounds.insert(v.id, b);
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(Tok::RParen)?;
        }

        let is_primitive = self.eat_keyword("primitive");

        self.expect(Tok::LBrace)?;
        let body = self.parse_body(&mut scope)?;
        self.expect(Tok::RBrace)?;

        let _ = has_ret;
        let f = Function {
            name: name.clone(),
            params,
            ret_ann,
            sym_vars: scope.vars,
            upper_bounds,
            body,
            is_primitive,
            span: start,
        };
        self.module.graph_funcs.insert(name, f);
        Ok(())
    }

    fn parse_body(&mut self, scope: &mut SymScope) -> Result<Body, SyntaxError> {
        let mut blocks = Vec::new();
        let mut plain: Vec<Binding> = Vec::new();
        let mut result: Option<Expr> = None;
        loop {
            match self.peek() {
                Some(Tok::RBrace) | None => break,
                Some(Tok::Ident(s)) if s == "df" => {
                    if !plain.is_empty() {
                        blocks.push(Block::Plain(std::mem::take(&mut plain)));
                    }
                    self.bump();
                    self.expect(Tok::LBrace)?;
                    let mut bindings = Vec::new();
                    while self.peek() != Some(&Tok::RBrace) {
                        bindings.push(self.parse_binding(scope)?);
                    }
                    self.expect(Tok::RBrace)?;
                    blocks.push(Block::Dataflow(bindings));
                }
                Some(Tok::Ident(s)) if s == "return" => {
                    self.bump();
                    result = Some(self.parse_expr(scope)?);
                    self.expect(Tok::Semi)?;
                    break;
                }
                _ => plain.push(self.parse_binding(scope)?),
            }
        }
        if !plain.is_empty() {
            blocks.push(Block::Plain(plain));
        }
        match result {
            Some(result) => Ok(Body { blocks, result }),
            None => self.err("function body is missing a `return`"),
        }
    }

    fn parse_binding(&mut self, scope: &mut SymScope) -> Result<Binding, SyntaxError> {
        let span = self.cur_span();
        let (var, _) = self.expect_ident()?;
        let mut ann = None;
        if self.eat(&Tok::Colon) {
            ann = Some(self.parse_ann(scope, false)?);
        }
        self.expect(Tok::Eq)?;
        if matches!(self.peek(), Some(Tok::Ident(s)) if s == "match_cast") {
            self.bump();
            self.expect(Tok::LParen)?;
            let value = self.parse_expr(scope)?;
            self.expect(Tok::Comma)?;
            // match_cast may introduce fresh symbolic variables
            let cast_ann = self.parse_ann(scope, true)?;
            self.expect(Tok::RParen)?;
            self.expect(Tok::Semi)?;
            if ann.is_some() {
                return self.err("match_cast binding cannot carry a separate annotation");
            }
            return Ok(Binding::MatchCast { var, ann: cast_ann, value, span });
        }
        let value = self.parse_expr(scope)?;
        self.expect(Tok::Semi)?;
        Ok(Binding::Bind { var, ann, value, span })
    }

    // -----------------------------------------------------------------
    // Annotations
    // -----------------------------------------------------------------

    fn parse_ann(&mut self, scope: &mut SymScope, allow_fresh: bool) -> Result<Annotation, SyntaxError> {
        let (head, hspan) = self.expect_ident()?;
        match head.as_str() {
            "Tensor" => {
                if self.peek() != Some(&Tok::LParen) {
                    return Ok(Annotation::Tensor { shape: ShapeSpec::Unconstrained, dtype: None });
                }
                self.bump();
                let (shape, mut dtype) = self.parse_shape_args(scope, allow_fresh)?;
                if self.eat(&Tok::Comma) {
                    dtype = Some(self.parse_dtype()?);
                }
                self.expect(Tok::RParen)?;
                Ok(Annotation::Tensor { shape, dtype })
            }
            "Shape" => {
                if self.peek() != Some(&Tok::LParen) {
                    return Ok(Annotation::Shape { spec: ShapeSpec::Unconstrained });
                }
                self.bump();
                let (spec, dt) = self.parse_shape_args(scope, allow_fresh)?;
                if dt.is_some() {
                    return self.err("Shape annotation does not take a dtype");
                }
                self.expect(Tok::RParen)?;
                Ok(Annotation::Shape { spec })
            }
            "Tuple" => {
                self.expect(Tok::LParen)?;
                let mut elems = Vec::new();
                while self.peek() != Some(&Tok::RParen) {
                    elems.push(self.parse_ann(scope, allow_fresh)?);
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                self.expect(Tok::RParen)?;
                Ok(Annotation::Tuple(elems))
            }
            "Callable" => {
                self.expect(Tok::LParen)?;
                self.expect(Tok::LParen)?;
                let mut params = Vec::new();
                while self.peek() != Some(&Tok::RParen) {
                    params.push(self.parse_ann(scope, allow_fresh)?);
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                self.expect(Tok::RParen)?;
                self.expect(Tok::Comma)?;
                let ret = self.parse_ann(scope, allow_fresh)?;
                self.expect(Tok::RParen)?;
                Ok(Annotation::Callable { params, ret: Box::new(ret) })
            }
            "Object" => Ok(Annotation::Object),
            other => Err(SyntaxError {
                span: hspan,
                message: format!("unknown annotation head `{}`", other),
            }),
        }
    }

    /// Inside `Tensor(...)` / `Shape(...)`: either `(dims)`, `ndim=k`, or a
    /// bare dtype (shape left unconstrained).
    fn parse_shape_args(
        &mut self,
        scope: &mut SymScope,
        allow_fresh: bool,
    ) -> Result<(ShapeSpec, Option<DType>), SyntaxError> {
        match self.peek() {
            Some(Tok::LParen) => {
                self.bump();
                let mut dims = Vec::new();
                while self.peek() != Some(&Tok::RParen) {
                    dims.push(self.parse_symexpr(scope, allow_fresh)?);
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                self.expect(Tok::RParen)?;
                Ok((ShapeSpec::Known(dims), None))
            }
            Some(Tok::Ident(s)) if s == "ndim" => {
                self.bump();
                self.expect(Tok::Eq)?;
                let n = self.expect_int()?;
                if n < 0 {
                    return self.err("ndim must be non-negative");
                }
                Ok((ShapeSpec::RankOnly(n as usize), None))
            }
            Some(Tok::Ident(s)) if matches!(s.as_str(), "f32" | "i64" | "bool") => {
                let dt = self.parse_dtype()?;
                Ok((ShapeSpec::Unconstrained, Some(dt)))
            }
            _ => self.err("expected `(dims)`, `ndim=k` or a dtype"),
        }
    }

    fn parse_dtype(&mut self) -> Result<DType, SyntaxError> {
        let (s, span) = self.expect_ident()?;
        match s.as_str() {
            "f32" => Ok(DType::F32),
            "i64" => Ok(DType::I64),
            "bool" => Ok(DType::Bool),
            other => Err(SyntaxError { span, message: format!("unknown dtype `{}`", other) }),
        }
    }

    // -----------------------------------------------------------------
    // Symbolic expressions
    // -----------------------------------------------------------------

    fn parse_symexpr(&mut self, scope: &mut SymScope, allow_fresh: bool) -> Result<SymExpr, SyntaxError> {
        let e = self.parse_symexpr_raw(scope, allow_fresh)?;
        Ok(normalize(&e))
    }

    fn parse_symexpr_raw(
        &mut self,
        scope: &mut SymScope,
        allow_fresh: bool,
    ) -> Result<SymExpr, SyntaxError> {
        let mut lhs = self.parse_symterm(scope, allow_fresh)?;
        loop {
            if self.eat(&Tok::Plus) {
                let rhs = self.parse_symterm(scope, allow_fresh)?;
                lhs = SymExpr::add(lhs, rhs);
            } else if self.eat(&Tok::Minus) {
                let rhs = self.parse_symterm(scope, allow_fresh)?;
                lhs = SymExpr::sub(lhs, rhs);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn parse_symterm(&mut self, scope: &mut SymScope, allow_fresh: bool) -> Result<SymExpr, SyntaxError> {
        let mut lhs = self.parse_symfactor(scope, allow_fresh)?;
        while self.eat(&Tok::Star) {
            let rhs = self.parse_symfactor(scope, allow_fresh)?;
            lhs = SymExpr::mul(lhs, rhs);
        }
        Ok(lhs)
    }

    fn parse_symfactor(
        &mut self,
        scope: &mut SymScope,
        allow_fresh: bool,
    ) -> Result<SymExpr, SyntaxError> {
        match self.peek().cloned() {
            Some(Tok::Int(x)) => {
                self.bump();
                Ok(SymExpr::constant(x))
            }
            Some(Tok::Minus) => {
                self.bump();
                let inner = self.parse_symfactor(scope, allow_fresh)?;
                Ok(SymExpr::sub(SymExpr::constant(0), inner))
            }
            Some(Tok::LParen) => {
                self.bump();
                let e = self.parse_symexpr_raw(scope, allow_fresh)?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.bump();
                if matches!(name.as_str(), "floordiv" | "mod" | "max" | "min") {
                    self.expect(Tok::LParen)?;
                    let a = self.parse_symexpr_raw(scope, allow_fresh)?;
                    self.expect(Tok::Comma)?;
                    let b = self.parse_symexpr_raw(scope, allow_fresh)?;
                    self.expect(Tok::RParen)?;
                    Ok(match name.as_str() {
                        "floordiv" => SymExpr::floordiv(a, b),
                        "mod" => SymExpr::modulo(a, b),
                        "max" => SymExpr::max(a, b),
                        _ => SymExpr::min(a, b),
                    })
                } else if let Some(v) = scope.lookup(&name) {
                    Ok(SymExpr::Var(v))
                } else if allow_fresh {
                    Ok(SymExpr::Var(scope.declare(&name, &mut self.module)))
                } else {
                    self.err(format!("unknown symbolic variable `{}`", name))
                }
            }
            _ => self.err("expected symbolic expression"),
        }
    }

    // -----------------------------------------------------------------
    // Graph-level expressions
    // -----------------------------------------------------------------

    fn parse_expr(&mut self, scope: &mut SymScope) -> Result<Expr, SyntaxError> {
        let mut e = self.parse_expr_primary(scope)?;
        // tuple projection postfix
        while self.peek() == Some(&Tok::Dot) {
            self.bump();
            let idx = self.expect_int()?;
            e = Expr::TupleGet(Box::new(e), idx as usize);
        }
        Ok(e)
    }

    fn parse_expr_primary(&mut self, scope: &mut SymScope) -> Result<Expr, SyntaxError> {
        let Some(tok) = self.peek().cloned() else {
            return self.err("expected expression, found end of input");
        };
        match tok {
            Tok::Ident(name) => match name.as_str() {
                "shape" => {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    let mut dims = Vec::new();
                    while self.peek() != Some(&Tok::RParen) {
                        dims.push(self.parse_symexpr(scope, false)?);
                        if !self.eat(&Tok::Comma) {
                            break;
                        }
                    }
                    self.expect(Tok::RParen)?;
                    Ok(Expr::ShapeLit(dims))
                }
                "tuple" => {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    let mut elems = Vec::new();
                    while self.peek() != Some(&Tok::RParen) {
                        elems.push(self.parse_expr(scope)?);
                        if !self.eat(&Tok::Comma) {
                            break;
                        }
                    }
                    self.expect(Tok::RParen)?;
                    Ok(Expr::TupleMake(elems))
                }
                "const" => {
                    self.bump();
                    self.parse_const_tensor()
                }
                "if" => {
                    self.bump();
                    let cond = self.parse_expr(scope)?;
                    self.expect(Tok::LBrace)?;
                    let then_body = self.parse_body(scope)?;
                    self.expect(Tok::RBrace)?;
                    self.expect_keyword("else")?;
                    self.expect(Tok::LBrace)?;
                    let else_body = self.parse_body(scope)?;
                    self.expect(Tok::RBrace)?;
                    Ok(Expr::If {
                        cond: Box::new(cond),
                        then_body: Box::new(then_body),
                        else_body: Box::new(else_body),
                    })
                }
                "call_tir" => {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    self.expect(Tok::At)?;
                    let (prim, _) = self.expect_ident()?;
                    self.expect(Tok::Comma)?;
                    let args = self.parse_paren_exprs(scope)?;
                    self.expect(Tok::Comma)?;
                    let out_ann = self.parse_ann(scope, false)?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::CallTir { prim, args, out_ann })
                }
                "call_dps_library" => {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    let extern_name = match self.bump() {
                        Some(Token { tok: Tok::Str(s), .. }) => s,
                        _ => return self.err("expected library name string"),
                    };
                    self.expect(Tok::Comma)?;
                    let args = self.parse_paren_exprs(scope)?;
                    self.expect(Tok::Comma)?;
                    let out_ann = self.parse_ann(scope, false)?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::CallDpsLibrary { extern_name, args, out_ann })
                }
                "alloc_storage" => {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    let size_bytes = self.parse_symexpr(scope, false)?;
                    self.expect(Tok::Comma)?;
                    let dtype = self.parse_dtype()?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::AllocStorage { size_bytes, dtype })
                }
                "alloc_tensor" => {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    let storage = self.parse_expr(scope)?;
                    self.expect(Tok::Comma)?;
                    self.expect(Tok::LParen)?;
                    let mut dims = Vec::new();
                    while self.peek() != Some(&Tok::RParen) {
                        dims.push(self.parse_symexpr(scope, false)?);
                        if !self.eat(&Tok::Comma) {
                            break;
                        }
                    }
                    self.expect(Tok::RParen)?;
                    self.expect(Tok::Comma)?;
                    let dtype = self.parse_dtype()?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::AllocTensor { storage: Box::new(storage), dims, dtype })
                }
                "kernel_call" => {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    self.expect(Tok::At)?;
                    let (prim, _) = self.expect_ident()?;
                    self.expect(Tok::Comma)?;
                    let args = self.parse_paren_exprs(scope)?;
                    self.expect(Tok::Comma)?;
                    let dests = self.parse_paren_exprs(scope)?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::KernelCall { prim, args, dests })
                }
                "library_call" => {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    let extern_name = match self.bump() {
                        Some(Token { tok: Tok::Str(s), .. }) => s,
                        _ => return self.err("expected library name string"),
                    };
                    self.expect(Tok::Comma)?;
                    let args = self.parse_paren_exprs(scope)?;
                    self.expect(Tok::Comma)?;
                    let dests = self.parse_paren_exprs(scope)?;
                    self.expect(Tok::RParen)?;
                    Ok(Expr::LibraryCall { extern_name, args, dests })
                }
                _ => {
                    self.bump();
                    if self.peek() == Some(&Tok::LParen) {
                        if let Some(op) = OpName::from_name(&name) {
                            let (args, attrs) = self.parse_op_args(scope)?;
                            Ok(Expr::CallOp { op, attrs, args })
                        } else {
                            self.bump(); // consume LParen
                            let mut args = Vec::new();
                            while self.peek() != Some(&Tok::RParen) {
                                args.push(self.parse_expr(scope)?);
                                if !self.eat(&Tok::Comma) {
                                    break;
                                }
                            }
                            self.expect(Tok::RParen)?;
                            Ok(Expr::CallFunc { callee: name, args })
                        }
                    } else {
                        Ok(Expr::Var(name))
                    }
                }
            },
            _ => self.err("expected expression"),
        }
    }

    fn parse_paren_exprs(&mut self, scope: &mut SymScope) -> Result<Vec<Expr>, SyntaxError> {
        self.expect(Tok::LParen)?;
        let mut args = Vec::new();
        while self.peek() != Some(&Tok::RParen) {
            args.push(self.parse_expr(scope)?);
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;
        Ok(args)
    }

    /// Operator call arguments with optional trailing attribute items
    /// (`axes=(1,0)`, `axis=0`, `sections=2`).
    fn parse_op_args(&mut self, scope: &mut SymScope) -> Result<(Vec<Expr>, OpAttrs), SyntaxError> {
        self.expect(Tok::LParen)?;
        let mut args = Vec::new();
        let mut axes: Option<Vec<usize>> = None;
        let mut axis: Option<usize> = None;
        let mut sections: Option<usize> = None;
        while self.peek() != Some(&Tok::RParen) {
            if let (Some(Tok::Ident(key)), Some(Tok::Eq)) = (self.peek(), self.peek2()) {
                let key = key.clone();
                match key.as_str() {
                    "axes" => {
                        self.bump();
                        self.bump();
                        self.expect(Tok::LParen)?;
                        let mut list = Vec::new();
                        while self.peek() != Some(&Tok::RParen) {
                            list.push(self.expect_int()? as usize);
                            if !self.eat(&Tok::Comma) {
                                break;
                            }
                        }
                        self.expect(Tok::RParen)?;
                        axes = Some(list);
                    }
                    "axis" => {
                        self.bump();
                        self.bump();
                        axis = Some(self.expect_int()? as usize);
                    }
                    "sections" => {
                        self.bump();
                        self.bump();
                        sections = Some(self.expect_int()? as usize);
                    }
                    _ => return self.err(format!("unknown operator attribute `{}`", key)),
                }
            } else {
                args.push(self.parse_expr(scope)?);
            }
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;
        let attrs = match (axes, axis, sections) {
            (Some(a), None, None) => OpAttrs::Axes(a),
            (None, Some(a), None) => OpAttrs::Axis(a),
            (None, axis, Some(s)) => OpAttrs::SplitArgs { sections: s, axis: axis.unwrap_or(0) },
            (None, None, None) => OpAttrs::None,
            _ => return self.err("conflicting operator attributes"),
        };
        Ok((args, attrs))
    }

    fn parse_const_tensor(&mut self) -> Result<Expr, SyntaxError> {
        self.expect(Tok::LParen)?;
        let dtype = self.parse_dtype()?;
        self.expect(Tok::Comma)?;
        self.expect(Tok::LParen)?;
        let mut dims = Vec::new();
        while self.peek() != Some(&Tok::RParen) {
            dims.push(self.expect_int()?);
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;
        self.expect(Tok::Comma)?;
        self.expect(Tok::LBracket)?;
        let data = match dtype {
            DType::F32 => {
                let mut v = Vec::new();
                while self.peek() != Some(&Tok::RBracket) {
                    v.push(self.parse_signed_float()? as f32);
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                ConstData::F32(v)
            }
            DType::I64 => {
                let mut v = Vec::new();
                while self.peek() != Some(&Tok::RBracket) {
                    v.push(self.parse_signed_int()?);
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                ConstData::I64(v)
            }
            DType::Bool => {
                let mut v = Vec::new();
                while self.peek() != Some(&Tok::RBracket) {
                    let (s, span) = self.expect_ident()?;
                    match s.as_str() {
                        "true" => v.push(true),
                        "false" => v.push(false),
                        _ => {
                            return Err(SyntaxError {
                                span,
                                message: "expected `true` or `false`".into(),
                            })
                        }
                    }
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                ConstData::Bool(v)
            }
        };
        self.expect(Tok::RBracket)?;
        self.expect(Tok::RParen)?;
        Ok(Expr::ConstTensor { dims, data })
    }

    fn parse_signed_float(&mut self) -> Result<f64, SyntaxError> {
        let neg = self.eat(&Tok::Minus);
        let v = match self.bump() {
            Some(Token { tok: Tok::Float(x), .. }) => x,
            Some(Token { tok: Tok::Int(x), .. }) => x as f64,
            _ => return self.err("expected numeric literal"),
        };
        Ok(if neg { -v } else { v })
    }

    fn parse_signed_int(&mut self) -> Result<i64, SyntaxError> {
        let neg = self.eat(&Tok::Minus);
        let v = self.expect_int()?;
        Ok(if neg { -v } else { v })
    }

    // -----------------------------------------------------------------
    // Tensor programs
    // -----------------------------------------------------------------

    fn parse_prim_fn(&mut self) -> Result<(), SyntaxError> {
        let start = self.cur_span();
        self.expect_keyword("prim_fn")?;
        let (name, _) = self.expect_ident()?;
        if self.module.prim_funcs.contains_key(&name) {
            return self.err(format!("duplicate definition of tensor program `{}`", name));
        }
        let mut scope = SymScope::new();

        self.expect(Tok::LParen)?;
        let mut buffer_params = Vec::new();
        while self.peek() != Some(&Tok::RParen) {
            buffer_params.push(self.parse_buffer_decl(&mut scope)?);
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;

        let mut scalar_params = Vec::new();
        if self.eat_keyword("sym") {
            self.expect(Tok::LParen)?;
            while self.peek() != Some(&Tok::RParen) {
                let (vname, _) = self.expect_ident()?;
                scalar_params.push(scope.declare(&vname, &mut self.module));
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(Tok::RParen)?;
        }

        let mut num_outputs = 1;
        if self.eat_keyword("outputs") {
            self.expect(Tok::LParen)?;
            num_outputs = self.expect_int()? as usize;
            self.expect(Tok::RParen)?;
        }

        let mut op_hints = Vec::new();
        if self.eat_keyword("hints") {
            self.expect(Tok::LParen)?;
            while self.peek() != Some(&Tok::RParen) {
                let (hname, hspan) = self.expect_ident()?;
                let op = OpName::from_name(&hname).ok_or(SyntaxError {
                    span: hspan,
                    message: format!("unknown operator `{}` in hints", hname),
                })?;
                op_hints.push(op);
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(Tok::RParen)?;
        }

        self.expect(Tok::LBrace)?;
        let mut temps = Vec::new();
        let mut workspace = None;
        let mut stages = Vec::new();
        while self.peek() != Some(&Tok::RBrace) {
            if self.eat_keyword("temp") {
                temps.push(self.parse_buffer_decl(&mut scope)?);
                self.expect(Tok::Semi)?;
            } else if self.eat_keyword("workspace") {
                if workspace.is_some() {
                    return self.err("a tensor program may declare at most one workspace");
                }
                workspace = Some(self.parse_buffer_decl(&mut scope)?);
                self.expect(Tok::Semi)?;
            } else if matches!(self.peek(), Some(Tok::Ident(s)) if s == "stage") {
                stages.push(self.parse_stage(&mut scope)?);
            } else {
                return self.err("expected `temp`, `workspace` or `stage`");
            }
        }
        self.expect(Tok::RBrace)?;

        let p = PrimFunc {
            name: name.clone(),
            buffer_params,
            num_outputs,
            scalar_params,
            temps,
            workspace,
            op_hints,
            stages,
            span: start,
        };
        self.module.prim_funcs.insert(name, p);
        Ok(())
    }

    fn parse_buffer_decl(&mut self, scope: &mut SymScope) -> Result<BufferDecl, SyntaxError> {
        let (bname, _) = self.expect_ident()?;
        self.expect(Tok::Colon)?;
        self.expect_keyword("Buffer")?;
        self.expect(Tok::LParen)?;
        self.expect(Tok::LParen)?;
        let mut dims = Vec::new();
        while self.peek() != Some(&Tok::RParen) {
            dims.push(self.parse_symexpr(scope, true)?);
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;
        self.expect(Tok::Comma)?;
        let dtype = self.parse_dtype()?;
        self.expect(Tok::RParen)?;
        Ok(BufferDecl { name: bname, dims, dtype })
    }

    fn parse_stage(&mut self, scope: &mut SymScope) -> Result<Stage, SyntaxError> {
        let span = self.cur_span();
        self.expect_keyword("stage")?;
        let (out, _) = self.expect_ident()?;

        // loop vars are stage-local; they shadow prim-level variables
        let mut stage_scope = SymScope::new();
        let mut out_loop_vars = Vec::new();
        let mut out_dims = Vec::new();
        self.expect(Tok::LParen)?;
        while self.peek() != Some(&Tok::RParen) {
            let (vname, _) = self.expect_ident()?;
            let v = stage_scope.declare(&vname, &mut self.module);
            self.expect(Tok::Lt)?;
            let extent = self.parse_symexpr(scope, false)?;
            out_loop_vars.push(v);
            out_dims.push(extent);
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen)?;

        let mut reduce_dims = Vec::new();
        if self.eat_keyword("reduce") {
            self.expect(Tok::LParen)?;
            while self.peek() != Some(&Tok::RParen) {
                let (vname, _) = self.expect_ident()?;
                let v = stage_scope.declare(&vname, &mut self.module);
                self.expect(Tok::Lt)?;
                let extent = self.parse_symexpr(scope, false)?;
                reduce_dims.push((v, extent));
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
            self.expect(Tok::RParen)?;
        }

        let mut init = None;
        if self.eat_keyword("init") {
            self.expect(Tok::LParen)?;
            let neg = self.eat(&Tok::Minus);
            init = Some(match self.bump() {
                Some(Token { tok: Tok::Float(x), .. }) => {
                    ScalarConst::F(if neg { -x } else { x })
                }
                Some(Token { tok: Tok::Int(x), .. }) => ScalarConst::I(if neg { -x } else { x }),
                _ => return self.err("expected numeric init value"),
            });
            self.expect(Tok::RParen)?;
        }

        let mut combiner = None;
        if self.eat_keyword("combine") {
            self.expect(Tok::LParen)?;
            let (cname, cspan) = self.expect_ident()?;
            combiner = Some(match cname.as_str() {
                "sum" => Combiner::Sum,
                "max" => Combiner::Max,
                _ => {
                    return Err(SyntaxError {
                        span: cspan,
                        message: format!("unknown combiner `{}`", cname),
                    })
                }
            });
            self.expect(Tok::RParen)?;
        }

        self.expect(Tok::LBrace)?;
        let body = self.parse_scalar_expr(scope, &stage_scope)?;
        self.expect(Tok::RBrace)?;

        Ok(Stage { out, out_loop_vars, out_dims, reduce_dims, init, combiner, body, span })
    }

    /// Symbolic expression inside a stage body: loop vars shadow prim vars.
    fn parse_index_expr(
        &mut self,
        scope: &SymScope,
        stage_scope: &SymScope,
    ) -> Result<SymExpr, SyntaxError> {
        let mut merged = SymScope::new();
        merged.vars.extend(stage_scope.vars.iter().cloned());
        for v in &scope.vars {
            if merged.lookup(&v.name).is_none() {
                merged.vars.push(v.clone());
            }
        }
        self.parse_symexpr(&mut merged, false)
    }

    fn parse_scalar_expr(
        &mut self,
        scope: &SymScope,
        stage_scope: &SymScope,
    ) -> Result<ScalarExpr, SyntaxError> {
        let mut lhs = self.parse_scalar_term(scope, stage_scope)?;
        loop {
            if self.eat(&Tok::Plus) {
                let rhs = self.parse_scalar_term(scope, stage_scope)?;
                lhs = ScalarExpr::bin(ScalarBinOp::Add, lhs, rhs);
            } else if self.eat(&Tok::Minus) {
                let rhs = self.parse_scalar_term(scope, stage_scope)?;
                lhs = ScalarExpr::bin(ScalarBinOp::Sub, lhs, rhs);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn parse_scalar_term(
        &mut self,
        scope: &SymScope,
        stage_scope: &SymScope,
    ) -> Result<ScalarExpr, SyntaxError> {
        let mut lhs = self.parse_scalar_factor(scope, stage_scope)?;
        loop {
            if self.eat(&Tok::Star) {
                let rhs = self.parse_scalar_factor(scope, stage_scope)?;
                lhs = ScalarExpr::bin(ScalarBinOp::Mul, lhs, rhs);
            } else if self.eat(&Tok::Slash) {
                let rhs = self.parse_scalar_factor(scope, stage_scope)?;
                lhs = ScalarExpr::bin(ScalarBinOp::Div, lhs, rhs);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn parse_scalar_factor(
        &mut self,
        scope: &SymScope,
        stage_scope: &SymScope,
    ) -> Result<ScalarExpr, SyntaxError> {
        match self.peek().cloned() {
            Some(Tok::Float(x)) => {
                self.bump();
                Ok(ScalarExpr::ConstF(x))
            }
            Some(Tok::Int(x)) => {
                self.bump();
                Ok(ScalarExpr::ConstI(x))
            }
            Some(Tok::Minus) => {
                self.bump();
                let inner = self.parse_scalar_factor(scope, stage_scope)?;
                Ok(match inner {
                    ScalarExpr::ConstF(x) => ScalarExpr::ConstF(-x),
                    ScalarExpr::ConstI(x) => ScalarExpr::ConstI(-x),
                    other => ScalarExpr::bin(ScalarBinOp::Sub, ScalarExpr::ConstI(0), other),
                })
            }
            Some(Tok::LParen) => {
                self.bump();
                let e = self.parse_scalar_expr(scope, stage_scope)?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                match name.as_str() {
                    "exp" => {
                        self.bump();
                        self.expect(Tok::LParen)?;
                        let e = self.parse_scalar_expr(scope, stage_scope)?;
                        self.expect(Tok::RParen)?;
                        Ok(ScalarExpr::Exp(Box::new(e)))
                    }
                    "max" | "min" => {
                        self.bump();
                        self.expect(Tok::LParen)?;
                        let a = self.parse_scalar_expr(scope, stage_scope)?;
                        self.expect(Tok::Comma)?;
                        let b = self.parse_scalar_expr(scope, stage_scope)?;
                        self.expect(Tok::RParen)?;
                        let op = if name == "max" { ScalarBinOp::Max } else { ScalarBinOp::Min };
                        Ok(ScalarExpr::bin(op, a, b))
                    }
                    "select" => {
                        self.bump();
                        self.expect(Tok::LParen)?;
                        let lhs = self.parse_index_expr(scope, stage_scope)?;
                        let op = match self.bump() {
                            Some(Token { tok: Tok::Lt, .. }) => CmpOp::Lt,
                            Some(Token { tok: Tok::Le, .. }) => CmpOp::Le,
                            Some(Token { tok: Tok::EqEq, .. }) => CmpOp::Eq,
                            Some(Token { tok: Tok::Ge, .. }) => CmpOp::Ge,
                            Some(Token { tok: Tok::Gt, .. }) => CmpOp::Gt,
                            _ => return self.err("expected comparison operator"),
                        };
                        let rhs = self.parse_index_expr(scope, stage_scope)?;
                        self.expect(Tok::Comma)?;
                        let then_val = self.parse_scalar_expr(scope, stage_scope)?;
                        self.expect(Tok::Comma)?;
                        let else_val = self.parse_scalar_expr(scope, stage_scope)?;
                        self.expect(Tok::RParen)?;
                        Ok(ScalarExpr::Select {
                            cond: Box::new(Cmp { lhs, op, rhs }),
                            then_val: Box::new(then_val),
                            else_val: Box::new(else_val),
                        })
                    }
                    "sym" => {
                        self.bump();
                        self.expect(Tok::LParen)?;
                        let e = self.parse_index_expr(scope, stage_scope)?;
                        self.expect(Tok::RParen)?;
                        Ok(ScalarExpr::Sym(e))
                    }
                    _ => {
                        self.bump();
                        if self.peek() == Some(&Tok::LBracket) {
                            self.bump();
                            let mut indices = Vec::new();
                            while self.peek() != Some(&Tok::RBracket) {
                                indices.push(self.parse_index_expr(scope, stage_scope)?);
                                if !self.eat(&Tok::Comma) {
                                    break;
                                }
                            }
                            self.expect(Tok::RBracket)?;
                            Ok(ScalarExpr::Read { buffer: name, indices })
                        } else {
                            // bare identifier: a symbolic scalar
                            let mut merged = SymScope::new();
                            merged.vars.extend(stage_scope.vars.iter().cloned());
                            merged.vars.extend(scope.vars.iter().cloned());
                            match merged.lookup(&name) {
                                Some(v) => Ok(ScalarExpr::Sym(SymExpr::Var(v))),
                                None => self.err(format!("unknown identifier `{}`", name)),
                            }
                        }
                    }
                }
            }
            _ => self.err("expected scalar expression"),
        }
    }
}
