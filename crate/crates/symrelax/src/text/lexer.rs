//! Tokenizer for the `.srx` textual syntax.

use crate::ir::SourceSpan;

use super::SyntaxError;

#[derive(Clone, Debug, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Semi,
    Colon,
    Eq,
    At,
    Dot,
    Plus,
    Minus,
    Star,
    Slash,
    Arrow,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
}

#[derive(Clone, Debug)]
pub struct Token {
    pub tok: Tok,
    pub span: SourceSpan,
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, SyntaxError> {
    let mut out = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let mut chars = src.chars().peekable();

    macro_rules! span1 {
        ($l:expr, $c:expr, $len:expr) => {
            SourceSpan { start_line: $l, start_col: $c, end_line: $l, end_col: $c + $len }
        };
    }

    while let Some(&c) = chars.peek() {
        let (sl, sc) = (line, col);
        match c {
            ' ' | '\t' | '\r' => {
                chars.next();
                col += 1;
            }
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            '/' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'/') {
                    // line comment
                    for c2 in chars.by_ref() {
                        if c2 == '\n' {
                            line += 1;
                            col = 1;
                            break;
                        }
                    }
                } else if chars.peek() == Some(&'*') {
                    chars.next();
                    col += 1;
                    let mut prev = ' ';
                    loop {
                        match chars.next() {
                            None => {
                                return Err(SyntaxError {
                                    span: span1!(sl, sc, 2),
                                    message: "unterminated block comment".into(),
                                })
                            }
                            Some('\n') => {
                                line += 1;
                                col = 1;
                                prev = '\n';
                            }
                            Some(c2) => {
                                col += 1;
                                if prev == '*' && c2 == '/' {
                                    break;
                                }
                                prev = c2;
                            }
                        }
                    }
                } else {
                    out.push(Token { tok: Tok::Slash, span: span1!(sl, sc, 1) });
                }
            }
            '(' | ')' | '{' | '}' | '[' | ']' | ',' | ';' | ':' | '@' | '.' | '+' | '*' => {
                chars.next();
                col += 1;
                let tok = match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    ',' => Tok::Comma,
                    ';' => Tok::Semi,
                    ':' => Tok::Colon,
                    '@' => Tok::At,
                    '.' => Tok::Dot,
                    '+' => Tok::Plus,
                    _ => Tok::Star,
                };
                out.push(Token { tok, span: span1!(sl, sc, 1) });
            }
            '-' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'>') {
                    chars.next();
                    col += 1;
                    out.push(Token { tok: Tok::Arrow, span: span1!(sl, sc, 2) });
                } else {
                    out.push(Token { tok: Tok::Minus, span: span1!(sl, sc, 1) });
                }
            }
            '<' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'=') {
                    chars.next();
                    col += 1;
                    out.push(Token { tok: Tok::Le, span: span1!(sl, sc, 2) });
                } else {
                    out.push(Token { tok: Tok::Lt, span: span1!(sl, sc, 1) });
                }
            }
            '>' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'=') {
                    chars.next();
                    col += 1;
                    out.push(Token { tok: Tok::Ge, span: span1!(sl, sc, 2) });
                } else {
                    out.push(Token { tok: Tok::Gt, span: span1!(sl, sc, 1) });
                }
            }
            '=' => {
                chars.next();
                col += 1;
                if chars.peek() == Some(&'=') {
                    chars.next();
                    col += 1;
                    out.push(Token { tok: Tok::EqEq, span: span1!(sl, sc, 2) });
                } else {
                    out.push(Token { tok: Tok::Eq, span: span1!(sl, sc, 1) });
                }
            }
            '"' => {
                chars.next();
                col += 1;
                let mut s = String::new();
                loop {
                    match chars.next() {
                        None | Some('\n') => {
                            return Err(SyntaxError {
                                span: span1!(sl, sc, 1),
                                message: "unterminated string literal".into(),
                            })
                        }
                        Some('"') => {
                            col += 1;
                            break;
                        }
                        Some(c2) => {
                            col += 1;
                            s.push(c2);
                        }
                    }
                }
                let len = s.len() as u32 + 2;
                out.push(Token { tok: Tok::Str(s), span: span1!(sl, sc, len) });
            }
            _ if c.is_ascii_digit() => {
                let mut s = String::new();
                let mut is_float = false;
                while let Some(&c2) = chars.peek() {
                    if c2.is_ascii_digit() {
                        s.push(c2);
                        chars.next();
                        col += 1;
                    } else if c2 == '.' {
                        // a digit must follow, else it's tuple-get syntax
                        let mut look = chars.clone();
                        look.next();
                        if look.peek().is_some_and(|d| d.is_ascii_digit()) && !is_float {
                            is_float = true;
                            s.push('.');
                            chars.next();
                            col += 1;
                        } else {
                            break;
                        }
                    } else if c2 == 'e' || c2 == 'E' {
                        let mut look = chars.clone();
                        look.next();
                        let next = look.peek().copied();
                        if next.is_some_and(|d| d.is_ascii_digit() || d == '-' || d == '+') {
                            is_float = true;
                            s.push('e');
                            chars.next();
                            col += 1;
                            if let Some(&sgn) = chars.peek() {
                                if sgn == '-' || sgn == '+' {
                                    s.push(sgn);
                                    chars.next();
                                    col += 1;
                                }
                            }
                        } else {
                            break;
                        }
                    } else {
                        break;
                    }
                }
                let len = s.len() as u32;
                let tok = if is_float {
                    Tok::Float(s.parse().map_err(|_| SyntaxError {
                        span: span1!(sl, sc, len),
                        message: format!("invalid float literal `{}`", s),
                    })?)
                } else {
                    Tok::Int(s.parse().map_err(|_| SyntaxError {
                        span: span1!(sl, sc, len),
                        message: format!("invalid integer literal `{}`", s),
                    })?)
                };
                out.push(Token { tok, span: span1!(sl, sc, len) });
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&c2) = chars.peek() {
                    if c2.is_ascii_alphanumeric() || c2 == '_' {
                        s.push(c2);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                let len = s.len() as u32;
                out.push(Token { tok: Tok::Ident(s), span: span1!(sl, sc, len) });
            }
            _ => {
                return Err(SyntaxError {
                    span: span1!(sl, sc, 1),
                    message: format!("unexpected character `{}`", c),
                })
            }
        }
    }
    Ok(out)
}
