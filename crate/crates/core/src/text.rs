//! Textual serialization of modules (`.mir` files).
//!
//! Grammar sketch:
//!
//! ```text
//! module      := item*
//! item        := global | safe_global | func
//! global      := "global" @name ":" size ("=" ("zero" | "[" byte,* "]"))?
//! safe_global := "safe_global" @name
//! func        := "func" @name "(" (type %name),* ")" "->" (type | "void")
//!                ("!src" "file")? "{" block+ "}"
//! block       := label ":" instr*
//! instr       := "%r = add i32 %a, %b"        (also sub mul udiv sdiv and or
//!                                              xor shl lshr ashr)
//!              | "%c = icmp sge i8 %x, 97"
//!              | "%s = select i32 %c, %a, %b" (type optional on input)
//!              | "%v = load i8, %p"
//!              | "store i8 %v, %p"
//!              | "%p2 = ptradd %p, %off"
//!              | "%m = phi i32 [%a, %T], [%b, %F]"
//!              | "br %c, label %T, label %F"
//!              | "br label %M"
//!              | "ret %v" | "ret"
//! ```
//!
//! Constants are decimal literals typed by context; character literals like
//! `'a'` are sugar for their code point. Comments run from `;` to end of
//! line. Globals must be declared before the functions that reference them.
//!
//! Parsing attaches each instruction's physical line as `source_line` (the
//! hook for line-level filtering); printing does not emit line info, and
//! structural equality ignores it, so parse∘print is the identity on
//! everything else.

use crate::ir::*;
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: {message}")]
    Syntax { line: u32, col: u32, message: String },
    #[error("{line}:{col}: semantic error: {message}")]
    Semantic { line: u32, col: u32, message: String },
    #[error("parsed module does not validate:\n{}", violations.join("\n"))]
    Invalid { violations: Vec<String> },
}

type PResult<T> = Result<T, ParseError>;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Reg(String),
    GlobalRef(String),
    Int(i128),
    Str(String),
    Char(u8),
    Bang(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Eq,
    Arrow,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Reg(s) => format!("`%{s}`"),
            Tok::GlobalRef(s) => format!("`@{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::Char(_) => "character literal".into(),
            Tok::Bang(s) => format!("`!{s}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Arrow => "`->`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: u32,
    col: u32,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> PResult<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let mut chars = text.chars().peekable();

    macro_rules! push {
        ($tok:expr, $line:expr, $col:expr) => {
            tokens.push(Token { tok: $tok, line: $line, col: $col })
        };
    }

    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        let mut bump = |chars: &mut std::iter::Peekable<std::str::Chars>| {
            let c = chars.next().unwrap();
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        };
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump(&mut chars);
            }
            ';' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump(&mut chars);
                }
            }
            '(' => {
                bump(&mut chars);
                push!(Tok::LParen, tline, tcol);
            }
            ')' => {
                bump(&mut chars);
                push!(Tok::RParen, tline, tcol);
            }
            '{' => {
                bump(&mut chars);
                push!(Tok::LBrace, tline, tcol);
            }
            '}' => {
                bump(&mut chars);
                push!(Tok::RBrace, tline, tcol);
            }
            '[' => {
                bump(&mut chars);
                push!(Tok::LBracket, tline, tcol);
            }
            ']' => {
                bump(&mut chars);
                push!(Tok::RBracket, tline, tcol);
            }
            ',' => {
                bump(&mut chars);
                push!(Tok::Comma, tline, tcol);
            }
            ':' => {
                bump(&mut chars);
                push!(Tok::Colon, tline, tcol);
            }
            '=' => {
                bump(&mut chars);
                push!(Tok::Eq, tline, tcol);
            }
            '-' => {
                bump(&mut chars);
                match chars.peek() {
                    Some('>') => {
                        bump(&mut chars);
                        push!(Tok::Arrow, tline, tcol);
                    }
                    Some(d) if d.is_ascii_digit() => {
                        let mut n: i128 = 0;
                        while let Some(&d) = chars.peek() {
                            if !d.is_ascii_digit() {
                                break;
                            }
                            n = n * 10 - (bump(&mut chars) as i128 - '0' as i128);
                            if n < -(u64::MAX as i128) {
                                return Err(ParseError::Syntax {
                                    line: tline,
                                    col: tcol,
                                    message: "integer literal out of range".into(),
                                });
                            }
                        }
                        push!(Tok::Int(n), tline, tcol);
                    }
                    _ => {
                        return Err(ParseError::Syntax {
                            line: tline,
                            col: tcol,
                            message: "expected `->` or a negative integer after `-`".into(),
                        })
                    }
                }
            }
            '%' | '@' => {
                let sigil = bump(&mut chars);
                let mut name = String::new();
                while let Some(&d) = chars.peek() {
                    if !is_ident_char(d) {
                        break;
                    }
                    name.push(bump(&mut chars));
                }
                if name.is_empty() {
                    return Err(ParseError::Syntax {
                        line: tline,
                        col: tcol,
                        message: format!("expected a name after `{sigil}`"),
                    });
                }
                if sigil == '%' {
                    push!(Tok::Reg(name), tline, tcol);
                } else {
                    push!(Tok::GlobalRef(name), tline, tcol);
                }
            }
            '!' => {
                bump(&mut chars);
                let mut name = String::new();
                while let Some(&d) = chars.peek() {
                    if !is_ident_char(d) {
                        break;
                    }
                    name.push(bump(&mut chars));
                }
                push!(Tok::Bang(name), tline, tcol);
            }
            '"' => {
                bump(&mut chars);
                let mut s = String::new();
                loop {
                    match chars.peek() {
                        None | Some('\n') => {
                            return Err(ParseError::Syntax {
                                line: tline,
                                col: tcol,
                                message: "unterminated string literal".into(),
                            })
                        }
                        Some('"') => {
                            bump(&mut chars);
                            break;
                        }
                        Some(_) => s.push(bump(&mut chars)),
                    }
                }
                push!(Tok::Str(s), tline, tcol);
            }
            '\'' => {
                bump(&mut chars);
                let c = match chars.peek() {
                    Some('\\') => {
                        bump(&mut chars);
                        let esc = chars.peek().copied();
                        match esc {
                            Some('n') => {
                                bump(&mut chars);
                                b'\n'
                            }
                            Some('t') => {
                                bump(&mut chars);
                                b'\t'
                            }
                            Some('0') => {
                                bump(&mut chars);
                                0
                            }
                            Some('\\') => {
                                bump(&mut chars);
                                b'\\'
                            }
                            Some('\'') => {
                                bump(&mut chars);
                                b'\''
                            }
                            _ => {
                                return Err(ParseError::Syntax {
                                    line: tline,
                                    col: tcol,
                                    message: "unknown escape in character literal".into(),
                                })
                            }
                        }
                    }
                    Some(&c) if c.is_ascii() && c != '\'' && c != '\n' => {
                        bump(&mut chars);
                        c as u8
                    }
                    _ => {
                        return Err(ParseError::Syntax {
                            line: tline,
                            col: tcol,
                            message: "malformed character literal".into(),
                        })
                    }
                };
                if chars.peek() != Some(&'\'') {
                    return Err(ParseError::Syntax {
                        line: tline,
                        col: tcol,
                        message: "character literal must be a single character".into(),
                    });
                }
                bump(&mut chars);
                push!(Tok::Char(c), tline, tcol);
            }
            d if d.is_ascii_digit() => {
                let mut n: i128 = 0;
                while let Some(&d) = chars.peek() {
                    if !d.is_ascii_digit() {
                        break;
                    }
                    n = n * 10 + (bump(&mut chars) as i128 - '0' as i128);
                    if n > u64::MAX as i128 {
                        return Err(ParseError::Syntax {
                            line: tline,
                            col: tcol,
                            message: "integer literal out of range".into(),
                        });
                    }
                }
                push!(Tok::Int(n), tline, tcol);
            }
            c if is_ident_start(c) => {
                let mut name = String::new();
                while let Some(&d) = chars.peek() {
                    if !is_ident_char(d) {
                        break;
                    }
                    name.push(bump(&mut chars));
                }
                push!(Tok::Ident(name), tline, tcol);
            }
            other => {
                return Err(ParseError::Syntax {
                    line: tline,
                    col: tcol,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    tokens.push(Token { tok: Tok::Eof, line, col });
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn syntax<T>(&self, tok: &Token, message: impl Into<String>) -> PResult<T> {
        Err(ParseError::Syntax {
            line: tok.line,
            col: tok.col,
            message: message.into(),
        })
    }

    fn semantic<T>(&self, tok: &Token, message: impl Into<String>) -> PResult<T> {
        Err(ParseError::Semantic {
            line: tok.line,
            col: tok.col,
            message: message.into(),
        })
    }

    fn expect(&mut self, want: Tok, what: &str) -> PResult<Token> {
        let t = self.next();
        if t.tok == want {
            Ok(t)
        } else {
            self.syntax(&t, format!("expected {what}, found {}", t.tok.describe()))
        }
    }

    fn expect_ident(&mut self, what: &str) -> PResult<(String, Token)> {
        let t = self.next();
        match &t.tok {
            Tok::Ident(s) => Ok((s.clone(), t.clone())),
            _ => self.syntax(&t, format!("expected {what}, found {}", t.tok.describe())),
        }
    }

    fn expect_reg(&mut self, what: &str) -> PResult<(String, Token)> {
        let t = self.next();
        match &t.tok {
            Tok::Reg(s) => Ok((s.clone(), t.clone())),
            _ => self.syntax(&t, format!("expected {what}, found {}", t.tok.describe())),
        }
    }

    fn expect_global(&mut self, what: &str) -> PResult<(String, Token)> {
        let t = self.next();
        match &t.tok {
            Tok::GlobalRef(s) => Ok((s.clone(), t.clone())),
            _ => self.syntax(&t, format!("expected {what}, found {}", t.tok.describe())),
        }
    }

    fn eat(&mut self, want: &Tok) -> bool {
        if &self.peek().tok == want {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn parse_type_name(s: &str) -> Option<IrType> {
        Some(match s {
            "i1" => IrType::I1,
            "i8" => IrType::I8,
            "i32" => IrType::I32,
            "i64" => IrType::I64,
            "ptr" => IrType::Ptr,
            _ => return None,
        })
    }

    fn expect_type(&mut self) -> PResult<IrType> {
        let t = self.next();
        if let Tok::Ident(s) = &t.tok {
            if let Some(ty) = Self::parse_type_name(s) {
                return Ok(ty);
            }
        }
        self.syntax(&t, format!("expected a type, found {}", t.tok.describe()))
    }

    fn peek_type(&self) -> Option<IrType> {
        match &self.peek().tok {
            Tok::Ident(s) => Self::parse_type_name(s),
            _ => None,
        }
    }
}

/// Per-function symbol context used to resolve `%name` operands.
struct FuncCtx<'a> {
    params: HashMap<&'a str, (usize, IrType)>,
    /// Registers defined so far, in textual order (used only for inferring
    /// the value type of an unannotated `select`).
    reg_types: HashMap<String, IrType>,
    globals: HashMap<&'a str, ()>,
}

impl<'a> FuncCtx<'a> {
    fn resolve(&self, p: &Parser, tok: &Token, expected: IrType) -> PResult<Value> {
        match &tok.tok {
            Tok::Reg(name) => {
                if let Some(&(index, ty)) = self.params.get(name.as_str()) {
                    if ty != expected {
                        return p.semantic(
                            tok,
                            format!("%{name} has type {ty} but {expected} is required here"),
                        );
                    }
                    Ok(Value::Arg { index, name: name.clone(), ty })
                } else {
                    Ok(Value::reg(name.clone(), expected))
                }
            }
            Tok::GlobalRef(name) => {
                if !self.globals.contains_key(name.as_str()) {
                    return p.semantic(tok, format!("reference to undeclared global @{name}"));
                }
                if expected != IrType::Ptr {
                    return p.semantic(tok, format!("@{name} is ptr but {expected} is required here"));
                }
                Ok(Value::global(name.clone()))
            }
            Tok::Int(v) => {
                if expected == IrType::Ptr {
                    return p.semantic(tok, "integer literal cannot have type ptr");
                }
                let w = expected.bit_width();
                let (lo, hi) = if w == 64 {
                    (i64::MIN as i128, u64::MAX as i128)
                } else {
                    (-(1i128 << (w - 1)), (1i128 << w) - 1)
                };
                if *v < lo || *v > hi {
                    return p.semantic(tok, format!("constant {v} does not fit {expected}"));
                }
                Ok(Value::Const { ty: expected, bits: (*v as u64) & expected.mask() })
            }
            Tok::Char(c) => {
                if expected == IrType::Ptr {
                    return p.semantic(tok, "character literal cannot have type ptr");
                }
                Ok(Value::Const { ty: expected, bits: (*c as u64) & expected.mask() })
            }
            other => p.syntax(tok, format!("expected an operand, found {}", other.describe())),
        }
    }

    /// Type of a `%name` operand when it must be discovered rather than
    /// imposed (unannotated `select`).
    fn known_type(&self, name: &str) -> Option<IrType> {
        if let Some(&(_, ty)) = self.params.get(name) {
            return Some(ty);
        }
        self.reg_types.get(name).copied()
    }
}

/// Parses a module from `.mir` text. On success the module has been
/// validated; failures report a position and what was expected.
pub fn parse_module(text: &str) -> Result<Module, ParseError> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0 };
    let mut module = Module::default();

    loop {
        let t = p.peek().clone();
        match &t.tok {
            Tok::Eof => break,
            Tok::Ident(kw) if kw == "global" => {
                p.next();
                let (name, ntok) = p.expect_global("a global name")?;
                if module.global(&name).is_some() {
                    return p.semantic(&ntok, format!("duplicate global @{name}"));
                }
                p.expect(Tok::Colon, "`:`")?;
                let sz = p.next();
                let size = match sz.tok {
                    Tok::Int(v) if v > 0 && v <= 1 << 20 => v as usize,
                    _ => return p.syntax(&sz, "expected a global size in bytes"),
                };
                let init = if p.eat(&Tok::Eq) {
                    let t = p.next();
                    match &t.tok {
                        Tok::Ident(z) if z == "zero" => vec![0u8; size],
                        Tok::LBracket => {
                            let mut bytes = Vec::new();
                            if !p.eat(&Tok::RBracket) {
                                loop {
                                    let b = p.next();
                                    match b.tok {
                                        Tok::Int(v) if (0..=255).contains(&v) => {
                                            bytes.push(v as u8)
                                        }
                                        Tok::Char(c) => bytes.push(c),
                                        _ => return p.syntax(&b, "expected a byte value"),
                                    }
                                    if p.eat(&Tok::RBracket) {
                                        break;
                                    }
                                    p.expect(Tok::Comma, "`,`")?;
                                }
                            }
                            if bytes.len() != size {
                                return p.semantic(
                                    &t,
                                    format!(
                                        "initializer has {} bytes, global size is {size}",
                                        bytes.len()
                                    ),
                                );
                            }
                            bytes
                        }
                        _ => return p.syntax(&t, "expected `zero` or a byte list"),
                    }
                } else {
                    vec![0u8; size]
                };
                module.globals.push(Global { name, size, init });
            }
            Tok::Ident(kw) if kw == "safe_global" => {
                p.next();
                let (name, ntok) = p.expect_global("a global name")?;
                if module.global(&name).is_none() {
                    return p.semantic(&ntok, format!("safe_global names undeclared global @{name}"));
                }
                module.safe_global = Some(name);
            }
            Tok::Ident(kw) if kw == "func" => {
                let f = parse_function(&mut p, &module)?;
                if module.function(&f.name).is_some() {
                    return p.semantic(&t, format!("duplicate function @{}", f.name));
                }
                module.functions.push(f);
            }
            other => {
                return p.syntax(
                    &t,
                    format!(
                        "expected `global`, `safe_global` or `func`, found {}",
                        other.describe()
                    ),
                )
            }
        }
    }

    let violations = validate_module(&module);
    if !violations.is_empty() {
        return Err(ParseError::Invalid { violations });
    }
    Ok(module)
}

fn parse_function(p: &mut Parser, module: &Module) -> PResult<Function> {
    p.next(); // `func`
    let (name, _) = p.expect_global("a function name")?;
    p.expect(Tok::LParen, "`(`")?;
    let mut params = Vec::new();
    if !p.eat(&Tok::RParen) {
        loop {
            let ty = p.expect_type()?;
            let (pname, ptok) = p.expect_reg("a parameter name")?;
            if params.iter().any(|(n, _)| n == &pname) {
                return p.semantic(&ptok, format!("duplicate parameter %{pname}"));
            }
            params.push((pname, ty));
            if p.eat(&Tok::RParen) {
                break;
            }
            p.expect(Tok::Comma, "`,`")?;
        }
    }
    p.expect(Tok::Arrow, "`->`")?;
    let rt_tok = p.next();
    let return_type = match &rt_tok.tok {
        Tok::Ident(s) if s == "void" => None,
        Tok::Ident(s) => match Parser::parse_type_name(s) {
            Some(ty) => Some(ty),
            None => return p.syntax(&rt_tok, "expected a return type or `void`"),
        },
        _ => return p.syntax(&rt_tok, "expected a return type or `void`"),
    };
    let mut source_file = None;
    if let Tok::Bang(attr) = &p.peek().tok {
        let attr = attr.clone();
        let t = p.next();
        if attr != "src" {
            return p.syntax(&t, format!("unknown attribute `!{attr}`"));
        }
        let st = p.next();
        match &st.tok {
            Tok::Str(s) => source_file = Some(s.clone()),
            _ => return p.syntax(&st, "expected a file name string after `!src`"),
        }
    }
    p.expect(Tok::LBrace, "`{`")?;

    let mut ctx = FuncCtx {
        params: params
            .iter()
            .enumerate()
            .map(|(i, (n, ty))| (n.as_str(), (i, *ty)))
            .collect(),
        reg_types: HashMap::new(),
        globals: module.globals.iter().map(|g| (g.name.as_str(), ())).collect(),
    };
    // The function under construction can also reference globals declared in
    // this module plus nothing else; label references are checked at the end.
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut label_refs: Vec<(String, Token)> = Vec::new();

    loop {
        let t = p.peek().clone();
        match &t.tok {
            Tok::RBrace => {
                p.next();
                break;
            }
            Tok::Ident(label) if matches!(p.tokens.get(p.pos + 1).map(|t| &t.tok), Some(Tok::Colon)) => {
                let label = label.clone();
                if blocks.iter().any(|b| b.label == label) {
                    return p.semantic(&t, format!("duplicate block label {label}"));
                }
                p.next();
                p.next();
                blocks.push(BasicBlock::new(label, vec![]));
            }
            _ if blocks.is_empty() => {
                return p.syntax(&t, format!("expected a block label, found {}", t.tok.describe()));
            }
            _ => {
                let inst = parse_instruction(p, &mut ctx, return_type, &mut label_refs)?;
                blocks.last_mut().unwrap().instructions.push(inst);
            }
        }
    }

    for (label, tok) in &label_refs {
        if !blocks.iter().any(|b| &b.label == label) {
            return p.semantic(tok, format!("branch to undeclared label %{label}"));
        }
    }

    Ok(Function {
        name,
        params,
        return_type,
        blocks,
        source_file,
    })
}

fn parse_instruction(
    p: &mut Parser,
    ctx: &mut FuncCtx,
    return_type: Option<IrType>,
    label_refs: &mut Vec<(String, Token)>,
) -> PResult<Instruction> {
    let t = p.next();
    let line = t.line;
    let mut inst = match &t.tok {
        Tok::Ident(kw) if kw == "store" => {
            let ty = p.expect_type()?;
            let vt = p.next();
            let value = ctx.resolve(p, &vt, ty)?;
            p.expect(Tok::Comma, "`,`")?;
            let at = p.next();
            let addr = ctx.resolve(p, &at, IrType::Ptr)?;
            Instruction::store(ty, value, addr)
        }
        Tok::Ident(kw) if kw == "br" => {
            if let Tok::Ident(l) = &p.peek().tok {
                if l == "label" {
                    p.next();
                    let (target, tok) = p.expect_reg("a target label")?;
                    label_refs.push((target.clone(), tok));
                    Instruction::br(target)
                } else {
                    return p.syntax(p.peek(), "expected `label` or a condition after `br`");
                }
            } else {
                let ct = p.next();
                let cond = ctx.resolve(p, &ct, IrType::I1)?;
                p.expect(Tok::Comma, "`,`")?;
                let (lbl_kw, _) = p.expect_ident("`label`")?;
                if lbl_kw != "label" {
                    return p.syntax(&t, "expected `label` after the branch condition");
                }
                let (then_l, ttok) = p.expect_reg("a target label")?;
                p.expect(Tok::Comma, "`,`")?;
                let (lbl_kw2, _) = p.expect_ident("`label`")?;
                if lbl_kw2 != "label" {
                    return p.syntax(&t, "expected `label` before the second target");
                }
                let (else_l, etok) = p.expect_reg("a target label")?;
                label_refs.push((then_l.clone(), ttok));
                label_refs.push((else_l.clone(), etok));
                Instruction::br_cond(cond, then_l, else_l)
            }
        }
        Tok::Ident(kw) if kw == "ret" => match return_type {
            None => Instruction::ret(None),
            Some(rt) => {
                let vt = p.next();
                let value = ctx.resolve(p, &vt, rt)?;
                Instruction::ret(Some(value))
            }
        },
        Tok::Reg(result) => {
            let result = result.clone();
            if ctx.params.contains_key(result.as_str()) {
                return p.semantic(&t, format!("%{result} shadows a parameter"));
            }
            p.expect(Tok::Eq, "`=`")?;
            let (op_name, op_tok) = p.expect_ident("an opcode")?;
            let inst = parse_rhs(p, ctx, &op_name, &op_tok, result, label_refs)?;
            if let (Some(r), Some(ty)) = (&inst.result, inst.result_type) {
                ctx.reg_types.insert(r.clone(), ty);
            }
            inst
        }
        other => {
            return p.syntax(
                &t,
                format!("expected an instruction, found {}", other.describe()),
            )
        }
    };
    inst.source_line = Some(line);
    Ok(inst)
}

fn parse_rhs(
    p: &mut Parser,
    ctx: &mut FuncCtx,
    op_name: &str,
    op_tok: &Token,
    result: String,
    label_refs: &mut Vec<(String, Token)>,
) -> PResult<Instruction> {
    if let Some(opcode) = Opcode::binary_from_name(op_name) {
        let ty = p.expect_type()?;
        let at = p.next();
        let a = ctx.resolve(p, &at, ty)?;
        p.expect(Tok::Comma, "`,`")?;
        let bt = p.next();
        let b = ctx.resolve(p, &bt, ty)?;
        return Ok(Instruction::binary(opcode, ty, result, a, b));
    }
    match op_name {
        "icmp" => {
            let (pred_name, pred_tok) = p.expect_ident("a comparison predicate")?;
            let pred = match IcmpPred::from_name(&pred_name) {
                Some(pr) => pr,
                None => return p.syntax(&pred_tok, format!("unknown predicate `{pred_name}`")),
            };
            let ty = p.expect_type()?;
            let at = p.next();
            let a = ctx.resolve(p, &at, ty)?;
            p.expect(Tok::Comma, "`,`")?;
            let bt = p.next();
            let b = ctx.resolve(p, &bt, ty)?;
            Ok(Instruction::icmp(pred, result, a, b))
        }
        "select" => {
            let annotated = p.peek_type().map(|ty| {
                p.next();
                ty
            });
            let ct = p.next();
            let cond = ctx.resolve(p, &ct, IrType::I1)?;
            p.expect(Tok::Comma, "`,`")?;
            let at = p.next();
            p.expect(Tok::Comma, "`,`")?;
            let bt = p.next();
            let ty = match annotated {
                Some(ty) => ty,
                None => {
                    // Infer from whichever value operand has a known type.
                    let from = |t: &Token| match &t.tok {
                        Tok::Reg(n) => ctx.known_type(n),
                        Tok::GlobalRef(_) => Some(IrType::Ptr),
                        _ => None,
                    };
                    match from(&at).or_else(|| from(&bt)) {
                        Some(ty) => ty,
                        None => {
                            return p.semantic(
                                op_tok,
                                "cannot infer select type; annotate as `select <type> ...`",
                            )
                        }
                    }
                }
            };
            let a = ctx.resolve(p, &at, ty)?;
            let b = ctx.resolve(p, &bt, ty)?;
            Ok(Instruction::select(ty, result, cond, a, b))
        }
        "load" => {
            let ty = p.expect_type()?;
            p.expect(Tok::Comma, "`,`")?;
            let at = p.next();
            let addr = ctx.resolve(p, &at, IrType::Ptr)?;
            Ok(Instruction::load(ty, result, addr))
        }
        "ptradd" => {
            let bt = p.next();
            let base = ctx.resolve(p, &bt, IrType::Ptr)?;
            p.expect(Tok::Comma, "`,`")?;
            let ot = p.next();
            let offset = ctx.resolve(p, &ot, IrType::I64)?;
            Ok(Instruction::ptradd(result, base, offset))
        }
        "phi" => {
            let ty = p.expect_type()?;
            let mut incoming = Vec::new();
            loop {
                p.expect(Tok::LBracket, "`[`")?;
                let vt = p.next();
                let value = ctx.resolve(p, &vt, ty)?;
                p.expect(Tok::Comma, "`,`")?;
                let (label, ltok) = p.expect_reg("an incoming block label")?;
                p.expect(Tok::RBracket, "`]`")?;
                label_refs.push((label.clone(), ltok));
                incoming.push((value, label));
                if !p.eat(&Tok::Comma) {
                    break;
                }
            }
            Ok(Instruction::phi(ty, result, incoming))
        }
        other => p.syntax(op_tok, format!("unknown opcode `{other}`")),
    }
}

/// Attaches `name` as `source_file` to every function that doesn't declare
/// one (`!src`). The CLI applies the input file's name this way.
pub fn apply_default_source_file(module: &mut Module, name: &str) {
    for f in &mut module.functions {
        if f.source_file.is_none() {
            f.source_file = Some(name.to_string());
        }
    }
}

fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::Const { .. } => {
            let _ = write!(out, "{}", v.const_signed().unwrap());
        }
        Value::Reg { name, .. } | Value::Arg { name, .. } => {
            let _ = write!(out, "%{name}");
        }
        Value::Global { name } => {
            let _ = write!(out, "@{name}");
        }
    }
}

fn write_instruction(out: &mut String, inst: &Instruction) {
    out.push_str("  ");
    if let Some(r) = &inst.result {
        let _ = write!(out, "%{r} = ");
    }
    match inst.opcode {
        op if op.is_binary_int() => {
            let _ = write!(out, "{} {} ", op.mnemonic(), inst.result_type.unwrap());
            write_value(out, &inst.operands[0]);
            out.push_str(", ");
            write_value(out, &inst.operands[1]);
        }
        Opcode::Icmp(pred) => {
            let _ = write!(out, "icmp {} {} ", pred.name(), inst.operands[0].ty());
            write_value(out, &inst.operands[0]);
            out.push_str(", ");
            write_value(out, &inst.operands[1]);
        }
        Opcode::Select => {
            let _ = write!(out, "select {} ", inst.result_type.unwrap());
            write_value(out, &inst.operands[0]);
            out.push_str(", ");
            write_value(out, &inst.operands[1]);
            out.push_str(", ");
            write_value(out, &inst.operands[2]);
        }
        Opcode::Load => {
            let _ = write!(out, "load {}, ", inst.result_type.unwrap());
            write_value(out, &inst.operands[0]);
        }
        Opcode::Store => {
            let _ = write!(out, "store {} ", inst.operands[0].ty());
            write_value(out, &inst.operands[0]);
            out.push_str(", ");
            write_value(out, &inst.operands[1]);
        }
        Opcode::PtrAdd => {
            out.push_str("ptradd ");
            write_value(out, &inst.operands[0]);
            out.push_str(", ");
            write_value(out, &inst.operands[1]);
        }
        Opcode::BrCond => {
            out.push_str("br ");
            write_value(out, &inst.operands[0]);
            let _ = write!(out, ", label %{}, label %{}", inst.labels[0], inst.labels[1]);
        }
        Opcode::Br => {
            let _ = write!(out, "br label %{}", inst.labels[0]);
        }
        Opcode::Phi => {
            let _ = write!(out, "phi {} ", inst.result_type.unwrap());
            for (i, (v, l)) in inst.operands.iter().zip(&inst.labels).enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push('[');
                write_value(out, v);
                let _ = write!(out, ", %{l}]");
            }
        }
        Opcode::Ret => {
            out.push_str("ret");
            if let Some(v) = inst.operands.first() {
                out.push(' ');
                write_value(out, v);
            }
        }
        _ => unreachable!(),
    }
    out.push('\n');
}

/// Renders one function in the grammar above. Deterministic.
pub fn print_function(f: &Function) -> String {
    let mut out = String::new();
    let _ = write!(out, "func @{}(", f.name);
    for (i, (name, ty)) in f.params.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{ty} %{name}");
    }
    out.push_str(") -> ");
    match f.return_type {
        Some(ty) => {
            let _ = write!(out, "{ty}");
        }
        None => out.push_str("void"),
    }
    if let Some(src) = &f.source_file {
        let _ = write!(out, " !src \"{src}\"");
    }
    out.push_str(" {\n");
    for block in &f.blocks {
        let _ = write!(out, "{}:\n", block.label);
        for inst in &block.instructions {
            write_instruction(&mut out, inst);
        }
    }
    out.push_str("}\n");
    out
}

/// Renders a module as `.mir` text. Printing is deterministic: two prints of
/// the same module are byte-identical, and `parse_module(print_module(m))`
/// is structurally identical to `m`.
pub fn print_module(module: &Module) -> String {
    let mut out = String::from("; mir\n");
    for g in &module.globals {
        let _ = write!(out, "global @{} : {}", g.name, g.size);
        if g.is_zero_init() {
            out.push_str(" = zero\n");
        } else {
            out.push_str(" = [");
            for (i, b) in g.init.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{b}");
            }
            out.push_str("]\n");
        }
    }
    if let Some(name) = &module.safe_global {
        let _ = write!(out, "safe_global @{name}\n");
    }
    for f in &module.functions {
        out.push('\n');
        out.push_str(&print_function(f));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_identity_function() {
        let m = parse_module("func @id(i32 %x) -> i32 { entry: ret %x }").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].blocks.len(), 1);
        assert_eq!(m.functions[0].blocks[0].instructions.len(), 1);
    }

    #[test]
    fn branch_to_undeclared_label_is_semantic_error() {
        let err = parse_module(
            "func @f(i1 %c) -> void {\nentry:\n  br %c, label %a, label %nowhere\na:\n  ret\n}",
        )
        .unwrap_err();
        match err {
            ParseError::Semantic { message, .. } => {
                assert!(message.contains("%nowhere"), "{message}")
            }
            other => panic!("expected semantic error, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_module("func @f( -> void { entry: ret }").unwrap_err();
        match err {
            ParseError::Syntax { line, col, .. } => {
                assert_eq!(line, 1);
                assert!(col > 1);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_module_reports_violations() {
        // Uses a register defined later in the same block.
        let err = parse_module(
            "func @f() -> i32 {\nentry:\n  %a = add i32 %b, 1\n  %b = add i32 2, 3\n  ret %a\n}",
        )
        .unwrap_err();
        match err {
            ParseError::Invalid { violations } => {
                assert_eq!(violations.len(), 1, "{violations:?}");
                assert!(violations[0].contains("%b"));
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn char_literals_and_comments() {
        let m = parse_module(
            "; leading comment\nfunc @f(i8 %x) -> i8 {\nentry:\n  %t = add i8 %x, 'a' ; trailing\n  ret %t\n}",
        )
        .unwrap();
        let inst = &m.functions[0].blocks[0].instructions[0];
        assert_eq!(inst.operands[1], Value::const_int(IrType::I8, 97));
        assert_eq!(inst.source_line, Some(4));
    }

    #[test]
    fn print_then_parse_is_structurally_identical() {
        let text = "\
global @buf : 4 = [104, 105, 0, 0]
func @f(ptr %p, i64 %n) -> i64 !src \"f.c\" {
entry:
  %c = icmp sgt i64 %n, 0
  br %c, label %a, label %done
a:
  %q = ptradd %p, %n
  %v = load i8, %q
  %w = add i8 %v, -1
  store i8 %w, @buf
  br label %done
done:
  %r = phi i64 [%n, %a], [0, %entry]
  %s = select i64 %c, %r, 7
  ret %s
}
";
        let m = parse_module(text).unwrap();
        let printed = print_module(&m);
        let reparsed = parse_module(&printed).unwrap();
        assert_eq!(m, reparsed);
        // Printing is deterministic.
        assert_eq!(printed, print_module(&reparsed));
    }

    #[test]
    fn safe_global_round_trips() {
        let mut m = parse_module("func @f() -> void { entry: ret }").unwrap();
        m.ensure_safe_global();
        let printed = print_module(&m);
        assert!(printed.contains("global @__safe_mem : 8 = zero"));
        assert!(printed.contains("safe_global @__safe_mem"));
        let reparsed = parse_module(&printed).unwrap();
        assert_eq!(m, reparsed);
    }

    #[test]
    fn empty_module_prints_header_only() {
        assert_eq!(print_module(&Module::default()), "; mir\n");
        assert_eq!(parse_module("; mir\n").unwrap(), Module::default());
    }

    #[test]
    fn unannotated_select_infers_from_defined_register() {
        let m = parse_module(
            "func @f(i1 %c, i32 %x) -> i32 {\nentry:\n  %a = add i32 %x, 1\n  %s = select %c, %a, 0\n  ret %s\n}",
        )
        .unwrap();
        let inst = &m.functions[0].blocks[0].instructions[1];
        assert_eq!(inst.result_type, Some(IrType::I32));
    }

    #[test]
    fn negative_constants_wrap_to_width() {
        let m = parse_module(
            "func @f(i8 %x) -> i8 {\nentry:\n  %t = add i8 %x, -32\n  ret %t\n}",
        )
        .unwrap();
        let inst = &m.functions[0].blocks[0].instructions[0];
        assert_eq!(inst.operands[1], Value::Const { ty: IrType::I8, bits: 0xE0 });
        assert_eq!(inst.operands[1].const_signed(), Some(-32));
    }
}
