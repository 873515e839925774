//! Text form of a flow (`.mof`).
//!
//! ```text
//! !arch 3f2a...                    # digest of the arch the flow targets
//! !stream                          # digital ops may consume partial inputs
//! .input x 0 3x32x32               # name, L0 address, CxHxW (stored HWC)
//! .output n2 35840 32x32x32
//! .param p0 {...}                  # read_core operator attributes (JSON)
//! .tile t0 {...}                   # crossbar contents (JSON)
//! cim.write_xb(0,0,t0)
//! mov(L0,0,L1.0,0,27)
//! parallel{cim.read_xb(0,0,0,27),cim.read_xb(0,1,27,54)}
//! dcom(shift_acc[4,2,8,8,27,0],L1.0,100,0,228,32)
//! ```
//!
//! Addresses count buffer words. `#` starts a comment.

use std::fmt::Write as _;

use super::{DcomFunc, Flow, IoDecl, Level, MetaOp, Stmt};
use crate::error::{Error, Result};

pub fn serialize_flow(flow: &Flow) -> String {
    let mut out = String::new();
    if let Some(a) = &flow.arch {
        let _ = writeln!(out, "!arch {a}");
    }
    if flow.stream {
        out.push_str("!stream\n");
    }
    for (kw, decls) in [(".input", &flow.inputs), (".output", &flow.outputs)] {
        for d in decls {
            let dims: Vec<String> = d.dims.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{kw} {} {} {}", d.name, d.addr, dims.join("x"));
        }
    }
    for (name, p) in &flow.params {
        let _ = writeln!(out, ".param {name} {}", serde_json::to_string(p).expect("param serializes"));
    }
    for (name, t) in &flow.tiles {
        let _ = writeln!(out, ".tile {name} {}", serde_json::to_string(t).expect("tile serializes"));
    }
    for s in &flow.stmts {
        match s {
            Stmt::Op(op) => out.push_str(&op_text(op)),
            Stmt::Parallel(ops) => {
                out.push_str("parallel{");
                let parts: Vec<String> = ops.iter().map(op_text).collect();
                out.push_str(&parts.join(","));
                out.push('}');
            }
        }
        out.push('\n');
    }
    out
}

pub fn op_text(op: &MetaOp) -> String {
    match op {
        MetaOp::ReadCore { op, param, core, src, des } => format!("cim.read_core({op},{param},{core},{src},{des})"),
        MetaOp::ReadXb { core, xb, src, des } => format!("cim.read_xb({core},{xb},{src},{des})"),
        MetaOp::WriteXb { core, xb, tile } => format!("cim.write_xb({core},{xb},{tile})"),
        MetaOp::ReadRows { core, xb, lo, hi, src, des } => format!("cim.read_rows({core},{xb},{lo},{hi},{src},{des})"),
        MetaOp::WriteRows { core, xb, lo, hi, tile } => format!("cim.write_rows({core},{xb},{lo},{hi},{tile})"),
        MetaOp::Dcom { func, imm, level, srcs, des, len } => {
            let mut s = format!("dcom({}", func.name());
            if !imm.is_empty() {
                let v: Vec<String> = imm.iter().map(|x| x.to_string()).collect();
                let _ = write!(s, "[{}]", v.join(","));
            }
            let _ = write!(s, ",{level}");
            for a in srcs {
                let _ = write!(s, ",{a}");
            }
            let _ = write!(s, ",{des},{len})");
            s
        }
        MetaOp::Mov { src_level, src, des_level, des, len } => format!("mov({src_level},{src},{des_level},{des},{len})"),
        MetaOp::Reprogram { index, cycles } => format!("reprogram({index},{cycles})"),
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Num(i64),
    Punct(char),
}

struct Lexer<'a> {
    line: usize,
    chars: Vec<char>,
    pos: usize,
    _src: &'a str,
}

impl<'a> Lexer<'a> {
    fn new(line: usize, src: &'a str) -> Self {
        Lexer { line, chars: src.chars().collect(), pos: 0, _src: src }
    }

    fn err<T>(&self, col: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Syntax { line: self.line, col: col + 1, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token and its column, or None at end of line.
    fn next(&mut self) -> Result<Option<(Tok, usize)>> {
        self.skip_ws();
        let Some(&c) = self.chars.get(self.pos) else { return Ok(None) };
        let start = self.pos;
        if c.is_ascii_alphabetic() || c == '_' {
            while self.pos < self.chars.len()
                && (self.chars[self.pos].is_ascii_alphanumeric() || matches!(self.chars[self.pos], '_' | '.'))
            {
                self.pos += 1;
            }
            let w: String = self.chars[start..self.pos].iter().collect();
            return Ok(Some((Tok::Word(w), start)));
        }
        if c.is_ascii_digit() || c == '-' {
            self.pos += 1;
            while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let w: String = self.chars[start..self.pos].iter().collect();
            return match w.parse() {
                Ok(v) => Ok(Some((Tok::Num(v), start))),
                Err(_) => self.err(start, format!("bad number `{w}`")),
            };
        }
        if "(){}[],".contains(c) {
            self.pos += 1;
            return Ok(Some((Tok::Punct(c), start)));
        }
        self.err(start, format!("unexpected character `{c}`"))
    }

    fn expect(&mut self, p: char) -> Result<usize> {
        match self.next()? {
            Some((Tok::Punct(q), col)) if q == p => Ok(col),
            Some((t, col)) => self.err(col, format!("expected `{p}`, found {t:?}")),
            None => self.err(self.chars.len(), format!("expected `{p}`, found end of line")),
        }
    }

    fn peek(&mut self) -> Result<Option<(Tok, usize)>> {
        let save = self.pos;
        let t = self.next();
        self.pos = save;
        t
    }
}

#[derive(Debug)]
enum Arg {
    Word(String, Vec<i64>, usize),
    Num(i64, usize),
}

fn parse_instr(lx: &mut Lexer, name: String, col: usize) -> Result<MetaOp> {
    lx.expect('(')?;
    let mut args = Vec::new();
    loop {
        match lx.next()? {
            Some((Tok::Num(v), c)) => args.push(Arg::Num(v, c)),
            Some((Tok::Word(w), c)) => {
                let mut imm = Vec::new();
                if let Some((Tok::Punct('['), _)) = lx.peek()? {
                    lx.next()?;
                    loop {
                        match lx.next()? {
                            Some((Tok::Num(v), _)) => imm.push(v),
                            Some((t, c)) => return lx.err(c, format!("expected immediate, found {t:?}")),
                            None => return lx.err(lx.chars.len(), "unterminated `[`"),
                        }
                        match lx.next()? {
                            Some((Tok::Punct(','), _)) => {}
                            Some((Tok::Punct(']'), _)) => break,
                            Some((t, c)) => return lx.err(c, format!("expected `,` or `]`, found {t:?}")),
                            None => return lx.err(lx.chars.len(), "unterminated `[`"),
                        }
                    }
                }
                args.push(Arg::Word(w, imm, c));
            }
            Some((t, c)) => return lx.err(c, format!("expected argument, found {t:?}")),
            None => return lx.err(lx.chars.len(), "unterminated argument list"),
        }
        match lx.next()? {
            Some((Tok::Punct(','), _)) => {}
            Some((Tok::Punct(')'), _)) => break,
            Some((t, c)) => return lx.err(c, format!("expected `,` or `)`, found {t:?}")),
            None => return lx.err(lx.chars.len(), "unterminated argument list"),
        }
    }
    let num = |lx: &Lexer, a: &Arg| -> Result<u64> {
        match a {
            Arg::Num(v, _) if *v >= 0 => Ok(*v as u64),
            Arg::Num(_, c) | Arg::Word(_, _, c) => lx.err(*c, "expected a non-negative integer"),
        }
    };
    let word = |lx: &Lexer, a: &Arg| -> Result<String> {
        match a {
            Arg::Word(w, imm, _) if imm.is_empty() => Ok(w.clone()),
            Arg::Num(_, c) | Arg::Word(_, _, c) => lx.err(*c, "expected a name"),
        }
    };
    let level = |lx: &Lexer, a: &Arg| -> Result<Level> {
        if let Arg::Word(w, imm, c) = a {
            if imm.is_empty() {
                if w == "L0" {
                    return Ok(Level::L0);
                }
                if let Some(n) = w.strip_prefix("L1.").and_then(|n| n.parse().ok()) {
                    return Ok(Level::L1(n));
                }
            }
            return lx.err(*c, format!("bad buffer level `{w}`"));
        }
        let Arg::Num(_, c) = a else { unreachable!() };
        lx.err(*c, "expected a buffer level")
    };
    let arity = |n: usize| -> Result<()> {
        if args.len() != n {
            return lx.err(col, format!("`{name}` takes {n} arguments, got {}", args.len()));
        }
        Ok(())
    };
    let u32_ = |lx: &Lexer, a: &Arg| -> Result<u32> {
        let v = num(lx, a)?;
        u32::try_from(v).or_else(|_| match a {
            Arg::Num(_, c) | Arg::Word(_, _, c) => lx.err(*c, "index too large"),
        })
    };
    Ok(match name.as_str() {
        "cim.read_core" => {
            arity(5)?;
            MetaOp::ReadCore {
                op: word(lx, &args[0])?,
                param: word(lx, &args[1])?,
                core: u32_(lx, &args[2])?,
                src: num(lx, &args[3])?,
                des: num(lx, &args[4])?,
            }
        }
        "cim.read_xb" => {
            arity(4)?;
            MetaOp::ReadXb {
                core: u32_(lx, &args[0])?,
                xb: u32_(lx, &args[1])?,
                src: num(lx, &args[2])?,
                des: num(lx, &args[3])?,
            }
        }
        "cim.write_xb" => {
            arity(3)?;
            MetaOp::WriteXb { core: u32_(lx, &args[0])?, xb: u32_(lx, &args[1])?, tile: word(lx, &args[2])? }
        }
        "cim.read_rows" => {
            arity(6)?;
            MetaOp::ReadRows {
                core: u32_(lx, &args[0])?,
                xb: u32_(lx, &args[1])?,
                lo: u32_(lx, &args[2])?,
                hi: u32_(lx, &args[3])?,
                src: num(lx, &args[4])?,
                des: num(lx, &args[5])?,
            }
        }
        "cim.write_rows" => {
            arity(5)?;
            MetaOp::WriteRows {
                core: u32_(lx, &args[0])?,
                xb: u32_(lx, &args[1])?,
                lo: u32_(lx, &args[2])?,
                hi: u32_(lx, &args[3])?,
                tile: word(lx, &args[4])?,
            }
        }
        "mov" => {
            arity(5)?;
            MetaOp::Mov {
                src_level: level(lx, &args[0])?,
                src: num(lx, &args[1])?,
                des_level: level(lx, &args[2])?,
                des: num(lx, &args[3])?,
                len: num(lx, &args[4])?,
            }
        }
        "reprogram" => {
            arity(2)?;
            MetaOp::Reprogram { index: u32_(lx, &args[0])?, cycles: num(lx, &args[1])? }
        }
        "dcom" => {
            if args.len() < 5 {
                return lx.err(col, format!("`dcom` takes at least 5 arguments, got {}", args.len()));
            }
            let (func, imm) = match &args[0] {
                Arg::Word(w, imm, c) => match DcomFunc::parse(w) {
                    Some(f) => (f, imm.clone()),
                    None => return lx.err(*c, format!("unknown dcom function `{w}`")),
                },
                Arg::Num(_, c) => return lx.err(*c, "expected a dcom function"),
            };
            let n = args.len();
            let srcs = args[2..n - 2].iter().map(|a| num(lx, a)).collect::<Result<_>>()?;
            MetaOp::Dcom {
                func,
                imm,
                level: level(lx, &args[1])?,
                srcs,
                des: num(lx, &args[n - 2])?,
                len: num(lx, &args[n - 1])?,
            }
        }
        other => return lx.err(col, format!("unknown instruction `{other}`")),
    })
}

fn parse_stmt(lx: &mut Lexer) -> Result<Stmt> {
    let (name, col) = match lx.next()? {
        Some((Tok::Word(w), c)) => (w, c),
        Some((t, c)) => return lx.err(c, format!("expected an instruction, found {t:?}")),
        None => unreachable!("blank lines are skipped"),
    };
    let stmt = if name == "parallel" {
        lx.expect('{')?;
        let mut ops = Vec::new();
        loop {
            match lx.next()? {
                Some((Tok::Word(w), c)) => ops.push(parse_instr(lx, w, c)?),
                Some((t, c)) => return lx.err(c, format!("expected an instruction, found {t:?}")),
                None => return lx.err(lx.chars.len(), "unbalanced `parallel{`"),
            }
            match lx.next()? {
                Some((Tok::Punct(','), _)) => {}
                Some((Tok::Punct('}'), _)) => break,
                Some((t, c)) => return lx.err(c, format!("expected `,` or `}}`, found {t:?}")),
                None => return lx.err(lx.chars.len(), "unbalanced `parallel{`"),
            }
        }
        Stmt::Parallel(ops)
    } else {
        Stmt::Op(parse_instr(lx, name, col)?)
    };
    if let Some((t, c)) = lx.next()? {
        return lx.err(c, format!("trailing input {t:?}"));
    }
    Ok(stmt)
}

fn parse_io(line: usize, rest: &str) -> Result<IoDecl> {
    let bad = |msg: &str| Error::Syntax { line, col: 1, msg: msg.to_string() };
    let parts: Vec<&str> = rest.split_whitespace().collect();
    let [name, addr, dims] = parts[..] else { return Err(bad("expected `name addr CxHxW`")) };
    let dims = dims.split('x').map(|d| d.parse().map_err(|_| bad("bad dims"))).collect::<Result<Vec<usize>>>()?;
    Ok(IoDecl { name: name.to_string(), addr: addr.parse().map_err(|_| bad("bad address"))?, dims })
}

pub fn parse_flow(text: &str) -> Result<Flow> {
    let mut flow = Flow::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line = match line.find('#') {
            Some(p) if !line.starts_with('.') => line[..p].trim_end(),
            _ => line,
        };
        if let Some(rest) = line.strip_prefix("!arch") {
            flow.arch = Some(rest.trim().to_string());
        } else if line == "!stream" {
            flow.stream = true;
        } else if let Some(rest) = line.strip_prefix(".input ") {
            flow.inputs.push(parse_io(line_no, rest)?);
        } else if let Some(rest) = line.strip_prefix(".output ") {
            flow.outputs.push(parse_io(line_no, rest)?);
        } else if let Some(rest) = line.strip_prefix(".param ").or_else(|| line.strip_prefix(".tile ")) {
            let (name, json) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Syntax { line: line_no, col: 1, msg: "expected `name {json}`".into() })?;
            let syn = |e: serde_json::Error| Error::Syntax { line: line_no, col: e.column(), msg: e.to_string() };
            if line.starts_with(".param") {
                flow.params.insert(name.to_string(), serde_json::from_str(json).map_err(syn)?);
            } else {
                flow.tiles.insert(name.to_string(), serde_json::from_str(json).map_err(syn)?);
            }
        } else if line.starts_with('!') || line.starts_with('.') {
            return Err(Error::Syntax { line: line_no, col: 1, msg: format!("unknown directive `{line}`") });
        } else {
            let mut lx = Lexer::new(line_no, line);
            flow.stmts.push(parse_stmt(&mut lx)?);
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_canonical_forms() {
        let block = Stmt::Parallel(vec![
            MetaOp::ReadCore { op: "conv".into(), param: "p0".into(), core: 0, src: 0, des: 3072 },
            MetaOp::ReadCore { op: "conv".into(), param: "p0".into(), core: 1, src: 1440, des: 19456 },
        ]);
        let mov = Stmt::Op(MetaOp::Mov { src_level: Level::L0, src: 0, des_level: Level::L1(0), des: 0, len: 216 });
        let flow = Flow { stmts: vec![block, mov], ..Default::default() };
        let text = serialize_flow(&flow);
        assert_eq!(
            text,
            "parallel{cim.read_core(conv,p0,0,0,3072),cim.read_core(conv,p0,1,1440,19456)}\nmov(L0,0,L1.0,0,216)\n"
        );
        assert_eq!(parse_flow(&text).unwrap(), flow);
        assert_eq!(serialize_flow(&Flow::default()), "");
    }

    #[test]
    fn dcom_round_trip() {
        let text = "!stream\n# comment\ndcom(add[32],L1.3,1,2,3,10,4)  # trailing\ndcom(relu,L0,5,9,4)\nreprogram(1,300)\n";
        let f = parse_flow(text).unwrap();
        assert!(f.stream);
        assert_eq!(
            f.stmts[0],
            Stmt::Op(MetaOp::Dcom {
                func: DcomFunc::Add,
                imm: vec![32],
                level: Level::L1(3),
                srcs: vec![1, 2, 3],
                des: 10,
                len: 4
            })
        );
        assert_eq!(parse_flow(&serialize_flow(&f)).unwrap(), f);
    }

    #[test]
    fn syntax_errors_have_positions() {
        match parse_flow("mov(L0,0,L1.0,0,1)\nparallel{cim.read_xb(0,0,0,0)") {
            Err(Error::Syntax { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_flow("cim.read_xb(0,0,0)") {
            Err(Error::Syntax { line: 1, col: 1, msg }) => assert!(msg.contains("4 arguments")),
            other => panic!("{other:?}"),
        }
        match parse_flow("mov(L2,0,L1.0,0,1)") {
            Err(Error::Syntax { col: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_flow("frob(1)").is_err());
        assert!(parse_flow("mov(L0,0,L1.0,0,1) x").is_err());
    }
}
