//! The canonical edit-command language.
//!
//! ```text
//! adjust(cooler, color=sea-foam-green);
//! add(flag, shape=triangle, color=red, size=small, material=matte, at=(0.7,0.1,0.1,0.1))
//! ```
//!
//! The normative grammar is `docs/dsl.ebnf`. Attribute values go through
//! [`canonicalize`](crate::scene::canonicalize), so `color=Bright Blue` and
//! `color=bright-blue` parse to the same command.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::scene::{
    canonicalize, AttrValue, Attribute, BBox, Canonical, Color, EditCommand, Material, NewObject, ObjectId, Ratio,
    Replacement, Shape, Size,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    #[error("{line}:{column}: syntax error, expected {}", .expected.join(" | "))]
    Syntax {
        line: usize,
        column: usize,
        expected: Vec<String>,
    },
    #[error("{line}:{column}: {message}")]
    Semantic {
        line: usize,
        column: usize,
        message: String,
    },
}

impl DslError {
    pub fn position(&self) -> (usize, usize) {
        match self {
            DslError::Syntax { line, column, .. } | DslError::Semantic { line, column, .. } => (*line, *column),
        }
    }

    pub fn is_syntax(&self) -> bool {
        matches!(self, DslError::Syntax { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Number(String),
    LParen,
    RParen,
    Comma,
    Eq,
    Semi,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("`{w}`"),
            Tok::Number(n) => format!("`{n}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Semi => "`;`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Spanned>, DslError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, col);
        let start = i;
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            '=' => Some(Tok::Eq),
            ';' => Some(Tok::Semi),
            _ => None,
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if let Some(tok) = single {
            out.push(Spanned { tok, line, col });
            i += 1;
            col += 1;
            continue;
        }
        let starts_number =
            c.is_ascii_digit() || (matches!(c, '-' | '.') && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()));
        if starts_number {
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_digit() || matches!(chars[i], '.' | '/')) {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            out.push(Spanned {
                tok: Tok::Number(text),
                line: l0,
                col: c0,
            });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            i += 1;
            while i < chars.len() && (chars[i].is_alphanumeric() || matches!(chars[i], '_' | '-')) {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            out.push(Spanned {
                tok: Tok::Word(text),
                line: l0,
                col: c0,
            });
            continue;
        }
        return Err(DslError::Syntax {
            line,
            column: col,
            expected: vec!["statement or punctuation".into()],
        });
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

const KEYWORDS: [&str; 5] = ["add", "remove", "replace", "adjust", "undo"];

#[derive(Debug)]
enum Value {
    Words(String),
    Number(String),
    Tuple(Vec<(String, usize, usize)>),
}

struct KwArg {
    key: String,
    value: Value,
    line: usize,
    col: usize,
    value_line: usize,
    value_col: usize,
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T, DslError> {
        let t = self.peek();
        Err(DslError::Syntax {
            line: t.line,
            column: t.col,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn expect(&mut self, tok: Tok) -> Result<Spanned, DslError> {
        if self.peek().tok == tok {
            Ok(self.bump())
        } else {
            self.fail(&[&tok.describe()])
        }
    }

    fn ident(&mut self) -> Result<Spanned, DslError> {
        match self.peek().tok {
            Tok::Word(_) => Ok(self.bump()),
            _ => self.fail(&["identifier"]),
        }
    }

    fn program(&mut self) -> Result<Vec<EditCommand>, DslError> {
        let mut cmds = vec![self.statement()?];
        loop {
            match self.peek().tok {
                Tok::Semi => {
                    self.bump();
                    if self.peek().tok == Tok::Eof {
                        break;
                    }
                    cmds.push(self.statement()?);
                }
                Tok::Eof => break,
                _ => return self.fail(&["`;`", "end of input"]),
            }
        }
        Ok(cmds)
    }

    fn statement(&mut self) -> Result<EditCommand, DslError> {
        let kw = match &self.peek().tok {
            Tok::Word(w) if KEYWORDS.contains(&w.as_str()) => w.clone(),
            _ => return self.fail(&KEYWORDS),
        };
        let head = self.bump();
        self.expect(Tok::LParen)?;
        if kw == "undo" {
            self.expect(Tok::RParen)?;
            return Ok(EditCommand::Undo);
        }
        let subject = self.ident()?;
        let Tok::Word(subject_name) = subject.tok.clone() else {
            unreachable!()
        };
        let mut args = Vec::new();
        if kw == "remove" {
            self.expect(Tok::RParen)?;
        } else {
            loop {
                match self.peek().tok {
                    Tok::Comma => {
                        self.bump();
                        args.push(self.kwarg()?);
                    }
                    Tok::RParen => {
                        self.bump();
                        break;
                    }
                    _ => return self.fail(&["`,`", "`)`"]),
                }
            }
        }
        build(&kw, &head, subject_name, args)
    }

    fn kwarg(&mut self) -> Result<KwArg, DslError> {
        let k = self.ident()?;
        let Tok::Word(key) = k.tok else { unreachable!() };
        self.expect(Tok::Eq)?;
        let v = self.peek().clone();
        let value = match &v.tok {
            Tok::Word(_) => {
                let mut words = Vec::new();
                while let Tok::Word(w) = &self.peek().tok {
                    words.push(w.clone());
                    self.bump();
                }
                Value::Words(words.join(" "))
            }
            Tok::Number(n) => {
                let n = n.clone();
                self.bump();
                Value::Number(n)
            }
            Tok::LParen => {
                self.bump();
                let mut parts = Vec::new();
                loop {
                    let t = self.peek().clone();
                    match t.tok {
                        Tok::Number(n) => {
                            self.bump();
                            parts.push((n, t.line, t.col));
                        }
                        _ => return self.fail(&["number"]),
                    }
                    match self.peek().tok {
                        Tok::Comma => {
                            self.bump();
                        }
                        Tok::RParen => {
                            self.bump();
                            break;
                        }
                        _ => return self.fail(&["`,`", "`)`"]),
                    }
                }
                Value::Tuple(parts)
            }
            _ => return self.fail(&["value"]),
        };
        Ok(KwArg {
            key,
            value,
            line: k.line,
            col: k.col,
            value_line: v.line,
            value_col: v.col,
        })
    }
}

fn semantic<T>(line: usize, column: usize, message: impl Into<String>) -> Result<T, DslError> {
    Err(DslError::Semantic {
        line,
        column,
        message: message.into(),
    })
}

fn attr_value(arg: &KwArg, attribute: Attribute) -> Result<AttrValue, DslError> {
    let raw = match &arg.value {
        Value::Words(w) => w.as_str(),
        _ => {
            return semantic(
                arg.value_line,
                arg.value_col,
                format!("`{}` takes a word value", arg.key),
            )
        }
    };
    match canonicalize(attribute, raw) {
        Canonical::Value(v) => Ok(v),
        Canonical::NotCanonical => semantic(
            arg.value_line,
            arg.value_col,
            format!("`{raw}` is not a valid {attribute}"),
        ),
    }
}

fn bbox_value(arg: &KwArg) -> Result<BBox, DslError> {
    let Value::Tuple(parts) = &arg.value else {
        return semantic(arg.value_line, arg.value_col, "`at` takes (x, y, w, h)");
    };
    if parts.len() != 4 {
        return semantic(
            arg.value_line,
            arg.value_col,
            format!("`at` takes 4 numbers, got {}", parts.len()),
        );
    }
    let mut r = [Ratio::ZERO; 4];
    for (slot, (text, line, col)) in r.iter_mut().zip(parts) {
        *slot = text
            .parse::<Ratio>()
            .or_else(|e| semantic(*line, *col, e.to_string()))?;
    }
    BBox::new(r[0], r[1], r[2], r[3]).or_else(|e| semantic(arg.value_line, arg.value_col, e.to_string()))
}

#[derive(Default)]
struct Fields {
    name: Option<String>,
    color: Option<Color>,
    size: Option<Size>,
    material: Option<Material>,
    shape: Option<Shape>,
    at: Option<BBox>,
    id: Option<String>,
    z: Option<i32>,
}

fn collect_fields(kw: &str, args: &[KwArg], allowed: &[&str]) -> Result<Fields, DslError> {
    let mut f = Fields::default();
    let mut seen: Vec<&str> = Vec::new();
    for arg in args {
        if !allowed.contains(&arg.key.as_str()) {
            return semantic(arg.line, arg.col, format!("unknown parameter `{}` for {kw}", arg.key));
        }
        if seen.contains(&arg.key.as_str()) {
            return semantic(arg.line, arg.col, format!("duplicate parameter `{}`", arg.key));
        }
        seen.push(&arg.key);
        match arg.key.as_str() {
            "name" | "id" => {
                let Value::Words(w) = &arg.value else {
                    return semantic(arg.value_line, arg.value_col, "expected an identifier");
                };
                if w.contains(' ') {
                    return semantic(arg.value_line, arg.value_col, "identifiers are one word");
                }
                if arg.key == "name" {
                    f.name = Some(w.clone());
                } else {
                    f.id = Some(w.clone());
                }
            }
            "z" => {
                let Value::Number(n) = &arg.value else {
                    return semantic(arg.value_line, arg.value_col, "`z` takes an integer");
                };
                f.z = Some(
                    n.parse()
                        .or_else(|_| semantic(arg.value_line, arg.value_col, "`z` takes an integer"))?,
                );
            }
            "at" => f.at = Some(bbox_value(arg)?),
            key => {
                let attribute: Attribute = key.parse().expect("allowed keys are attributes");
                match attr_value(arg, attribute)? {
                    AttrValue::Color(v) => f.color = Some(v),
                    AttrValue::Size(v) => f.size = Some(v),
                    AttrValue::Material(v) => f.material = Some(v),
                    AttrValue::Shape(v) => f.shape = Some(v),
                }
            }
        }
    }
    Ok(f)
}

fn require<T>(v: Option<T>, key: &str, head: &Spanned) -> Result<T, DslError> {
    v.map_or_else(
        || semantic(head.line, head.col, format!("missing parameter `{key}`")),
        Ok,
    )
}

fn build(kw: &str, head: &Spanned, subject: String, args: Vec<KwArg>) -> Result<EditCommand, DslError> {
    match kw {
        "remove" => Ok(EditCommand::remove(subject)),
        "adjust" => {
            let [arg] = args.as_slice() else {
                return semantic(head.line, head.col, "adjust takes exactly one attr=value");
            };
            let Ok(attribute) = arg.key.parse::<Attribute>() else {
                return semantic(arg.line, arg.col, format!("unknown attribute `{}`", arg.key));
            };
            Ok(EditCommand::adjust(subject, attr_value(arg, attribute)?))
        }
        "add" => {
            let f = collect_fields(kw, &args, &["shape", "color", "size", "material", "at", "id", "z"])?;
            Ok(EditCommand::Add {
                object: NewObject {
                    id: ObjectId(f.id.unwrap_or_else(|| subject.clone())),
                    name: subject,
                    color: require(f.color, "color", head)?,
                    size: require(f.size, "size", head)?,
                    material: require(f.material, "material", head)?,
                    shape: require(f.shape, "shape", head)?,
                    bbox: require(f.at, "at", head)?,
                    z_order: f.z,
                },
            })
        }
        "replace" => {
            let f = collect_fields(kw, &args, &["name", "shape", "color", "size", "material", "at"])?;
            Ok(EditCommand::Replace {
                target: ObjectId(subject),
                with: Replacement {
                    name: require(f.name, "name", head)?,
                    color: require(f.color, "color", head)?,
                    size: require(f.size, "size", head)?,
                    material: require(f.material, "material", head)?,
                    shape: require(f.shape, "shape", head)?,
                    bbox: f.at,
                },
            })
        }
        _ => unreachable!("keyword checked by the parser"),
    }
}

/// Parses a program into commands, in source order.
pub fn parse_canonical(src: &str) -> Result<Vec<EditCommand>, DslError> {
    let toks = lex(src)?;
    Parser { toks, pos: 0 }.program()
}

fn write_at(out: &mut String, b: &BBox) {
    let _ = write!(
        out,
        "at=({},{},{},{})",
        b.x.to_literal(),
        b.y.to_literal(),
        b.w.to_literal(),
        b.h.to_literal()
    );
}

/// Prints one command so that [`parse_canonical`] reads it back unchanged.
pub fn print_command(cmd: &EditCommand) -> String {
    let mut s = String::new();
    match cmd {
        EditCommand::Add { object: o } => {
            let _ = write!(
                s,
                "add({}, shape={}, color={}, size={}, material={}, ",
                o.name, o.shape, o.color, o.size, o.material
            );
            write_at(&mut s, &o.bbox);
            if o.id.as_str() != o.name {
                let _ = write!(s, ", id={}", o.id);
            }
            if let Some(z) = o.z_order {
                let _ = write!(s, ", z={z}");
            }
            s.push(')');
        }
        EditCommand::Remove { target } => {
            let _ = write!(s, "remove({target})");
        }
        EditCommand::Replace { target, with } => {
            let _ = write!(
                s,
                "replace({target}, name={}, shape={}, color={}, size={}, material={}",
                with.name, with.shape, with.color, with.size, with.material
            );
            if let Some(b) = &with.bbox {
                s.push_str(", ");
                write_at(&mut s, b);
            }
            s.push(')');
        }
        EditCommand::Adjust { target, value } => {
            let _ = write!(s, "adjust({target}, {}={})", value.attribute(), value);
        }
        EditCommand::Undo => s.push_str("undo()"),
    }
    s
}

pub fn print_program(cmds: &[EditCommand]) -> String {
    cmds.iter().map(print_command).collect::<Vec<_>>().join("; ")
}

/// Display adapter for a command list in DSL form.
pub struct Program<'a>(pub &'a [EditCommand]);

impl fmt::Display for Program<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_program(self.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::testutil::bbox;

    #[test]
    fn single_adjust() {
        assert_eq!(
            parse_canonical("adjust(cooler, color=sea-foam-green)").unwrap(),
            vec![EditCommand::adjust("cooler", AttrValue::Color(Color::SeaFoamGreen))]
        );
    }

    #[test]
    fn empty_program_is_a_syntax_error() {
        let e = parse_canonical("").unwrap_err();
        assert_eq!(e.position(), (1, 1));
        assert!(e.is_syntax());
        assert!(parse_canonical("  \n ").unwrap_err().is_syntax());
    }

    #[test]
    fn mixed_intent_program() {
        let cmds = parse_canonical(
            "adjust(cooler, color=sea-foam-green); add(flag, shape=triangle, color=red, size=small, material=matte, at=(0.7,0.1,0.1,0.1))",
        )
        .unwrap();
        assert_eq!(cmds.len(), 2);
        assert_eq!(cmds[0].kind(), crate::scene::CommandKind::Adjust);
        let EditCommand::Add { object } = &cmds[1] else {
            panic!("second command is an add")
        };
        assert_eq!(object.id.as_str(), "flag");
        assert_eq!(object.bbox, bbox("7/10", "1/10", "1/10", "1/10"));
        assert_eq!(object.z_order, None);
    }

    #[test]
    fn synonyms_and_spacing() {
        let cmds = parse_canonical("  adjust ( cooler ,color = Sea Foam Green ) ;\n undo( ) ;").unwrap();
        assert_eq!(
            cmds,
            vec![
                EditCommand::adjust("cooler", AttrValue::Color(Color::SeaFoamGreen)),
                EditCommand::Undo
            ]
        );
    }

    #[test]
    fn error_positions() {
        let e = parse_canonical("adjust(cooler color=red)").unwrap_err();
        assert_eq!(e.position(), (1, 15));
        let e = parse_canonical("adjust(cooler, colour=red)").unwrap_err();
        assert!(!e.is_syntax());
        assert_eq!(e.position(), (1, 16));
        let e = parse_canonical("adjust(cooler, size=huge)").unwrap_err();
        assert_eq!(e.position(), (1, 21));
        let e = parse_canonical("remove(a)\nremove(b)").unwrap_err();
        assert_eq!(e.position(), (2, 1));
    }

    #[test]
    fn printer_round_trip() {
        let src = "add(flag, shape=triangle, color=red, size=small, material=matte, at=(0.6,0.1,1/3,0.1), id=flag_2, z=-3); remove(lamp); replace(cup, name=pot, shape=circle, color=navy, size=large, material=glossy); undo()";
        let cmds = parse_canonical(src).unwrap();
        let printed = print_program(&cmds);
        assert_eq!(parse_canonical(&printed).unwrap(), cmds);
        assert_eq!(print_program(&parse_canonical(&printed).unwrap()), printed);
    }
}
