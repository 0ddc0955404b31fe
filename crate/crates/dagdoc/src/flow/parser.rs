//! Line-oriented parser for the flow DSL.
//!
//! Every line is tokenized with quote-aware scanning (`#` starts a comment
//! outside strings, strings are double-quoted with `\"` and `\\` escapes)
//! and dispatched on its leading keyword. A step body extends until the
//! next `step`/`behavior` line or end of file.

use super::{
    is_ident, BehaviorCase, ExpectKind, FlowError, FlowSpec, InputSpec, ParamKind, ParamSpec,
    StepSpec, TaskKind,
};

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Ident(String),
    Word(String),
    Str(String),
    Comma,
    Equals,
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    col: usize,
}

impl Token {
    fn describe(&self) -> String {
        match &self.kind {
            TokenKind::Ident(s) => format!("`{s}`"),
            TokenKind::Word(s) => format!("`{s}`"),
            TokenKind::Str(_) => "string".to_string(),
            TokenKind::Comma => "`,`".to_string(),
            TokenKind::Equals => "`=`".to_string(),
        }
    }

    fn text(&self) -> &str {
        match &self.kind {
            TokenKind::Ident(s) | TokenKind::Word(s) | TokenKind::Str(s) => s,
            TokenKind::Comma => ",",
            TokenKind::Equals => "=",
        }
    }
}

/// Tokenizes one line. Columns are 1-based character positions.
fn tokenize_line(line: &str, line_no: usize) -> Result<Vec<Token>, FlowError> {
    let mut tokens = Vec::new();
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '#' {
            break;
        }
        let col = i + 1;
        match c {
            ',' => {
                tokens.push(Token {
                    kind: TokenKind::Comma,
                    col,
                });
                i += 1;
            }
            '=' => {
                tokens.push(Token {
                    kind: TokenKind::Equals,
                    col,
                });
                i += 1;
            }
            '"' => {
                let mut value = String::new();
                i += 1;
                let mut closed = false;
                while i < chars.len() {
                    match chars[i] {
                        '\\' if i + 1 < chars.len()
                            && (chars[i + 1] == '"' || chars[i + 1] == '\\') =>
                        {
                            value.push(chars[i + 1]);
                            i += 2;
                        }
                        '"' => {
                            i += 1;
                            closed = true;
                            break;
                        }
                        other => {
                            value.push(other);
                            i += 1;
                        }
                    }
                }
                if !closed {
                    return Err(FlowError::Syntax {
                        line: line_no,
                        col,
                        msg: "unterminated string".to_string(),
                    });
                }
                tokens.push(Token {
                    kind: TokenKind::Str(value),
                    col,
                });
            }
            _ => {
                let start = i;
                while i < chars.len() {
                    let c = chars[i];
                    if c.is_whitespace() || c == '#' || c == '"' || c == ',' || c == '=' {
                        break;
                    }
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let kind = if is_ident(&text) {
                    TokenKind::Ident(text)
                } else {
                    TokenKind::Word(text)
                };
                tokens.push(Token { kind, col });
            }
        }
    }
    Ok(tokens)
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> FlowError {
    FlowError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

/// Cursor over one line's tokens with expected-token error reporting.
struct Line<'t> {
    tokens: &'t [Token],
    pos: usize,
    line_no: usize,
    end_col: usize,
}

impl<'t> Line<'t> {
    fn new(tokens: &'t [Token], line_no: usize, line_text: &str) -> Self {
        Line {
            tokens,
            pos: 0,
            line_no,
            end_col: line_text.chars().count() + 1,
        }
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> (usize, usize) {
        match self.tokens.get(self.pos) {
            Some(t) => (self.line_no, t.col),
            None => (self.line_no, self.end_col),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, usize), FlowError> {
        let (line, col) = self.here();
        match self.next().map(|t| t.kind.clone()) {
            Some(TokenKind::Ident(s)) => Ok((s, col)),
            Some(_) => {
                let found = self.tokens[self.pos - 1].describe();
                Err(syntax(line, col, format!("expected {what}, found {found}")))
            }
            None => Err(syntax(line, col, format!("expected {what}"))),
        }
    }

    fn expect_string(&mut self, what: &str) -> Result<(String, usize), FlowError> {
        let (line, col) = self.here();
        match self.next().map(|t| t.kind.clone()) {
            Some(TokenKind::Str(s)) => Ok((s, col)),
            Some(_) => {
                let found = self.tokens[self.pos - 1].describe();
                Err(syntax(
                    line,
                    col,
                    format!("expected {what} (quoted string), found {found}"),
                ))
            }
            None => Err(syntax(
                line,
                col,
                format!("expected {what} (quoted string)"),
            )),
        }
    }

    fn expect_number(&mut self, what: &str) -> Result<(f64, usize), FlowError> {
        let (line, col) = self.here();
        let text = match self.next() {
            Some(t) => t.text().to_string(),
            None => return Err(syntax(line, col, format!("expected {what} (number)"))),
        };
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok((v, col)),
            _ => Err(syntax(
                line,
                col,
                format!("expected {what} (number), found `{text}`"),
            )),
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), FlowError> {
        let (line, col) = self.here();
        match self.next() {
            Some(t) if t.kind == TokenKind::Ident(kw.to_string()) => Ok(()),
            Some(t) => {
                let found = t.describe();
                Err(syntax(line, col, format!("expected `{kw}`, found {found}")))
            }
            None => Err(syntax(line, col, format!("expected `{kw}`"))),
        }
    }

    fn expect_end(&mut self) -> Result<(), FlowError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(syntax(
                self.line_no,
                t.col,
                format!("unexpected {} at end of line", t.describe()),
            )),
        }
    }

    /// Parses `IDENT ("," IDENT)*` to end of line.
    fn name_list(&mut self, what: &str) -> Result<Vec<(String, usize)>, FlowError> {
        let mut names = vec![self.expect_ident(what)?];
        while let Some(t) = self.peek() {
            if t.kind != TokenKind::Comma {
                break;
            }
            self.next();
            names.push(self.expect_ident(what)?);
        }
        self.expect_end()?;
        Ok(names)
    }
}

#[derive(Debug)]
struct StepBuilder {
    spec: StepSpec,
    line: usize,
    col: usize,
    after_positions: Vec<(String, usize, usize)>,
}

#[derive(Debug)]
struct BehaviorBuilder {
    name: String,
    line: usize,
    input: Option<String>,
    via: Option<String>,
    expect: Option<ExpectKind>,
}

enum Section {
    Header,
    Step,
    Behavior,
}

struct FlowBuilder {
    name: Option<String>,
    doc_lines: Vec<String>,
    params: Vec<ParamSpec>,
    inputs: Vec<InputSpec>,
    steps: Vec<StepBuilder>,
    behaviors: Vec<BehaviorBuilder>,
    section: Section,
    // (name, line, col) of every param/input declaration, shared namespace
    binding_names: Vec<String>,
}

/// Parses flow-file text into a [`FlowSpec`].
///
/// All structural invariants except acyclicity are enforced here;
/// acyclicity and root existence belong to [`super::validate_dag`].
pub fn parse_flow(source: &str) -> Result<FlowSpec, FlowError> {
    let mut b = FlowBuilder {
        name: None,
        doc_lines: Vec::new(),
        params: Vec::new(),
        inputs: Vec::new(),
        steps: Vec::new(),
        behaviors: Vec::new(),
        section: Section::Header,
        binding_names: Vec::new(),
    };

    for (idx, raw_line) in source.split('\n').enumerate() {
        let line_no = idx + 1;
        let line_text = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        let tokens = tokenize_line(line_text, line_no)?;
        if tokens.is_empty() {
            continue;
        }
        let mut line = Line::new(&tokens, line_no, line_text);
        let (kw, kw_col) = match line.next() {
            Some(t) => match &t.kind {
                TokenKind::Ident(s) => (s.clone(), t.col),
                _ => {
                    return Err(syntax(
                        line_no,
                        t.col,
                        format!("expected a directive keyword, found {}", t.describe()),
                    ))
                }
            },
            None => continue,
        };

        if b.name.is_none() && kw != "flow" {
            return Err(syntax(
                line_no,
                kw_col,
                "expected `flow` as first directive",
            ));
        }

        match kw.as_str() {
            "flow" => {
                if b.name.is_some() {
                    return Err(syntax(line_no, kw_col, "duplicate `flow` directive"));
                }
                let (name, _) = line.expect_ident("flow name")?;
                line.expect_end()?;
                b.name = Some(name);
            }
            "doc" => {
                let (text, _) = line.expect_string("doc text")?;
                line.expect_end()?;
                match b.section {
                    Section::Header => b.doc_lines.push(text),
                    Section::Step => {
                        let step = b.steps.last_mut().expect("in step section");
                        if step.spec.doc.is_empty() {
                            step.spec.doc = text;
                        } else {
                            step.spec.doc.push('\n');
                            step.spec.doc.push_str(&text);
                        }
                    }
                    Section::Behavior => {
                        return Err(syntax(
                            line_no,
                            kw_col,
                            "`doc` not allowed in a behavior block",
                        ))
                    }
                }
            }
            "param" => {
                if !matches!(b.section, Section::Header) {
                    return Err(syntax(
                        line_no,
                        kw_col,
                        "`param` must appear before the first step",
                    ));
                }
                let (name, name_col) = line.expect_ident("param name")?;
                let (kind_text, kind_col) =
                    line.expect_ident("param kind (int|float|text|flag)")?;
                let kind = match kind_text.as_str() {
                    "int" => ParamKind::Int,
                    "float" => ParamKind::Float,
                    "text" => ParamKind::Text,
                    "flag" => ParamKind::Flag,
                    other => {
                        return Err(syntax(
                            line_no,
                            kind_col,
                            format!("expected param kind (int|float|text|flag), found `{other}`"),
                        ))
                    }
                };
                let default = if line.peek().is_some() {
                    line.expect_keyword("default")?;
                    let (lit_line, lit_col) = line.here();
                    let literal = match line.next().map(|t| (t.kind.clone(), t.text().to_string()))
                    {
                        Some((TokenKind::Str(s), _)) => s,
                        Some((_, text)) => text,
                        None => return Err(syntax(lit_line, lit_col, "expected default literal")),
                    };
                    line.expect_end()?;
                    if let Err(msg) = kind.check_literal(&literal) {
                        return Err(FlowError::BadLiteral {
                            line: lit_line,
                            col: lit_col,
                            msg: format!("default for {} param `{name}`: {msg}", kind.as_str()),
                        });
                    }
                    Some(literal)
                } else {
                    None
                };
                check_binding_name(&mut b, &name, line_no, name_col)?;
                b.params.push(ParamSpec {
                    name,
                    kind,
                    default,
                });
            }
            "input" => match b.section {
                Section::Header => {
                    let (name, name_col) = line.expect_ident("input name")?;
                    line.expect_keyword("file")?;
                    let (path, path_col) = line.expect_string("input path")?;
                    line.expect_end()?;
                    if path.is_empty() {
                        return Err(FlowError::BadLiteral {
                            line: line_no,
                            col: path_col,
                            msg: format!("input `{name}` has an empty path"),
                        });
                    }
                    check_binding_name(&mut b, &name, line_no, name_col)?;
                    b.inputs.push(InputSpec { name, path });
                }
                Section::Behavior => {
                    let (text, _) = line.expect_string("behavior input text")?;
                    line.expect_end()?;
                    let case = b.behaviors.last_mut().expect("in behavior section");
                    if case.input.is_some() {
                        return Err(syntax(
                            line_no,
                            kw_col,
                            "duplicate `input` in behavior block",
                        ));
                    }
                    case.input = Some(text);
                }
                Section::Step => {
                    return Err(syntax(
                        line_no,
                        kw_col,
                        "`input` declarations must appear before the first step",
                    ))
                }
            },
            "step" => {
                let (name, name_col) = line.expect_ident("step name")?;
                let mut after_positions = Vec::new();
                if line.peek().is_some() {
                    line.expect_keyword("after")?;
                    for (pred, col) in line.name_list("predecessor step name")? {
                        if !after_positions.iter().any(|(n, _, _)| *n == pred) {
                            after_positions.push((pred, line_no, col));
                        }
                    }
                }
                if b.steps.iter().any(|s| s.spec.name == name) {
                    return Err(FlowError::DuplicateName {
                        line: line_no,
                        col: name_col,
                        name,
                    });
                }
                let after = after_positions.iter().map(|(n, _, _)| n.clone()).collect();
                b.steps.push(StepBuilder {
                    spec: StepSpec {
                        name,
                        doc: String::new(),
                        after,
                        resources: Vec::new(),
                        task: TaskKind::Exec {
                            command: String::new(),
                        },
                        outputs: Vec::new(),
                    },
                    line: line_no,
                    col: name_col,
                    after_positions,
                });
                // Exec with an empty command is the "no task yet" sentinel,
                // replaced by the first exec/builtin body line.
                b.section = Section::Step;
            }
            "resources" => {
                let step = current_step(&mut b, line_no, kw_col, "resources")?;
                for (tag, _) in line.name_list("resource tag")? {
                    if !step.spec.resources.contains(&tag) {
                        step.spec.resources.push(tag);
                    }
                }
            }
            "exec" => {
                let (command, _) = line.expect_string("command")?;
                line.expect_end()?;
                let step = current_step(&mut b, line_no, kw_col, "exec")?;
                set_task(step, TaskKind::Exec { command }, line_no, kw_col)?;
            }
            "builtin" => {
                let (name, _) = line.expect_ident("builtin name")?;
                let mut settings: Vec<(String, String)> = Vec::new();
                while line.peek().is_some() {
                    let (key, key_col) = line.expect_ident("setting name")?;
                    let (eq_line, eq_col) = line.here();
                    match line.next() {
                        Some(t) if t.kind == TokenKind::Equals => {}
                        _ => {
                            return Err(syntax(
                                eq_line,
                                eq_col,
                                format!("expected `=` after setting `{key}`"),
                            ))
                        }
                    }
                    let (val_line, val_col) = line.here();
                    let value = match line.next().map(|t| (t.kind.clone(), t.text().to_string())) {
                        Some((TokenKind::Str(s), _)) => s,
                        Some((TokenKind::Comma, _)) | Some((TokenKind::Equals, _)) | None => {
                            return Err(syntax(
                                val_line,
                                val_col,
                                format!("expected value for setting `{key}`"),
                            ))
                        }
                        Some((_, text)) => text,
                    };
                    if settings.iter().any(|(k, _)| *k == key) {
                        return Err(FlowError::DuplicateName {
                            line: line_no,
                            col: key_col,
                            name: key,
                        });
                    }
                    settings.push((key, value));
                }
                let step = current_step(&mut b, line_no, kw_col, "builtin")?;
                set_task(step, TaskKind::Builtin { name, settings }, line_no, kw_col)?;
            }
            "out" => {
                let (name, name_col) = line.expect_ident("output artifact name")?;
                let (path, path_col) = line.expect_string("output path")?;
                line.expect_end()?;
                check_output_path(&path, line_no, path_col)?;
                let step = current_step(&mut b, line_no, kw_col, "out")?;
                if step.spec.outputs.iter().any(|(n, _)| *n == name) {
                    return Err(FlowError::DuplicateName {
                        line: line_no,
                        col: name_col,
                        name,
                    });
                }
                step.spec.outputs.push((name, path));
            }
            "behavior" => {
                finalize_behavior(&b)?;
                let (name, _) = line.expect_string("behavior case name")?;
                line.expect_end()?;
                b.behaviors.push(BehaviorBuilder {
                    name,
                    line: line_no,
                    input: None,
                    via: None,
                    expect: None,
                });
                b.section = Section::Behavior;
            }
            "via" => {
                if !matches!(b.section, Section::Behavior) {
                    return Err(syntax(
                        line_no,
                        kw_col,
                        "`via` is only valid inside a behavior block",
                    ));
                }
                let (cmd, _) = line.expect_string("via command")?;
                line.expect_end()?;
                let case = b.behaviors.last_mut().expect("in behavior section");
                if case.via.is_some() {
                    return Err(syntax(line_no, kw_col, "duplicate `via` in behavior block"));
                }
                case.via = Some(cmd);
            }
            "expect" => {
                if !matches!(b.section, Section::Behavior) {
                    return Err(syntax(
                        line_no,
                        kw_col,
                        "`expect` is only valid inside a behavior block",
                    ));
                }
                let (kind, kind_col) = line.expect_ident("expectation kind")?;
                let expect = match kind.as_str() {
                    "equals" => ExpectKind::Equals(line.expect_string("expected text")?.0),
                    "contains" => ExpectKind::Contains(line.expect_string("expected substring")?.0),
                    "regex" => {
                        let (pattern, pat_col) = line.expect_string("pattern")?;
                        if let Err(e) = regex::Regex::new(&pattern) {
                            return Err(FlowError::BadLiteral {
                                line: line_no,
                                col: pat_col,
                                msg: format!("invalid regex: {e}"),
                            });
                        }
                        ExpectKind::Regex(pattern)
                    }
                    "approx" => {
                        let (target, _) = line.expect_number("target")?;
                        line.expect_keyword("tol")?;
                        let (tol, tol_col) = line.expect_number("tolerance")?;
                        if tol <= 0.0 {
                            return Err(FlowError::BadLiteral {
                                line: line_no,
                                col: tol_col,
                                msg: format!("tolerance must be > 0, got {tol}"),
                            });
                        }
                        ExpectKind::Approx { target, tol }
                    }
                    other => {
                        return Err(syntax(
                            line_no,
                            kind_col,
                            format!(
                                "expected one of equals|contains|regex|approx, found `{other}`"
                            ),
                        ))
                    }
                };
                line.expect_end()?;
                let case = b.behaviors.last_mut().expect("in behavior section");
                if case.expect.is_some() {
                    return Err(syntax(
                        line_no,
                        kw_col,
                        "duplicate `expect` in behavior block",
                    ));
                }
                case.expect = Some(expect);
            }
            other => {
                return Err(syntax(
                    line_no,
                    kw_col,
                    format!(
                        "unknown directive `{other}` (expected one of: flow, doc, param, input, \
                         step, resources, exec, builtin, out, behavior, via, expect)"
                    ),
                ))
            }
        }
    }

    let name = b
        .name
        .clone()
        .ok_or_else(|| syntax(1, 1, "expected `flow` as first directive"))?;
    finalize_behavior(&b)?;

    // Steps must each carry exactly one task; the empty-exec sentinel means
    // no task line was seen.
    for step in &b.steps {
        if matches!(&step.spec.task, TaskKind::Exec { command } if command.is_empty()) {
            return Err(syntax(
                step.line,
                step.col,
                format!(
                    "step `{}` defines no task (expected `exec` or `builtin`)",
                    step.spec.name
                ),
            ));
        }
    }

    // `after` may reference steps declared later in the file, so resolve
    // references once the whole file is read.
    for step in &b.steps {
        for (pred, line, col) in &step.after_positions {
            if !b.steps.iter().any(|s| s.spec.name == *pred) {
                return Err(FlowError::UnknownReference {
                    line: *line,
                    col: *col,
                    name: pred.clone(),
                });
            }
        }
    }

    Ok(FlowSpec {
        name,
        doc: b.doc_lines.join("\n"),
        params: b.params,
        inputs: b.inputs,
        steps: b.steps.into_iter().map(|s| s.spec).collect(),
        behaviors: b
            .behaviors
            .into_iter()
            .map(|c| BehaviorCase {
                name: c.name,
                input: c.input.unwrap_or_default(),
                via: c.via.expect("validated"),
                expect: c.expect.expect("validated"),
            })
            .collect(),
        source_text: source.to_string(),
    })
}

fn check_binding_name(
    b: &mut FlowBuilder,
    name: &str,
    line: usize,
    col: usize,
) -> Result<(), FlowError> {
    // Params and inputs share one namespace so template placeholders
    // stay unambiguous.
    if b.binding_names.iter().any(|n| n == name) {
        return Err(FlowError::DuplicateName {
            line,
            col,
            name: name.to_string(),
        });
    }
    b.binding_names.push(name.to_string());
    Ok(())
}

fn current_step<'b>(
    b: &'b mut FlowBuilder,
    line: usize,
    col: usize,
    directive: &str,
) -> Result<&'b mut StepBuilder, FlowError> {
    match b.section {
        Section::Step => Ok(b.steps.last_mut().expect("in step section")),
        _ => Err(syntax(
            line,
            col,
            format!("`{directive}` is only valid inside a step body"),
        )),
    }
}

fn set_task(
    step: &mut StepBuilder,
    task: TaskKind,
    line: usize,
    col: usize,
) -> Result<(), FlowError> {
    if !matches!(&step.spec.task, TaskKind::Exec { command } if command.is_empty()) {
        return Err(syntax(
            line,
            col,
            format!("step `{}` already has a task", step.spec.name),
        ));
    }
    if matches!(&task, TaskKind::Exec { command } if command.is_empty()) {
        return Err(syntax(line, col, "exec command must not be empty"));
    }
    step.spec.task = task;
    Ok(())
}

fn check_output_path(path: &str, line: usize, col: usize) -> Result<(), FlowError> {
    if path.is_empty() {
        return Err(syntax(line, col, "output path must not be empty"));
    }
    if path.starts_with('/') {
        return Err(syntax(line, col, "output path must be relative"));
    }
    if path.split('/').any(|part| part == "..") {
        return Err(syntax(line, col, "output path must not contain `..`"));
    }
    Ok(())
}

fn finalize_behavior(b: &FlowBuilder) -> Result<(), FlowError> {
    if let Some(case) = b.behaviors.last() {
        if case.via.is_none() {
            return Err(syntax(
                case.line,
                1,
                format!("behavior \"{}\" is missing `via`", case.name),
            ));
        }
        if case.expect.is_none() {
            return Err(syntax(
                case.line,
                1,
                format!("behavior \"{}\" is missing `expect`", case.name),
            ));
        }
    }
    Ok(())
}
