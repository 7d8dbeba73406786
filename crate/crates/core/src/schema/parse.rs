use std::fmt;

use super::{EventSchema, SchemaError, Section};

/// Location in the source text. `offset` counts Unicode scalar values;
/// `line` and `column` are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub offset: usize,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at {position}: expected {expected}, found {found}")]
    Syntax {
        position: Position,
        expected: String,
        found: String,
    },
    #[error("unknown section :{label} at {position}")]
    UnknownSection { label: String, position: Position },
    #[error("section :{label} given twice (second at {position})")]
    DuplicateSection { label: String, position: Position },
    #[error("schema header is missing or empty")]
    EmptyHeader,
    #[error(transparent)]
    Invalid(SchemaError),
}

impl ParseError {
    pub fn position(&self) -> Option<Position> {
        match self {
            ParseError::Syntax { position, .. }
            | ParseError::UnknownSection { position, .. }
            | ParseError::DuplicateSection { position, .. } => Some(*position),
            ParseError::EmptyHeader | ParseError::Invalid(_) => None,
        }
    }
}

impl From<SchemaError> for ParseError {
    fn from(err: SchemaError) -> Self {
        match err {
            SchemaError::EmptyHeader => ParseError::EmptyHeader,
            other => ParseError::Invalid(other),
        }
    }
}

/// Parse one schema in the canonical S-expression form:
///
/// ```text
/// (schema :header "..." :preconditions ("..." ...) :static-conditions (...)
///         :postconditions (...) :goals (...) :episodes (...))
/// ```
///
/// Sections may appear in any order; absent sections are empty. Anything
/// other than whitespace after the closing parenthesis is an error.
pub fn parse_schema(text: &str) -> Result<EventSchema, ParseError> {
    let mut cursor = Cursor::new(text);
    cursor.skip_ws();
    cursor.expect_char('(', "'('")?;
    cursor.skip_ws();
    let head_pos = cursor.position();
    let head = cursor.symbol();
    if head != "schema" {
        return Err(cursor.error_at(head_pos, "symbol 'schema'", &head));
    }

    let mut header: Option<String> = None;
    let mut builder_sections: Vec<(Section, Vec<String>)> = Vec::new();
    loop {
        cursor.skip_ws();
        match cursor.peek() {
            Some(')') => {
                cursor.bump();
                break;
            }
            Some(':') => {
                let pos = cursor.position();
                cursor.bump();
                let label = cursor.symbol();
                let section = Section::from_keyword(&label)
                    .ok_or_else(|| ParseError::UnknownSection { label: label.clone(), position: pos })?;
                let seen = match section {
                    Section::Header => header.is_some(),
                    s => builder_sections.iter().any(|(have, _)| *have == s),
                };
                if seen {
                    return Err(ParseError::DuplicateSection { label, position: pos });
                }
                cursor.skip_ws();
                if section == Section::Header {
                    header = Some(cursor.string()?);
                } else {
                    builder_sections.push((section, cursor.string_list()?));
                }
            }
            _ => return Err(cursor.unexpected("section keyword or ')'")),
        }
    }
    cursor.skip_ws();
    if cursor.peek().is_some() {
        return Err(cursor.unexpected("end of input"));
    }

    let header = header.ok_or(ParseError::EmptyHeader)?;
    let mut builder = EventSchema::builder(header);
    for (section, facts) in builder_sections {
        builder = builder.facts(section, facts);
    }
    Ok(builder.build()?)
}

struct Cursor {
    chars: Vec<char>,
    idx: usize,
    line: usize,
    column: usize,
}

impl Cursor {
    fn new(text: &str) -> Self {
        Cursor {
            chars: text.chars().collect(),
            idx: 0,
            line: 1,
            column: 1,
        }
    }

    fn position(&self) -> Position {
        Position {
            offset: self.idx,
            line: self.line,
            column: self.column,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.idx).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.idx += 1;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn error_at(&self, position: Position, expected: &str, found: &str) -> ParseError {
        ParseError::Syntax {
            position,
            expected: expected.to_owned(),
            found: found.to_owned(),
        }
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        let found = match self.peek() {
            Some(c) => format!("{c:?}"),
            None => "end of input".to_owned(),
        };
        self.error_at(self.position(), expected, &found)
    }

    fn expect_char(&mut self, want: char, expected: &str) -> Result<(), ParseError> {
        if self.peek() == Some(want) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(expected))
        }
    }

    /// Bare symbol: everything up to whitespace, a parenthesis or a quote.
    fn symbol(&mut self) -> String {
        let mut out = String::new();
        while let Some(c) = self.peek() {
            if c.is_whitespace() || matches!(c, '(' | ')' | '"') {
                break;
            }
            out.push(c);
            self.bump();
        }
        out
    }

    fn string(&mut self) -> Result<String, ParseError> {
        self.expect_char('"', "string")?;
        let mut out = String::new();
        loop {
            let pos = self.position();
            match self.bump() {
                None => return Err(self.error_at(pos, "closing '\"'", "end of input")),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some(c @ ('"' | '\\')) => out.push(c),
                    Some(c) => return Err(self.error_at(pos, "escape \\\" or \\\\", &format!("\\{c}"))),
                    None => return Err(self.error_at(pos, "escape \\\" or \\\\", "end of input")),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn string_list(&mut self) -> Result<Vec<String>, ParseError> {
        self.expect_char('(', "'(' starting a fact list")?;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(')') => {
                    self.bump();
                    return Ok(items);
                }
                Some('"') => items.push(self.string()?),
                _ => return Err(self.unexpected("string or ')'")),
            }
        }
    }
}
