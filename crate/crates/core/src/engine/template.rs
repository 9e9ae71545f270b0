//! `{name}` placeholders with `{{` / `}}` escapes.

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateSyntaxError {
    #[error("unclosed `{{` at char {0}")]
    Unclosed(usize),
    #[error("unmatched `}}` at char {0}; write `}}}}` for a literal brace")]
    StrayClose(usize),
    #[error("invalid placeholder `{{{0}}}`; names are letters, digits and `_`")]
    BadName(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

pub fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || c == '_')
}

impl Template {
    pub fn parse(src: &str) -> Result<Self, TemplateSyntaxError> {
        let chars: Vec<char> = src.chars().collect();
        let mut segments = Vec::new();
        let mut lit = String::new();
        let mut i = 0;
        while i < chars.len() {
            match chars[i] {
                '{' if chars.get(i + 1) == Some(&'{') => {
                    lit.push('{');
                    i += 2;
                }
                '}' if chars.get(i + 1) == Some(&'}') => {
                    lit.push('}');
                    i += 2;
                }
                '{' => {
                    let close = chars[i + 1..]
                        .iter()
                        .position(|&c| c == '}')
                        .ok_or(TemplateSyntaxError::Unclosed(i))?;
                    let name: String = chars[i + 1..i + 1 + close].iter().collect();
                    if !is_identifier(&name) {
                        return Err(TemplateSyntaxError::BadName(name));
                    }
                    if !lit.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut lit)));
                    }
                    segments.push(Segment::Placeholder(name));
                    i += close + 2;
                }
                '}' => return Err(TemplateSyntaxError::StrayClose(i)),
                c => {
                    lit.push(c);
                    i += 1;
                }
            }
        }
        if !lit.is_empty() {
            segments.push(Segment::Literal(lit));
        }
        Ok(Self { segments })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder(p) => Some(p.as_str()),
            Segment::Literal(_) => None,
        })
    }

    pub fn render(&self, mut lookup: impl FnMut(&str) -> Option<String>) -> Result<String, String> {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Literal(l) => out.push_str(l),
                Segment::Placeholder(p) => {
                    let v = lookup(p).ok_or_else(|| p.clone())?;
                    out.push_str(&v);
                }
            }
        }
        Ok(out)
    }
}

/// Escapes braces so that `text` parses as a template rendering to itself.
pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '{' => out.push_str("{{"),
            '}' => out.push_str("}}"),
            c => out.push(c),
        }
    }
    out
}

/// `true` unless the trimmed text is empty or `false` (any case).
pub fn truthy(text: &str) -> bool {
    let t = text.trim();
    !t.is_empty() && !t.eq_ignore_ascii_case("false")
}
