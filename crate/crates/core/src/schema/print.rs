use super::{EventSchema, Section};

/// Canonical single-line serialization. Every section key is always emitted,
/// in the fixed order header, preconditions, static-conditions,
/// postconditions, goals, episodes.
pub fn print_schema(schema: &EventSchema) -> String {
    let mut out = String::from("(schema :header ");
    push_quoted(&mut out, &schema.header);
    for section in Section::LISTS {
        out.push_str(" :");
        out.push_str(section.keyword());
        out.push_str(" (");
        for (i, fact) in schema.section(section).iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            push_quoted(&mut out, fact);
        }
        out.push(')');
    }
    out.push(')');
    out
}

fn push_quoted(out: &mut String, text: &str) {
    out.push('"');
    for c in text.chars() {
        if matches!(c, '"' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
}

/// Flatten a schema into the document text used for its embedding: the
/// header, then every fact on its own line in canonical section order.
pub fn schema_document(schema: &EventSchema) -> String {
    std::iter::once(schema.header())
        .chain(schema.facts().map(|f| f.text))
        .collect::<Vec<_>>()
        .join("\n")
}
