//! Small HTML helpers: escaping and a tag-balance check used to
//! validate section fragments before they are stitched into a card.

/// Escapes text for use in HTML body or attribute positions.
pub fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Elements that never take a closing tag.
const VOID_ELEMENTS: &[&str] = &[
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "source", "track",
    "wbr",
];

/// Checks that every opened tag is closed in order. Handles quoted
/// attribute values (a `>` inside quotes does not end the tag),
/// comments, self-closing syntax, and HTML void elements. This is a
/// well-formedness gate for generated fragments, not a full parser.
pub fn check_fragment(html: &str) -> Result<(), String> {
    let bytes = html.as_bytes();
    let mut stack: Vec<String> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        if html[i..].starts_with("<!--") {
            match html[i..].find("-->") {
                Some(rel) => {
                    i += rel + 3;
                    continue;
                }
                None => return Err("unterminated comment".to_string()),
            }
        }
        let mut j = i + 1;
        let mut quote: Option<u8> = None;
        while j < bytes.len() {
            match quote {
                Some(q) => {
                    if bytes[j] == q {
                        quote = None;
                    }
                }
                None => match bytes[j] {
                    b'"' | b'\'' => quote = Some(bytes[j]),
                    b'>' => break,
                    _ => {}
                },
            }
            j += 1;
        }
        if j >= bytes.len() {
            return Err("unterminated tag".to_string());
        }
        let tag = &html[i + 1..j];
        i = j + 1;

        if let Some(name_part) = tag.strip_prefix('/') {
            let name = tag_name(name_part);
            match stack.pop() {
                Some(open) if open == name => {}
                Some(open) => return Err(format!("mismatched tags: <{open}> closed by </{name}>")),
                None => return Err(format!("closing </{name}> with nothing open")),
            }
            continue;
        }
        if tag.ends_with('/') {
            continue;
        }
        let name = tag_name(tag);
        if name.is_empty() {
            return Err("empty tag".to_string());
        }
        if !VOID_ELEMENTS.contains(&name.as_str()) {
            stack.push(name);
        }
    }
    match stack.last() {
        None => Ok(()),
        Some(open) => Err(format!("unclosed <{open}>")),
    }
}

fn tag_name(tag: &str) -> String {
    tag.chars()
        .take_while(|c| c.is_ascii_alphanumeric() || *c == '-')
        .collect::<String>()
        .to_ascii_lowercase()
}
