//! Shared handling of `# key=value` preambles in the CSV-based file formats.

/// A `# key=value` line from a file preamble.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Directive {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits leading comment/blank lines off `text`. Returns the `key=value`
/// directives, the remaining body, and the 1-based line number where the
/// body starts.
pub(crate) fn split_preamble(text: &str) -> (Vec<Directive>, &str, usize) {
    let mut directives = Vec::new();
    let mut offset = 0;
    let mut line_no = 1;
    for raw in text.split_inclusive('\n') {
        let trimmed = raw.trim();
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                directives.push(Directive {
                    line: line_no,
                    key: k.trim().to_string(),
                    value: v.trim().to_string(),
                });
            }
        } else if !trimmed.is_empty() {
            break;
        }
        offset += raw.len();
        line_no += 1;
    }
    (directives, &text[offset..], line_no)
}
