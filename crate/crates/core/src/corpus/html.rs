//! Splits a post body into prose, code and image references.

use scraper::{Html, Node};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecomposedBody {
    pub text: String,
    pub code_blocks: Vec<String>,
    pub image_refs: Vec<String>,
}

const BLOCK_ELEMENTS: &[&str] = &[
    "p",
    "div",
    "br",
    "li",
    "ul",
    "ol",
    "blockquote",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
    "h6",
    "hr",
    "table",
    "tr",
    "td",
    "th",
    "dl",
    "dt",
    "dd",
];

/// Decompose a post body.
///
/// `<pre>` and `<code>` contents become code blocks (a `<pre><code>` nest is a
/// single block), `src` attributes of `<img>` become image references in
/// document order, and all other text is entity-decoded and
/// whitespace-collapsed into `text`. Angle brackets are removed from `text`,
/// so markup can never leak into it even when the prose quotes a tag.
pub fn decompose_body(html: &str) -> DecomposedBody {
    let fragment = Html::parse_fragment(html);
    let mut out = DecomposedBody::default();
    let mut raw_text = String::new();
    walk(fragment.tree.root(), &mut out, &mut raw_text);
    out.text = collapse_whitespace(&raw_text.replace(['<', '>'], " "));
    out
}

fn walk(node: ego_tree::NodeRef<'_, Node>, out: &mut DecomposedBody, text: &mut String) {
    for child in node.children() {
        match child.value() {
            Node::Text(t) => text.push_str(t),
            Node::Element(el) => {
                let name = el.name();
                match name {
                    "pre" | "code" => {
                        let mut code = String::new();
                        collect_text(child, &mut code);
                        out.code_blocks.push(code);
                        text.push(' ');
                    }
                    "img" => {
                        if let Some(src) = el.attr("src") {
                            let src = src.trim();
                            if !src.is_empty() {
                                out.image_refs.push(src.to_string());
                            }
                        }
                        text.push(' ');
                    }
                    "script" | "style" => {}
                    _ => {
                        let block = BLOCK_ELEMENTS.contains(&name);
                        if block {
                            text.push(' ');
                        }
                        walk(child, out, text);
                        if block {
                            text.push(' ');
                        }
                    }
                }
            }
            _ => walk(child, out, text),
        }
    }
}

fn collect_text(node: ego_tree::NodeRef<'_, Node>, buf: &mut String) {
    for child in node.children() {
        match child.value() {
            Node::Text(t) => buf.push_str(t),
            _ => collect_text(child, buf),
        }
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_code_images_and_text() {
        let body = r#"<p>My <b>layout</b> breaks:</p>
<pre><code>div { float: left; }
</code></pre>
<p>Screenshot: <img src="https://i.sstatic.net/a.png" alt="x"> and
<a href="https://i.sstatic.net/b.png"><img src="https://i.sstatic.net/b.png"></a></p>
<p>Calling <code>render()</code> fails &amp; crashes.</p>"#;
        let d = decompose_body(body);
        assert_eq!(
            d.image_refs,
            vec!["https://i.sstatic.net/a.png", "https://i.sstatic.net/b.png"]
        );
        assert_eq!(d.code_blocks, vec!["div { float: left; }\n", "render()"]);
        assert_eq!(
            d.text,
            "My layout breaks: Screenshot: and Calling fails & crashes."
        );
    }

    #[test]
    fn quoted_markup_never_reaches_text() {
        let d = decompose_body("<p>Why does &lt;img src=x&gt; not load inside &lt;code&gt;?</p>");
        assert!(!d.text.contains("<img"));
        assert!(!d.text.contains("<code"));
        assert!(d.text.contains("img src=x"));
    }

    #[test]
    fn empty_body() {
        assert_eq!(decompose_body(""), DecomposedBody::default());
    }

    #[test]
    fn img_without_src_is_ignored() {
        let d = decompose_body(r#"<img alt="none"><img src="">"#);
        assert!(d.image_refs.is_empty());
    }
}
