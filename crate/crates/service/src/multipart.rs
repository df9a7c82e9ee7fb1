//! Just enough `multipart/form-data` to pull one uploaded file out of a
//! browser form post.

use std::ops::Range;

/// The boundary parameter of a `multipart/form-data` content type.
pub fn boundary_of(content_type: &str) -> Option<String> {
    let mut parts = content_type.split(';');
    let mime = parts.next()?.trim();
    if !mime.eq_ignore_ascii_case("multipart/form-data") {
        return None;
    }
    parts.find_map(|p| {
        let (k, v) = p.split_once('=')?;
        k.trim()
            .eq_ignore_ascii_case("boundary")
            .then(|| v.trim().trim_matches('"').to_string())
            .filter(|b| !b.is_empty())
    })
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if from > hay.len() {
        return None;
    }
    hay[from..]
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

/// Byte range of the first part carrying a `filename`, or failing that
/// the first part named `image` or `file`.
pub fn first_file_part(body: &[u8], boundary: &str) -> Option<Range<usize>> {
    let delim = format!("--{boundary}");
    let delim = delim.as_bytes();
    let next_delim = [b"\r\n", delim].concat();

    let mut pos = find(body, delim, 0)? + delim.len();
    let mut fallback = None;
    loop {
        if body[pos..].starts_with(b"--") {
            break;
        }
        let headers_start = find(body, b"\r\n", pos)? + 2;
        let headers_end = find(body, b"\r\n\r\n", headers_start - 2)?;
        let content_start = headers_end + 4;
        let content_end = find(body, &next_delim, content_start)?;
        let headers = String::from_utf8_lossy(&body[headers_start..headers_end]).to_ascii_lowercase();
        let disposition = headers
            .lines()
            .find(|l| l.starts_with("content-disposition:"))
            .unwrap_or("");
        if disposition.contains("filename=") {
            return Some(content_start..content_end);
        }
        if fallback.is_none()
            && (disposition.contains("name=\"image\"") || disposition.contains("name=\"file\""))
        {
            fallback = Some(content_start..content_end);
        }
        pos = content_end + next_delim.len();
    }
    fallback
}
