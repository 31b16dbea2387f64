//! Byte-level HTTP/1.1 request parsing and serialization with configurable
//! parser personalities.
//!
//! A [`ParserPersonality`] bundles the handful of knobs on which real proxy
//! stacks disagree: how an invalid `Transfer-Encoding` value is treated, which
//! framing header wins when both are present, which of several `Host` headers
//! is used, whether an absolute-form URI overrides the `Host` header, how the
//! request path is normalized before resource resolution, and whether a GET
//! carrying a body has that body consumed or ignored. Parsing the same bytes
//! under two personalities yields the two "honored" interpretations whose
//! disagreement the sync layer is built to detect.

use serde::{Deserialize, Serialize};

use crate::sync::FieldSnapshot;

/// Maximum size of the request line plus header section.
pub const MAX_HEAD_BYTES: usize = 64 * 1024;
/// Maximum size of a single header line.
pub const MAX_HEADER_LINE_BYTES: usize = 16 * 1024;

/// Raw request bytes as captured from the connection. The head (request line
/// and header section) must be complete; body bytes may follow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRequest(pub Vec<u8>);

impl RawRequest {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        RawRequest(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<Vec<u8>> for RawRequest {
    fn from(bytes: Vec<u8>) -> Self {
        RawRequest(bytes)
    }
}

impl From<&[u8]> for RawRequest {
    fn from(bytes: &[u8]) -> Self {
        RawRequest(bytes.to_vec())
    }
}

/// One header field, name and value kept as wire bytes. Values are stored
/// with surrounding optional whitespace trimmed; names keep original casing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub name: Vec<u8>,
    pub value: Vec<u8>,
}

impl Header {
    pub fn new(name: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        Header {
            name: name.into(),
            value: value.into(),
        }
    }

    /// ASCII case-insensitive name comparison.
    pub fn name_is(&self, name: &str) -> bool {
        self.name.eq_ignore_ascii_case(name.as_bytes())
    }
}

/// How this hop frames the request body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramingDecision {
    /// No body follows the header section.
    NoBody,
    /// Exactly this many body bytes follow, per the honored Content-Length.
    ContentLength(u64),
    /// The body is chunk-encoded and ends at the zero-length terminal chunk.
    Chunked,
}

impl FramingDecision {
    pub fn is_chunked(&self) -> bool {
        matches!(self, FramingDecision::Chunked)
    }
}

/// Handling of a `Transfer-Encoding` header whose value is not exactly
/// `chunked`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeHandling {
    /// Reject the request outright.
    StrictRejectInvalid,
    /// Behave as if the header were absent.
    IgnoreInvalidValue,
    /// Strip leading semicolons and whitespace, then re-evaluate. `;chunked`
    /// becomes `chunked`; anything still invalid is ignored.
    SanitizeLeadingSemicolon,
}

/// Which framing header wins when both Content-Length and a (post-handling)
/// valid chunked Transfer-Encoding are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClTePrecedence {
    PreferTe,
    PreferCl,
    RejectBothPresent,
}

/// Which Host header value is honored when the request carries several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DuplicateHost {
    FirstWins,
    LastWins,
    Reject,
}

/// Whether an absolute-form request-target overrides the Host header for
/// routing purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsoluteUriHost {
    PreferUriHost,
    IgnoreMalformedUriUseHostHeader,
}

/// How the honored path is derived from the request-target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathDecoding {
    /// The path-and-query bytes exactly as received.
    RawBytes,
    /// Percent-decode, drop everything from the first `?`, then truncate to
    /// the first path segment containing a dot (framework-style script /
    /// path-parameter splitting).
    DecodePercentThenSplitQuery,
}

/// Whether a GET or HEAD request with body-framing headers has its body
/// consumed or left on the connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FatGetBody {
    ConsumeBody,
    IgnoreBody,
}

/// The knob a strict personality rejected on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PersonalityKnob {
    TeHandling,
    ClTePrecedence,
    DuplicateHost,
}

impl std::fmt::Display for PersonalityKnob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PersonalityKnob::TeHandling => "te-handling",
            PersonalityKnob::ClTePrecedence => "cl-te-precedence",
            PersonalityKnob::DuplicateHost => "duplicate-host",
        };
        f.write_str(s)
    }
}

/// Configurable parser behavior reproducing the processing differences of
/// real server stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParserPersonality {
    pub te_handling: TeHandling,
    pub cl_te_precedence: ClTePrecedence,
    pub duplicate_host: DuplicateHost,
    pub absolute_uri_host: AbsoluteUriHost,
    pub path_decoding: PathDecoding,
    pub fat_get_body: FatGetBody,
}

impl ParserPersonality {
    /// All knobs at their strictest setting: ambiguous requests are rejected,
    /// never reinterpreted.
    pub fn strict() -> Self {
        ParserPersonality {
            te_handling: TeHandling::StrictRejectInvalid,
            cl_te_precedence: ClTePrecedence::RejectBothPresent,
            duplicate_host: DuplicateHost::Reject,
            absolute_uri_host: AbsoluteUriHost::PreferUriHost,
            path_decoding: PathDecoding::RawBytes,
            fat_get_body: FatGetBody::ConsumeBody,
        }
    }

    fn lenient_base() -> Self {
        ParserPersonality {
            te_handling: TeHandling::IgnoreInvalidValue,
            cl_te_precedence: ClTePrecedence::PreferCl,
            duplicate_host: DuplicateHost::FirstWins,
            absolute_uri_host: AbsoluteUriHost::IgnoreMalformedUriUseHostHeader,
            path_decoding: PathDecoding::RawBytes,
            fat_get_body: FatGetBody::ConsumeBody,
        }
    }

    /// Look up a named preset. Each preset reconstructs one of the server
    /// behaviors exercised by the scenario suite.
    pub fn preset(name: &str) -> Option<Self> {
        let p = match name {
            // Front proxy that discards an invalid Transfer-Encoding value and
            // frames by Content-Length.
            "cl-preferring-proxy" => Self::lenient_base(),
            // Origin-style parser that repairs `;chunked` and then prefers
            // chunked framing; framework-style path handling.
            "te-sanitizing-origin" => ParserPersonality {
                te_handling: TeHandling::SanitizeLeadingSemicolon,
                cl_te_precedence: ClTePrecedence::PreferTe,
                duplicate_host: DuplicateHost::LastWins,
                path_decoding: PathDecoding::DecodePercentThenSplitQuery,
                ..Self::lenient_base()
            },
            // Cache layer that keys on the raw request-target bytes.
            "raw-path-cache" => ParserPersonality {
                path_decoding: PathDecoding::RawBytes,
                ..Self::lenient_base()
            },
            // Web-framework origin: percent-decodes, strips the query, and
            // splits path parameters after the script segment.
            "decoding-framework-origin" => ParserPersonality {
                te_handling: TeHandling::SanitizeLeadingSemicolon,
                cl_te_precedence: ClTePrecedence::PreferTe,
                duplicate_host: DuplicateHost::LastWins,
                absolute_uri_host: AbsoluteUriHost::PreferUriHost,
                path_decoding: PathDecoding::DecodePercentThenSplitQuery,
                fat_get_body: FatGetBody::ConsumeBody,
            },
            // Router that ignores absolute-form targets and trusts the Host
            // header.
            "host-header-router" => ParserPersonality {
                absolute_uri_host: AbsoluteUriHost::IgnoreMalformedUriUseHostHeader,
                ..Self::lenient_base()
            },
            // Router that trusts the authority inside an absolute-form target.
            "absolute-uri-router" => ParserPersonality {
                absolute_uri_host: AbsoluteUriHost::PreferUriHost,
                ..Self::lenient_base()
            },
            // Hop that consumes and forwards the body of a fat GET.
            "fat-get-forwarder" => ParserPersonality {
                fat_get_body: FatGetBody::ConsumeBody,
                ..Self::lenient_base()
            },
            // Hop that leaves a fat GET body on the connection.
            "fat-get-ignorer" => ParserPersonality {
                fat_get_body: FatGetBody::IgnoreBody,
                ..Self::lenient_base()
            },
            // Everything strict: ambiguity is an error.
            "strict-gateway" => Self::strict(),
            _ => return None,
        };
        Some(p)
    }

    /// Names of all shipped presets, in a stable order.
    pub fn preset_names() -> &'static [&'static str] {
        &[
            "cl-preferring-proxy",
            "te-sanitizing-origin",
            "raw-path-cache",
            "decoding-framework-origin",
            "host-header-router",
            "absolute-uri-router",
            "fat-get-forwarder",
            "fat-get-ignorer",
            "strict-gateway",
        ]
    }
}

impl Default for ParserPersonality {
    fn default() -> Self {
        Self::lenient_base()
    }
}

/// Parse failure. `RejectedByPolicy` marks a strict personality refusing an
/// ambiguous request, as opposed to bytes that no personality accepts.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("malformed request line")]
    MalformedRequestLine,
    #[error("malformed header")]
    MalformedHeader,
    #[error("rejected by policy: {0}")]
    RejectedByPolicy(PersonalityKnob),
    #[error("header section incomplete")]
    UnterminatedHead,
    #[error("header section exceeds {MAX_HEAD_BYTES} bytes")]
    HeadTooLarge,
    #[error("header line exceeds {MAX_HEADER_LINE_BYTES} bytes")]
    HeaderLineTooLarge,
}

/// A parsed request together with this personality's honored interpretation.
#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    /// Request-target exactly as received, percent-encoding preserved.
    pub target: Vec<u8>,
    pub version: String,
    /// All headers in wire order, duplicates preserved.
    pub headers: Vec<Header>,
    pub framing: FramingDecision,
    /// The path this hop uses for resource resolution.
    pub honored_path: Vec<u8>,
    /// The host this hop routes by.
    pub honored_host: Vec<u8>,
    /// Offset of the first body byte within the parsed input.
    pub head_len: usize,
}

impl PartialEq for Request {
    fn eq(&self, other: &Self) -> bool {
        // head_len is byte-position plumbing, not part of the interpretation.
        self.method == other.method
            && self.target == other.target
            && self.version == other.version
            && self.headers == other.headers
            && self.framing == other.framing
            && self.honored_path == other.honored_path
            && self.honored_host == other.honored_host
    }
}

impl Eq for Request {}

impl Request {
    /// The field values that must stay synchronized across hops.
    pub fn honored_fields(&self) -> FieldSnapshot {
        FieldSnapshot {
            path: self.honored_path.clone(),
            host: self.honored_host.clone(),
        }
    }

    /// First header with the given name (ASCII case-insensitive).
    pub fn header(&self, name: &str) -> Option<&Header> {
        self.headers.iter().find(|h| h.name_is(name))
    }

    /// All headers with the given name, in wire order.
    pub fn headers_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Header> {
        self.headers.iter().filter(move |h| h.name_is(name))
    }
}

fn is_token_byte(b: u8) -> bool {
    matches!(b,
        b'!' | b'#' | b'$' | b'%' | b'&' | b'\'' | b'*' | b'+' | b'-' | b'.'
        | b'^' | b'_' | b'`' | b'|' | b'~')
        || b.is_ascii_alphanumeric()
}

fn is_target_byte(b: u8) -> bool {
    // Visible ASCII or high bytes; no SP, no controls.
    (0x21..=0x7e).contains(&b) || b >= 0x80
}

fn trim_ows(mut v: &[u8]) -> &[u8] {
    while let Some((b' ' | b'\t', rest)) = v.split_first().map(|(f, r)| (*f, r)) {
        v = rest;
    }
    while let Some((rest, b' ' | b'\t')) = v.split_last().map(|(l, r)| (r, *l)) {
        v = rest;
    }
    v
}

/// Split the head into request line and header lines. Returns the lines and
/// the offset just past the terminating empty line.
fn split_head(raw: &[u8]) -> Result<(Vec<&[u8]>, usize), ParseError> {
    let limit = raw.len().min(MAX_HEAD_BYTES + 1);
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let rest = &raw[pos..limit];
        let Some(nl) = rest.windows(2).position(|w| w == b"\r\n") else {
            return Err(if raw.len() > MAX_HEAD_BYTES {
                ParseError::HeadTooLarge
            } else {
                ParseError::UnterminatedHead
            });
        };
        let line = &rest[..nl];
        if line.len() > MAX_HEADER_LINE_BYTES {
            return Err(ParseError::HeaderLineTooLarge);
        }
        pos += nl + 2;
        if line.is_empty() {
            if lines.is_empty() {
                return Err(ParseError::MalformedRequestLine);
            }
            return Ok((lines, pos));
        }
        if pos > MAX_HEAD_BYTES {
            return Err(ParseError::HeadTooLarge);
        }
        lines.push(line);
    }
}

fn parse_request_line(line: &[u8]) -> Result<(String, Vec<u8>, String), ParseError> {
    let mut parts = line.split(|&b| b == b' ');
    let method = parts.next().ok_or(ParseError::MalformedRequestLine)?;
    let target = parts.next().ok_or(ParseError::MalformedRequestLine)?;
    let version = parts.next().ok_or(ParseError::MalformedRequestLine)?;
    if parts.next().is_some() {
        return Err(ParseError::MalformedRequestLine);
    }
    if method.is_empty() || !method.iter().all(|&b| is_token_byte(b)) {
        return Err(ParseError::MalformedRequestLine);
    }
    if target.is_empty() || !target.iter().all(|&b| is_target_byte(b)) {
        return Err(ParseError::MalformedRequestLine);
    }
    if version != b"HTTP/1.1" && version != b"HTTP/1.0" {
        return Err(ParseError::MalformedRequestLine);
    }
    Ok((
        String::from_utf8(method.to_vec()).unwrap(),
        target.to_vec(),
        String::from_utf8(version.to_vec()).unwrap(),
    ))
}

fn parse_header_line(line: &[u8]) -> Result<Header, ParseError> {
    let colon = line
        .iter()
        .position(|&b| b == b':')
        .ok_or(ParseError::MalformedHeader)?;
    let name = &line[..colon];
    if name.is_empty() || !name.iter().all(|&b| is_token_byte(b)) {
        // Covers leading whitespace (obsolete folding) and space-before-colon.
        return Err(ParseError::MalformedHeader);
    }
    let value = trim_ows(&line[colon + 1..]);
    if value.iter().any(|&b| b == b'\r' || b == b'\n' || b == 0) {
        return Err(ParseError::MalformedHeader);
    }
    Ok(Header::new(name, value))
}

/// Evaluate Transfer-Encoding presence under the personality. `Ok(true)`
/// means chunked framing is in play.
fn honored_te(headers: &[Header], p: &ParserPersonality) -> Result<bool, ParseError> {
    let te: Vec<&Header> = headers.iter().filter(|h| h.name_is("transfer-encoding")).collect();
    match te.len() {
        0 => return Ok(false),
        1 => {}
        _ => return Err(ParseError::MalformedHeader),
    }
    let value = trim_ows(&te[0].value);
    if value.eq_ignore_ascii_case(b"chunked") {
        return Ok(true);
    }
    match p.te_handling {
        TeHandling::StrictRejectInvalid => {
            Err(ParseError::RejectedByPolicy(PersonalityKnob::TeHandling))
        }
        TeHandling::IgnoreInvalidValue => Ok(false),
        TeHandling::SanitizeLeadingSemicolon => {
            let mut v = value;
            while let Some((b';' | b' ' | b'\t', rest)) = v.split_first().map(|(f, r)| (*f, r)) {
                v = rest;
            }
            Ok(v.eq_ignore_ascii_case(b"chunked"))
        }
    }
}

fn honored_cl(headers: &[Header]) -> Result<Option<u64>, ParseError> {
    let cl: Vec<&Header> = headers.iter().filter(|h| h.name_is("content-length")).collect();
    match cl.len() {
        0 => Ok(None),
        1 => {
            let v = trim_ows(&cl[0].value);
            if v.is_empty() || !v.iter().all(|b| b.is_ascii_digit()) {
                return Err(ParseError::MalformedHeader);
            }
            let s = std::str::from_utf8(v).unwrap();
            let n: u64 = s.parse().map_err(|_| ParseError::MalformedHeader)?;
            Ok(Some(n))
        }
        _ => Err(ParseError::MalformedHeader),
    }
}

/// Locate the authority inside an absolute-form target, returning
/// `(authority, path_and_query)`.
fn split_absolute_form(target: &[u8]) -> Option<(&[u8], &[u8])> {
    let lower_prefix = |prefix: &[u8]| {
        target.len() >= prefix.len() && target[..prefix.len()].eq_ignore_ascii_case(prefix)
    };
    let scheme_len = if lower_prefix(b"http://") {
        7
    } else if lower_prefix(b"https://") {
        8
    } else {
        return None;
    };
    let rest = &target[scheme_len..];
    let end = rest
        .iter()
        .position(|&b| b == b'/' || b == b'?')
        .unwrap_or(rest.len());
    let authority = &rest[..end];
    let path = &rest[end..];
    Some((authority, if path.is_empty() { b"/" } else { path }))
}

fn percent_decode(input: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(input.len());
    let mut i = 0;
    while i < input.len() {
        if input[i] == b'%' && i + 2 < input.len() + 1 && i + 2 < input.len() {
            let hi = (input[i + 1] as char).to_digit(16);
            let lo = (input[i + 2] as char).to_digit(16);
            if let (Some(hi), Some(lo)) = (hi, lo) {
                out.push((hi * 16 + lo) as u8);
                i += 3;
                continue;
            }
        }
        out.push(input[i]);
        i += 1;
    }
    out
}

/// Framework-style path-parameter split: keep everything up to and including
/// the first path segment containing a dot.
fn split_path_parameters(path: &[u8]) -> &[u8] {
    let mut seg_start = 0;
    for (i, &b) in path.iter().enumerate() {
        if b == b'/' {
            if path[seg_start..i].contains(&b'.') {
                return &path[..i];
            }
            seg_start = i + 1;
        }
    }
    path
}

fn derive_honored_path(path_and_query: &[u8], p: &ParserPersonality) -> Vec<u8> {
    match p.path_decoding {
        PathDecoding::RawBytes => path_and_query.to_vec(),
        PathDecoding::DecodePercentThenSplitQuery => {
            let decoded = percent_decode(path_and_query);
            let path = match decoded.iter().position(|&b| b == b'?') {
                Some(q) => &decoded[..q],
                None => &decoded[..],
            };
            split_path_parameters(path).to_vec()
        }
    }
}

fn derive_honored_host(
    headers: &[Header],
    authority: Option<&[u8]>,
    p: &ParserPersonality,
) -> Result<Vec<u8>, ParseError> {
    if let Some(auth) = authority {
        if p.absolute_uri_host == AbsoluteUriHost::PreferUriHost {
            return Ok(auth.to_vec());
        }
    }
    let hosts: Vec<&Header> = headers.iter().filter(|h| h.name_is("host")).collect();
    match hosts.len() {
        0 => Ok(Vec::new()),
        1 => Ok(hosts[0].value.clone()),
        _ => match p.duplicate_host {
            DuplicateHost::FirstWins => Ok(hosts[0].value.clone()),
            DuplicateHost::LastWins => Ok(hosts[hosts.len() - 1].value.clone()),
            DuplicateHost::Reject => {
                Err(ParseError::RejectedByPolicy(PersonalityKnob::DuplicateHost))
            }
        },
    }
}

/// Parse the head of `raw` under personality `p`.
///
/// The honored path, host, and framing in the returned [`Request`] are a pure
/// function of `(raw, p)`; body bytes after the head are not touched.
pub fn parse_request(raw: &RawRequest, p: &ParserPersonality) -> Result<Request, ParseError> {
    let (lines, head_len) = split_head(raw.as_bytes())?;
    let (method, target, version) = parse_request_line(lines[0])?;
    let mut headers = Vec::with_capacity(lines.len() - 1);
    for line in &lines[1..] {
        headers.push(parse_header_line(line)?);
    }

    let te_chunked = honored_te(&headers, p)?;
    let cl = honored_cl(&headers)?;
    let mut framing = match (cl, te_chunked) {
        (None, false) => FramingDecision::NoBody,
        (Some(n), false) => FramingDecision::ContentLength(n),
        (None, true) => FramingDecision::Chunked,
        (Some(n), true) => match p.cl_te_precedence {
            ClTePrecedence::PreferTe => FramingDecision::Chunked,
            ClTePrecedence::PreferCl => FramingDecision::ContentLength(n),
            ClTePrecedence::RejectBothPresent => {
                return Err(ParseError::RejectedByPolicy(PersonalityKnob::ClTePrecedence))
            }
        },
    };
    if (method == "GET" || method == "HEAD")
        && framing != FramingDecision::NoBody
        && p.fat_get_body == FatGetBody::IgnoreBody
    {
        framing = FramingDecision::NoBody;
    }

    let split = split_absolute_form(&target);
    let authority = split.map(|(a, _)| a);
    let path_and_query = split.map(|(_, pq)| pq).unwrap_or(&target);

    let honored_path = derive_honored_path(path_and_query, p);
    let honored_host = derive_honored_host(&headers, authority, p)?;

    Ok(Request {
        method,
        target,
        version,
        headers,
        framing,
        honored_path,
        honored_host,
        head_len,
    })
}

/// Serialize the head back to wire bytes: request line, headers in stored
/// order (duplicates included), and the terminating empty line.
pub fn serialize_request(req: &Request) -> RawRequest {
    RawRequest(serialize_head(&req.method, &req.target, &req.version, &req.headers))
}

/// Serialize a head from parts, for callers assembling an outgoing request
/// without a full [`Request`] in hand.
pub fn serialize_head(method: &str, target: &[u8], version: &str, headers: &[Header]) -> Vec<u8> {
    serialize_head_filtered(method, target, version, headers, |_| false, &[])
}

/// Serialize a head while dropping the headers `skip` matches and appending
/// `extra` name/value lines after the survivors. Works from borrowed parts
/// so per-request forwarding never copies header strings around.
pub fn serialize_head_filtered(
    method: &str,
    target: &[u8],
    version: &str,
    headers: &[Header],
    skip: impl Fn(&Header) -> bool,
    extra: &[(&str, &[u8])],
) -> Vec<u8> {
    let mut size = method.len() + target.len() + version.len() + 8;
    for h in headers {
        size += h.name.len() + h.value.len() + 4;
    }
    for (name, value) in extra {
        size += name.len() + value.len() + 4;
    }
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(method.as_bytes());
    out.push(b' ');
    out.extend_from_slice(target);
    out.push(b' ');
    out.extend_from_slice(version.as_bytes());
    out.extend_from_slice(b"\r\n");
    for h in headers {
        if skip(h) {
            continue;
        }
        out.extend_from_slice(&h.name);
        out.extend_from_slice(b": ");
        out.extend_from_slice(&h.value);
        out.extend_from_slice(b"\r\n");
    }
    for (name, value) in extra {
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(value);
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(b"\r\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus;

    fn p(name: &str) -> ParserPersonality {
        ParserPersonality::preset(name).unwrap()
    }

    #[test]
    fn smuggling_payload_framed_by_content_length_when_te_ignored() {
        let raw = RawRequest::new(corpus::listing1());
        let personality = ParserPersonality {
            te_handling: TeHandling::IgnoreInvalidValue,
            cl_te_precedence: ClTePrecedence::PreferTe,
            ..ParserPersonality::default()
        };
        let req = parse_request(&raw, &personality).unwrap();
        assert_eq!(req.framing, FramingDecision::ContentLength(51));
        assert_eq!(req.honored_path, b"/public");
    }

    #[test]
    fn smuggling_payload_framed_chunked_when_te_sanitized() {
        let raw = RawRequest::new(corpus::listing1());
        let personality = ParserPersonality {
            te_handling: TeHandling::SanitizeLeadingSemicolon,
            cl_te_precedence: ClTePrecedence::PreferTe,
            ..ParserPersonality::default()
        };
        let req = parse_request(&raw, &personality).unwrap();
        assert_eq!(req.framing, FramingDecision::Chunked);
    }

    #[test]
    fn shipped_presets_disagree_on_smuggling_payload_framing() {
        // The precondition for the whole defense demonstration: two shipped
        // personalities honor different framings for the same bytes.
        let raw = RawRequest::new(corpus::listing1());
        let a = parse_request(&raw, &p("cl-preferring-proxy")).unwrap();
        let b = parse_request(&raw, &p("te-sanitizing-origin")).unwrap();
        assert_eq!(a.framing, FramingDecision::ContentLength(51));
        assert_eq!(b.framing, FramingDecision::Chunked);
    }

    #[test]
    fn unambiguous_get_same_under_every_preset() {
        let raw = RawRequest::new(
            b"GET / HTTP/1.1\r\nHost: www.example.com\r\n\r\n".to_vec(),
        );
        for name in ParserPersonality::preset_names() {
            let req = parse_request(&raw, &p(name)).unwrap();
            assert_eq!(req.framing, FramingDecision::NoBody, "preset {name}");
            assert_eq!(req.honored_host, b"www.example.com", "preset {name}");
            assert_eq!(req.honored_path, b"/", "preset {name}");
        }
    }

    #[test]
    fn path_parameter_split_differs_between_cache_and_framework() {
        let raw = RawRequest::new(
            b"GET /account.php/image.png HTTP/1.1\r\nHost: www.example.com\r\n\r\n".to_vec(),
        );
        let cache = parse_request(&raw, &p("raw-path-cache")).unwrap();
        assert_eq!(cache.honored_path, b"/account.php/image.png");
        let framework = parse_request(&raw, &p("decoding-framework-origin")).unwrap();
        assert_eq!(framework.honored_path, b"/account.php");
    }

    #[test]
    fn encoded_query_delimiter_split_after_decoding() {
        let raw = RawRequest::new(
            b"GET /account.php%3Fimage.png HTTP/1.1\r\nHost: www.example.com\r\n\r\n".to_vec(),
        );
        let cache = parse_request(&raw, &p("raw-path-cache")).unwrap();
        assert_eq!(cache.honored_path, b"/account.php%3Fimage.png");
        let framework = parse_request(&raw, &p("decoding-framework-origin")).unwrap();
        assert_eq!(framework.honored_path, b"/account.php");
    }

    #[test]
    fn absolute_uri_host_precedence() {
        let raw = RawRequest::new(
            b"GET http://admin.example.com/x HTTP/1.1\r\nHost: public.example.com\r\n\r\n"
                .to_vec(),
        );
        let uri = parse_request(&raw, &p("absolute-uri-router")).unwrap();
        assert_eq!(uri.honored_host, b"admin.example.com");
        assert_eq!(uri.honored_path, b"/x");
        let header = parse_request(&raw, &p("host-header-router")).unwrap();
        assert_eq!(header.honored_host, b"public.example.com");
        assert_eq!(header.honored_path, b"/x");
    }

    #[test]
    fn duplicate_host_first_last_reject() {
        let raw = RawRequest::new(
            b"GET / HTTP/1.1\r\nHost: a.example.com\r\nHost: b.example.com\r\n\r\n".to_vec(),
        );
        let first = ParserPersonality { duplicate_host: DuplicateHost::FirstWins, ..Default::default() };
        let last = ParserPersonality { duplicate_host: DuplicateHost::LastWins, ..Default::default() };
        assert_eq!(parse_request(&raw, &first).unwrap().honored_host, b"a.example.com");
        assert_eq!(parse_request(&raw, &last).unwrap().honored_host, b"b.example.com");
        assert_eq!(
            parse_request(&raw, &ParserPersonality::strict()),
            Err(ParseError::RejectedByPolicy(PersonalityKnob::DuplicateHost))
        );
    }

    #[test]
    fn strict_personality_rejects_ambiguity_instead_of_reinterpreting() {
        let strict = ParserPersonality::strict();
        // Both CL and a valid TE present.
        let both = RawRequest::new(
            b"POST / HTTP/1.1\r\nHost: h\r\nContent-Length: 5\r\nTransfer-Encoding: chunked\r\n\r\n"
                .to_vec(),
        );
        assert_eq!(
            parse_request(&both, &strict),
            Err(ParseError::RejectedByPolicy(PersonalityKnob::ClTePrecedence))
        );
        // Invalid TE value.
        assert_eq!(
            parse_request(&RawRequest::new(corpus::listing1()), &strict),
            Err(ParseError::RejectedByPolicy(PersonalityKnob::TeHandling))
        );
    }

    #[test]
    fn fat_get_framing_follows_knob() {
        let raw = RawRequest::new(
            b"GET /fat HTTP/1.1\r\nHost: h\r\nContent-Length: 13\r\n\r\npotatoandeggs".to_vec(),
        );
        let consume = parse_request(&raw, &p("fat-get-forwarder")).unwrap();
        assert_eq!(consume.framing, FramingDecision::ContentLength(13));
        let ignore = parse_request(&raw, &p("fat-get-ignorer")).unwrap();
        assert_eq!(ignore.framing, FramingDecision::NoBody);
    }

    #[test]
    fn serialize_simple_get_is_byte_identical() {
        let bytes = b"GET / HTTP/1.1\r\nHost: www.example.com\r\n\r\n".to_vec();
        let req = parse_request(&RawRequest::new(bytes.clone()), &Default::default()).unwrap();
        assert_eq!(serialize_request(&req).0, bytes);
    }

    #[test]
    fn serialize_preserves_duplicate_header_order() {
        let bytes =
            b"GET / HTTP/1.1\r\nHost: a.example.com\r\nX-Other: 1\r\nHost: b.example.com\r\n\r\n"
                .to_vec();
        let req = parse_request(&RawRequest::new(bytes.clone()), &Default::default()).unwrap();
        assert_eq!(serialize_request(&req).0, bytes);
    }

    #[test]
    fn added_header_serializes_exactly_once() {
        let bytes = b"GET / HTTP/1.1\r\nHost: h\r\n\r\n".to_vec();
        let mut req = parse_request(&RawRequest::new(bytes), &Default::default()).unwrap();
        req.headers.push(Header::new("HTTP-Sync", "{}"));
        let out = serialize_request(&req);
        let reparsed = parse_request(&out, &Default::default()).unwrap();
        assert_eq!(reparsed.headers_named("http-sync").count(), 1);
    }

    #[test]
    fn caps_enforced() {
        let mut big = Vec::from(&b"GET / HTTP/1.1\r\n"[..]);
        big.extend_from_slice(b"X: ");
        big.extend(std::iter::repeat(b'a').take(MAX_HEADER_LINE_BYTES + 1));
        big.extend_from_slice(b"\r\n\r\n");
        assert_eq!(
            parse_request(&RawRequest::new(big), &Default::default()),
            Err(ParseError::HeaderLineTooLarge)
        );

        let mut huge = Vec::from(&b"GET / HTTP/1.1\r\n"[..]);
        for i in 0..8192 {
            huge.extend_from_slice(format!("X-{i}: aaaaaaaa\r\n").as_bytes());
        }
        huge.extend_from_slice(b"\r\n");
        assert_eq!(
            parse_request(&RawRequest::new(huge), &Default::default()),
            Err(ParseError::HeadTooLarge)
        );
    }

    #[test]
    fn malformed_inputs_rejected() {
        let cases: &[&[u8]] = &[
            b"GET /\r\nHost: h\r\n\r\n",                        // missing version
            b"GET  / HTTP/1.1\r\nHost: h\r\n\r\n",              // double space
            b"GET / HTTP/2.0\r\nHost: h\r\n\r\n",               // unsupported version
            b"GET / HTTP/1.1\r\n Host: h\r\n\r\n",              // leading whitespace name
            b"GET / HTTP/1.1\r\nHost : h\r\n\r\n",              // space before colon
            b"GET / HTTP/1.1\r\nNoColon\r\n\r\n",               // no colon
            b"GET / HTTP/1.1\r\nContent-Length: 12x\r\n\r\n",   // non-digit CL
            b"POST / HTTP/1.1\r\nContent-Length: 1\r\nContent-Length: 2\r\n\r\n", // dup CL
        ];
        for c in cases {
            assert!(
                parse_request(&RawRequest::new(c.to_vec()), &Default::default()).is_err(),
                "accepted: {:?}",
                String::from_utf8_lossy(c)
            );
        }
        assert_eq!(
            parse_request(
                &RawRequest::new(b"GET / HTTP/1.1\r\nHost: h\r\n".to_vec()),
                &Default::default()
            ),
            Err(ParseError::UnterminatedHead)
        );
    }

    #[test]
    fn head_len_marks_body_start() {
        let raw = RawRequest::new(
            b"POST / HTTP/1.1\r\nHost: h\r\nContent-Length: 13\r\n\r\npotatoandeggs".to_vec(),
        );
        let req = parse_request(&raw, &Default::default()).unwrap();
        assert_eq!(&raw.as_bytes()[req.head_len..], b"potatoandeggs");
    }
}
