//! A corpus of request payloads covering every parsing knob: benign
//! requests, framing-ambiguous smuggling vectors, path-confusion URLs,
//! host-confusion shapes, and fat GETs. Every payload is a complete byte
//! string a client writes in one piece.
//!
//! Corpus rule: when a payload carries both a Content-Length and body bytes
//! that some personality may read as chunked, the body region must be long
//! enough for *either* interpretation to complete without waiting on bytes
//! that never come. Leftover bytes after the shorter interpretation are the
//! point — they are what a confused hop treats as the next request.

/// The canonical smuggling request: `Content-Length: 51` against a
/// `Transfer-Encoding` value that only some parsers accept as chunked. Read
/// by length, the body is 51 bytes. Read as chunked, the body ends
/// immediately and those 51 bytes are a complete second request for
/// `/admin`.
pub fn listing1() -> Vec<u8> {
    request(
        "POST /public HTTP/1.1",
        &[
            ("Host", "www.example.com"),
            ("Content-Length", "51"),
            ("Transfer-Encoding", ";chunked"),
        ],
        b"0\r\n\r\nGET /admin HTTP/1.1\r\nHost: www.example.com\r\n\r\n",
    )
}

/// Assemble a raw request from parts. No headers are added implicitly.
pub fn request(request_line: &str, headers: &[(&str, &str)], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(256 + body.len());
    out.extend_from_slice(request_line.as_bytes());
    out.extend_from_slice(b"\r\n");
    for (name, value) in headers {
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(value.as_bytes());
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(body);
    out
}

/// Chunk-encode `body` as `chunks` roughly equal chunks (clamped to the
/// body length; zero-size chunks are impossible). An empty body is just the
/// terminal chunk.
pub fn chunk_split(body: &[u8], chunks: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + chunks * 8 + 5);
    if !body.is_empty() {
        let n = chunks.clamp(1, body.len());
        let base = body.len() / n;
        let extra = body.len() % n;
        let mut off = 0;
        for i in 0..n {
            let size = base + usize::from(i < extra);
            out.extend_from_slice(format!("{size:x}\r\n").as_bytes());
            out.extend_from_slice(&body[off..off + size]);
            out.extend_from_slice(b"\r\n");
            off += size;
        }
    }
    out.extend_from_slice(b"0\r\n\r\n");
    out
}

/// One named corpus payload.
pub struct CorpusEntry {
    pub name: &'static str,
    pub bytes: Vec<u8>,
}

/// The full corpus. Order is stable; names are unique.
pub fn corpus() -> Vec<CorpusEntry> {
    let host = ("Host", "www.example.com");
    let mut entries = Vec::new();
    let mut add = |name: &'static str, bytes: Vec<u8>| entries.push(CorpusEntry { name, bytes });

    add("get-root", request("GET / HTTP/1.1", &[host], b""));
    add("get-deep-path", request("GET /a/b/c?q=1 HTTP/1.1", &[host], b""));
    add(
        "post-cl-13",
        request(
            "POST /submit HTTP/1.1",
            &[host, ("Content-Length", "13")],
            b"potatoandeggs",
        ),
    );
    add(
        "post-chunked-potato",
        request(
            "POST /submit HTTP/1.1",
            &[host, ("Transfer-Encoding", "chunked")],
            b"6\r\npotato\r\n3\r\nand\r\n4\r\neggs\r\n0\r\n\r\n",
        ),
    );
    add(
        "post-chunked-trailer",
        request(
            "POST /submit HTTP/1.1",
            &[host, ("Transfer-Encoding", "chunked")],
            b"6\r\npotato\r\n0\r\nX-Checksum: abc\r\n\r\n",
        ),
    );
    add("smuggle-cl-te", listing1());
    // Both framings complete: 15 bytes by length, and those same bytes are a
    // well-formed 5-byte chunk stream. The interpretations still disagree
    // about how long the body is.
    add(
        "cl-te-both-valid",
        request(
            "POST /submit HTTP/1.1",
            &[host, ("Content-Length", "15"), ("Transfer-Encoding", "chunked")],
            b"5\r\nhello\r\n0\r\n\r\n",
        ),
    );
    add("wcd-path-style", request("GET /account.php/image.png HTTP/1.1", &[host], b""));
    add("wcd-encoded-query", request("GET /account.php%3Fimage.png HTTP/1.1", &[host], b""));
    add(
        "absolute-uri-conflict",
        request(
            "GET http://admin.example.com/dashboard HTTP/1.1",
            &[("Host", "public.example.com")],
            b"",
        ),
    );
    add(
        "absolute-uri-match",
        request("GET http://www.example.com/x HTTP/1.1", &[host], b""),
    );
    add(
        "dup-host-differ",
        request("GET / HTTP/1.1", &[("Host", "a.example.com"), ("Host", "b.example.com")], b""),
    );
    add(
        "dup-host-same",
        request("GET / HTTP/1.1", &[("Host", "x.example.com"), ("Host", "x.example.com")], b""),
    );
    add(
        "fat-get-13",
        request(
            "GET /profile HTTP/1.1",
            &[host, ("Content-Length", "13")],
            b"potatoandeggs",
        ),
    );
    // The fat-GET body is itself a complete request: a hop that ignores GET
    // bodies leaves it in the stream as a smuggled follow-up.
    add(
        "fat-get-smuggle",
        request(
            "GET /profile HTTP/1.1",
            &[host, ("Content-Length", "54")],
            b"GET /smuggled HTTP/1.1\r\nHost: internal.example.com\r\n\r\n",
        ),
    );
    add(
        "post-chunked-1000",
        request(
            "POST /submit HTTP/1.1",
            &[host, ("Transfer-Encoding", "chunked")],
            &chunk_split(&[b'x'; 1000], 1000),
        ),
    );
    add("post-cl-0", request("POST /submit HTTP/1.1", &[host, ("Content-Length", "0")], b""));
    add(
        "post-chunked-empty",
        request(
            "POST /submit HTTP/1.1",
            &[host, ("Transfer-Encoding", "chunked")],
            b"0\r\n\r\n",
        ),
    );
    // No Content-Length and a Transfer-Encoding only some parsers accept:
    // personalities that ignore the invalid value see a bodyless request and
    // the chunk stream below becomes residue.
    add(
        "post-te-invalid-nocl",
        request(
            "POST /submit HTTP/1.1",
            &[host, ("Transfer-Encoding", ";chunked")],
            b"5\r\nhello\r\n0\r\n\r\n",
        ),
    );
    add("dotdot-encoded", request("GET /a/%2e%2e/b HTTP/1.1", &[host], b""));
    add("path-params-semi", request("GET /account.php;v=1/img.png HTTP/1.1", &[host], b""));
    add(
        "big-cl-100k",
        request(
            "POST /upload HTTP/1.1",
            &[host, ("Content-Length", "100000")],
            &vec![b'a'; 100000],
        ),
    );
    add("host-port", request("GET / HTTP/1.1", &[("Host", "www.example.com:8080")], b""));
    add(
        "chunk-ext",
        request(
            "POST /submit HTTP/1.1",
            &[host, ("Transfer-Encoding", "chunked")],
            b"6;x=y\r\npotato\r\n0\r\n\r\n",
        ),
    );

    entries
}
